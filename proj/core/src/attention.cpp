#include "mca/attention.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "mca/ops.hpp"

namespace mca {

std::string AttentionConfig::name() const {
  switch (kind) {
    case AttentionKind::none:
      return "none";
    case AttentionKind::se:
      return reduction == 16 ? "se" : "se" + std::to_string(reduction);
    case AttentionKind::eca:
      return "eca";
    case AttentionKind::mca:
      break;
  }
  std::string base;
  if (moments == std::vector<int>{1, 2}) {
    base = "mca-e";
  } else if (moments == std::vector<int>{1, 3}) {
    base = "mca-s";
  } else if (moments == std::vector<int>{1, 2, 3}) {
    base = "mca-triple";
  } else if (moments.size() == 1) {
    base = "mca-mono" + std::to_string(moments[0]);
  } else {
    base = "mca-dual";
    for (int m : moments) base += std::to_string(m);
  }
  return fusion == Fusion::cfc ? base + "-cfc" : base;
}

void AttentionConfig::validate() const {
  auto check_kernel = [](int k) {
    if (k % 2 == 0) throw ConfigError("kernel size must be odd, got " + std::to_string(k));
    if (k < 1 || k > 11) throw ConfigError("kernel size must be in [1,11], got " + std::to_string(k));
  };
  switch (kind) {
    case AttentionKind::none:
      return;
    case AttentionKind::se:
      if (reduction < 1) throw ConfigError("SE reduction must be positive");
      return;
    case AttentionKind::eca:
      if (kernel_size != 0) check_kernel(kernel_size);
      return;
    case AttentionKind::mca:
      break;
  }
  if (moments.empty()) throw ConfigError("MCA needs at least one moment order");
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (moments[i] < 1 || moments[i] > 3) {
      throw ConfigError("moment order " + std::to_string(moments[i]) + " outside {1,2,3}");
    }
    if (i > 0 && moments[i] <= moments[i - 1]) throw ConfigError("moment orders must be ascending");
  }
  if (fusion == Fusion::cmc) check_kernel(kernel_size);
  if (learn_alpha && !(alpha_init > 0.0 && alpha_init < 1.0)) {
    throw ConfigError("learnable alpha must start inside (0,1)");
  }
}

AttentionConfig no_attention() { return {}; }

namespace {
AttentionConfig mca_with(std::vector<int> moments, int kernel) {
  AttentionConfig cfg;
  cfg.kind = AttentionKind::mca;
  cfg.moments = std::move(moments);
  cfg.kernel_size = kernel;
  return cfg;
}
}  // namespace

AttentionConfig mca_e() { return mca_with({1, 2}, 11); }
AttentionConfig mca_s() { return mca_with({1, 3}, 3); }
AttentionConfig mca_triple() { return mca_with({1, 2, 3}, 3); }
AttentionConfig mca_mono(int order) { return mca_with({order}, 3); }
AttentionConfig mca_dual(int first, int second) { return mca_with({first, second}, 3); }

AttentionConfig se_attention(int reduction) {
  AttentionConfig cfg;
  cfg.kind = AttentionKind::se;
  cfg.reduction = reduction;
  return cfg;
}

AttentionConfig eca_attention(int kernel_size) {
  AttentionConfig cfg;
  cfg.kind = AttentionKind::eca;
  cfg.kernel_size = kernel_size;
  return cfg;
}

namespace {
std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}
}  // namespace

AttentionConfig parse_attention(std::string_view name, std::optional<int> kernel) {
  AttentionConfig cfg;
  bool cfc = false;
  std::string_view base = name;
  if (base.size() > 4 && base.ends_with("-cfc")) {
    cfc = true;
    base.remove_suffix(4);
  }
  auto unknown = [&] { return ConfigError("unknown attention variant '" + std::string(name) + "'"); };
  if (base == "none") {
    cfg = no_attention();
  } else if (base == "mca-e") {
    cfg = mca_e();
  } else if (base == "mca-s") {
    cfg = mca_s();
  } else if (base == "mca-triple") {
    cfg = mca_triple();
  } else if (base.starts_with("mca-mono")) {
    auto order = parse_int(base.substr(8));
    if (!order) throw unknown();
    cfg = mca_mono(*order);
  } else if (base.starts_with("mca-dual")) {
    auto digits = base.substr(8);
    if (digits.size() != 2) throw unknown();
    cfg = mca_dual(digits[0] - '0', digits[1] - '0');
  } else if (base == "eca") {
    cfg = eca_attention();
  } else if (base.starts_with("se")) {
    auto rest = base.substr(2);
    if (rest.empty()) {
      cfg = se_attention();
    } else {
      auto r = parse_int(rest);
      if (!r) throw unknown();
      cfg = se_attention(*r);
    }
  } else {
    throw unknown();
  }
  if (cfc) {
    if (cfg.kind != AttentionKind::mca) throw unknown();
    cfg.fusion = Fusion::cfc;
  }
  if (kernel) {
    if (cfg.kind != AttentionKind::mca && cfg.kind != AttentionKind::eca) {
      throw ConfigError("--kernel applies only to mca and eca variants");
    }
    cfg.kernel_size = *kernel;
  }
  cfg.validate();
  return cfg;
}

int eca_adaptive_kernel(std::size_t channels) {
  const int t = static_cast<int>(std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0));
  return t % 2 == 1 ? t : t + 1;
}

int resolve_kernel(const AttentionConfig& cfg, std::size_t channels) {
  if (cfg.kind == AttentionKind::eca && cfg.kernel_size == 0) return eca_adaptive_kernel(channels);
  return cfg.kernel_size;
}

template <typename Real>
std::size_t CmcParams<Real>::parameter_count() const {
  std::size_t n = kernel.defined() ? kernel.size() : 0;
  if (gamma.defined()) n += gamma.size() + beta.size();
  if (alpha_logit.defined()) n += alpha_logit.size();
  return n;
}

template <typename Real>
CmcParams<Real> make_cmc_params(std::size_t rows, std::size_t channels, const AttentionConfig& cfg) {
  const int k = resolve_kernel(cfg, channels);
  CmcParams<Real> p;
  const auto init = static_cast<Real>(1.0 / (static_cast<double>(rows) * k));
  p.kernel = BasicTensor<Real>(Shape{1, rows, static_cast<std::size_t>(k)}, init).set_requires_grad();
  if (cfg.use_affine) {
    p.gamma = BasicTensor<Real>(Shape{channels}, Real{1}).set_requires_grad();
    p.beta = BasicTensor<Real>(Shape{channels}, Real{0}).set_requires_grad();
  }
  if (cfg.learn_alpha) {
    const double logit = std::log(cfg.alpha_init / (1.0 - cfg.alpha_init));
    p.alpha_logit = BasicTensor<Real>(Shape{rows}, static_cast<Real>(logit)).set_requires_grad();
  } else {
    p.fixed_alpha = static_cast<Real>(cfg.alpha_init);
  }
  return p;
}

namespace {

template <typename Real>
BasicTensor<Real> weight_rows(const MomentVector<Real>& m, const CmcParams<Real>& p) {
  if (p.alpha_logit.defined()) return scale_rows(m.values, sigmoid(p.alpha_logit));
  if (p.fixed_alpha == Real{1}) return m.values;
  return scale(m.values, p.fixed_alpha);
}

template <typename Real>
void check_rows(const MomentVector<Real>& m, std::size_t rows, const char* op) {
  if (m.values.rank() != 3 || m.values.dim(1) != m.rows()) {
    throw ShapeError(std::string(op) + ": malformed moment vector " + to_string(m.values.shape()));
  }
  if (m.rows() != rows) {
    throw ShapeError(std::string(op) + ": parameters expect " + std::to_string(rows) + " moment rows, got " +
                     std::to_string(m.rows()));
  }
}

}  // namespace

template <typename Real>
BasicTensor<Real> cmc_forward(const MomentVector<Real>& m, const CmcParams<Real>& p, bool use_affine) {
  check_rows(m, p.kernel.dim(1), "cmc_forward");
  const std::size_t n = m.values.dim(0), c = m.values.dim(2), k = p.kernel.dim(2);
  if (c < k) {
    throw ShapeError("cmc_forward: " + std::to_string(c) + " channels is fewer than kernel size " +
                     std::to_string(k) + "; the kernel would be truncated");
  }
  auto u = reshape(conv1d_channel(weight_rows(m, p), p.kernel, k / 2), Shape{n, c});
  if (!use_affine) return u;
  if (!p.gamma.defined()) throw ConfigError("cmc_forward: affine requested but parameters have none");
  return channel_affine(u, p.gamma, p.beta);
}

template <typename Real>
BasicTensor<Real> cfc_forward(const MomentVector<Real>& m, const BasicTensor<Real>& weights) {
  if (weights.rank() != 2) throw ShapeError("cfc_forward: weights must be [K,C], got " + to_string(weights.shape()));
  check_rows(m, weights.dim(0), "cfc_forward");
  return cfc_fuse(m.values, weights);
}

template <typename Real>
GateOutput<Real> recalibrate(const BasicTensor<Real>& x, BasicTensor<Real> fused) {
  GateOutput<Real> out;
  out.fused = std::move(fused);
  out.gate = sigmoid(out.fused);
  out.output = broadcast_mul(x, reshape(out.gate, Shape{x.dim(0), x.dim(1), 1, 1}));
  return out;
}

template <typename Real>
GateOutput<Real> mca_forward(const BasicTensor<Real>& x, const AttentionConfig& cfg,
                             const CmcParams<Real>& p) {
  auto m = aggregate(x, std::span<const int>(cfg.moments));
  return recalibrate(x, cmc_forward(m, p, cfg.use_affine));
}

template <typename Real>
GateOutput<Real> eca_forward(const BasicTensor<Real>& x, const BasicTensor<Real>& kernel) {
  if (kernel.rank() != 3 || kernel.dim(0) != 1 || kernel.dim(1) != 1) {
    throw ShapeError("eca_forward: kernel must be [1,1,k], got " + to_string(kernel.shape()));
  }
  const std::size_t k = kernel.dim(2);
  if (k % 2 == 0) throw ConfigError("eca_forward: kernel size must be odd, got " + std::to_string(k));
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto pooled = reshape(reduce_spatial(x), Shape{n, 1, c});
  auto fused = reshape(conv1d_channel(pooled, kernel, k / 2), Shape{n, c});
  return recalibrate(x, std::move(fused));
}

template <typename Real>
GateOutput<Real> se_forward(const BasicTensor<Real>& x, const SeParams<Real>& p) {
  auto pooled = reduce_spatial(x);
  auto hidden = relu(linear(pooled, p.w1, p.b1));
  return recalibrate(x, linear(hidden, p.w2, p.b2));
}

template <typename Real>
std::size_t AttentionBlock<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

template <typename Real>
McaBlock<Real>::McaBlock(const AttentionConfig& cfg, std::size_t channels) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t rows = cfg_.moments.size();
  if (cfg_.fusion == Fusion::cmc) {
    const auto k = static_cast<std::size_t>(resolve_kernel(cfg_, channels));
    if (channels < k) {
      throw ConfigError("MCA block with " + std::to_string(channels) + " channels cannot use kernel size " +
                        std::to_string(k));
    }
    params_ = make_cmc_params<Real>(rows, channels, cfg_);
  } else {
    // CFC fusion keeps alpha and the affine stage but replaces the shared kernel.
    AttentionConfig no_kernel = cfg_;
    no_kernel.kernel_size = 1;
    params_ = make_cmc_params<Real>(rows, channels, no_kernel);
    params_.kernel = BasicTensor<Real>();
    cfc_weights_ = BasicTensor<Real>(Shape{rows, channels}, static_cast<Real>(1.0 / static_cast<double>(rows)))
                       .set_requires_grad();
  }
  if (cfg_.standardize_moments) moment_scale_ = BasicTensor<Real>(Shape{rows}, Real{1});
}

template <typename Real>
GateOutput<Real> McaBlock<Real>::forward(const BasicTensor<Real>& x, bool training) {
  auto m = aggregate(x, std::span<const int>(cfg_.moments));
  if (cfg_.standardize_moments) {
    const std::size_t n = m.values.dim(0), rows = m.rows(), c = m.values.dim(2);
    if (training) {
      auto scales = moment_scale_.mutable_values();
      auto v = m.values.values();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) acc += std::abs(static_cast<double>(v[(b * rows + r) * c + ch]));
        const double batch_scale = acc / static_cast<double>(n * c);
        scales[r] = static_cast<Real>(0.9 * scales[r] + 0.1 * batch_scale);
      }
    }
    std::vector<Real> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) inv[r] = Real{1} / (moment_scale_.values()[r] + Real(1e-5));
    m.values = scale_rows(m.values, BasicTensor<Real>(Shape{rows}, std::move(inv)));
  }
  if (cfg_.fusion == Fusion::cmc) return recalibrate(x, cmc_forward(m, params_, cfg_.use_affine));
  auto fused = cfc_forward(MomentVector<Real>{weight_rows(m, params_), m.orders}, cfc_weights_);
  if (cfg_.use_affine) fused = channel_affine(fused, params_.gamma, params_.beta);
  return recalibrate(x, std::move(fused));
}

template <typename Real>
std::vector<NamedTensor<Real>> McaBlock<Real>::parameters() const {
  std::vector<NamedTensor<Real>> out;
  if (params_.kernel.defined()) out.push_back({"cmc.kernel", params_.kernel});
  if (cfc_weights_.defined()) out.push_back({"cfc.weight", cfc_weights_});
  if (params_.gamma.defined()) {
    out.push_back({"affine.gamma", params_.gamma});
    out.push_back({"affine.beta", params_.beta});
  }
  if (params_.alpha_logit.defined()) out.push_back({"alpha_logit", params_.alpha_logit});
  return out;
}

template <typename Real>
std::vector<NamedTensor<Real>> McaBlock<Real>::buffers() const {
  if (!moment_scale_.defined()) return {};
  return {{"moment_scale", moment_scale_}};
}

template <typename Real>
EcaBlock<Real>::EcaBlock(std::size_t channels, int kernel_size) {
  const int k = kernel_size == 0 ? eca_adaptive_kernel(channels) : kernel_size;
  if (k % 2 == 0) throw ConfigError("ECA kernel size must be odd, got " + std::to_string(k));
  kernel_ = BasicTensor<Real>(Shape{1, 1, static_cast<std::size_t>(k)}, static_cast<Real>(1.0 / k))
                .set_requires_grad();
}

template <typename Real>
GateOutput<Real> EcaBlock<Real>::forward(const BasicTensor<Real>& x, bool) {
  return eca_forward(x, kernel_);
}

template <typename Real>
std::vector<NamedTensor<Real>> EcaBlock<Real>::parameters() const {
  return {{"eca.kernel", kernel_}};
}

template <typename Real>
SeBlock<Real>::SeBlock(std::size_t channels, int reduction, std::mt19937_64& rng) {
  if (reduction < 1 || channels % static_cast<std::size_t>(reduction) != 0) {
    throw ConfigError("SE: " + std::to_string(channels) + " channels not divisible by reduction " +
                      std::to_string(reduction));
  }
  const std::size_t hidden = channels / static_cast<std::size_t>(reduction);
  auto uniform = [&rng](std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<Real> v(count);
    for (auto& x : v) x = static_cast<Real>(dist(rng));
    return v;
  };
  params_.w1 = BasicTensor<Real>(Shape{hidden, channels}, uniform(hidden * channels, channels)).set_requires_grad();
  params_.b1 = BasicTensor<Real>(Shape{hidden}, Real{0}).set_requires_grad();
  params_.w2 = BasicTensor<Real>(Shape{channels, hidden}, uniform(channels * hidden, hidden)).set_requires_grad();
  params_.b2 = BasicTensor<Real>(Shape{channels}, Real{0}).set_requires_grad();
}

template <typename Real>
GateOutput<Real> SeBlock<Real>::forward(const BasicTensor<Real>& x, bool) {
  return se_forward(x, params_);
}

template <typename Real>
std::vector<NamedTensor<Real>> SeBlock<Real>::parameters() const {
  return {{"se.fc1.weight", params_.w1},
          {"se.fc1.bias", params_.b1},
          {"se.fc2.weight", params_.w2},
          {"se.fc2.bias", params_.b2}};
}

template <typename Real>
std::unique_ptr<AttentionBlock<Real>> make_attention(const AttentionConfig& cfg, std::size_t channels,
                                                     std::mt19937_64& rng) {
  cfg.validate();
  switch (cfg.kind) {
    case AttentionKind::none:
      return nullptr;
    case AttentionKind::mca:
      return std::make_unique<McaBlock<Real>>(cfg, channels);
    case AttentionKind::eca:
      return std::make_unique<EcaBlock<Real>>(channels, cfg.kernel_size);
    case AttentionKind::se:
      return std::make_unique<SeBlock<Real>>(channels, cfg.reduction, rng);
  }
  return nullptr;
}

std::size_t attention_block_params(const AttentionConfig& cfg, std::size_t channels) {
  std::mt19937_64 rng(0);
  auto block = make_attention<float>(cfg, channels, rng);
  return block ? block->parameter_count() : 0;
}

ParamCountReport count_params(const std::vector<StageCount>& stages, const AttentionConfig& cfg) {
  cfg.validate();
  ParamCountReport r;
  r.variant = cfg.name();
  for (const auto& s : stages) {
    r.counted += s.blocks * attention_block_params(cfg, s.channels);
    const std::size_t nc = s.blocks * s.channels;
    switch (cfg.kind) {
      case AttentionKind::none:
        break;
      case AttentionKind::mca:
        if (cfg.fusion == Fusion::cmc) {
          r.closed_form += nc * 2;
        } else {
          r.closed_form += nc * (cfg.moments.size() + 2);
        }
        if (cfg.use_affine) r.affine_term += nc * 2;
        break;
      case AttentionKind::se:
        r.closed_form += 2 * s.blocks * s.channels * s.channels / static_cast<std::size_t>(cfg.reduction);
        break;
      case AttentionKind::eca:
        r.closed_form += s.blocks * static_cast<std::size_t>(resolve_kernel(cfg, s.channels));
        break;
    }
  }
  return r;
}

#define MCA_INSTANTIATE_ATTENTION(Real)                                                                   \
  template struct CmcParams<Real>;                                                                      \
  template CmcParams<Real> make_cmc_params<Real>(std::size_t, std::size_t, const AttentionConfig&);     \
  template BasicTensor<Real> cmc_forward(const MomentVector<Real>&, const CmcParams<Real>&, bool);      \
  template BasicTensor<Real> cfc_forward(const MomentVector<Real>&, const BasicTensor<Real>&);          \
  template GateOutput<Real> recalibrate(const BasicTensor<Real>&, BasicTensor<Real>);                   \
  template GateOutput<Real> mca_forward(const BasicTensor<Real>&, const AttentionConfig&,               \
                                        const CmcParams<Real>&);                                        \
  template GateOutput<Real> eca_forward(const BasicTensor<Real>&, const BasicTensor<Real>&);            \
  template GateOutput<Real> se_forward(const BasicTensor<Real>&, const SeParams<Real>&);                \
  template class AttentionBlock<Real>;                                                                  \
  template class McaBlock<Real>;                                                                        \
  template class EcaBlock<Real>;                                                                        \
  template class SeBlock<Real>;                                                                         \
  template std::unique_ptr<AttentionBlock<Real>> make_attention<Real>(const AttentionConfig&,           \
                                                                      std::size_t, std::mt19937_64&);

MCA_INSTANTIATE_ATTENTION(float)
MCA_INSTANTIATE_ATTENTION(double)

#undef MCA_INSTANTIATE_ATTENTION

}  // namespace mca
