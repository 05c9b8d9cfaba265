#include "mca/model.hpp"

#include <cmath>
#include <random>

#include "mca/errors.hpp"
#include "mca/ops.hpp"
#include "mca/seeds.hpp"

namespace mca {

void ModelSpec::validate() const {
  if (in_channels == 0 || stem_channels == 0 || classes == 0) {
    throw ConfigError("model needs positive input channels, stem channels and classes");
  }
  if (stages.empty()) throw ConfigError("model needs at least one stage");
  std::size_t prev = stem_channels;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.blocks == 0 || s.channels == 0) {
      throw ConfigError("stage " + std::to_string(i + 1) + " needs positive blocks and channels");
    }
    if (s.stride != 1 && s.stride != 2) {
      throw ConfigError("stage " + std::to_string(i + 1) + " stride must be 1 or 2, got " + std::to_string(s.stride));
    }
    if (s.channels < prev) {
      throw ConfigError("stage channels must be non-decreasing (stage " + std::to_string(i + 1) + ": " +
                        std::to_string(s.channels) + " < " + std::to_string(prev) + ")");
    }
    prev = s.channels;
  }
  attention.validate();
  if (attention.kind == AttentionKind::mca && attention.fusion == Fusion::cmc) {
    for (const auto& s : stages) {
      if (s.channels < static_cast<std::size_t>(attention.kernel_size)) {
        throw ConfigError("stage with " + std::to_string(s.channels) + " channels is narrower than MCA kernel " +
                          std::to_string(attention.kernel_size));
      }
    }
  }
  if (attention.kind == AttentionKind::se) {
    for (const auto& s : stages) {
      if (s.channels % static_cast<std::size_t>(attention.reduction) != 0) {
        throw ConfigError("stage channels " + std::to_string(s.channels) + " not divisible by SE reduction " +
                          std::to_string(attention.reduction));
      }
    }
  }
}

std::vector<StageCount> ModelSpec::stage_counts() const {
  std::vector<StageCount> out;
  for (const auto& s : stages) out.push_back({s.blocks, s.channels});
  return out;
}

std::string to_string(Arch arch) { return arch == Arch::mini_cnn ? "mini-cnn" : "mini-resnet"; }

Arch parse_arch(const std::string& name) {
  if (name == "mini-cnn") return Arch::mini_cnn;
  if (name == "mini-resnet" || name == "mini") return Arch::mini_resnet;
  throw ConfigError("unknown architecture '" + name + "'");
}

std::string to_string(NormKind norm) { return norm == NormKind::affine ? "affine" : "batch"; }

NormKind parse_norm(const std::string& name) {
  if (name == "affine") return NormKind::affine;
  if (name == "batch") return NormKind::batch;
  throw ConfigError("unknown normalization '" + name + "'");
}

std::vector<StageCount> resnet50_stages() { return {{3, 256}, {4, 512}, {6, 1024}, {3, 2048}}; }

namespace {

template <typename Real>
struct Conv {
  BasicTensor<Real> weight;
  std::size_t stride = 1;
  std::size_t pad = 0;

  BasicTensor<Real> operator()(const BasicTensor<Real>& x) const { return conv2d(x, weight, stride, pad); }
};

template <typename Real>
struct Norm {
  NormKind kind = NormKind::affine;
  BasicTensor<Real> gamma, beta;
  BasicTensor<Real> running_mean, running_var;  // batch norm only

  BasicTensor<Real> operator()(const BasicTensor<Real>& x, bool training) {
    if (kind == NormKind::affine) return channel_affine(x, gamma, beta);
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }
};

template <typename Real>
struct Block {
  Conv<Real> conv1, conv2, shortcut;
  Norm<Real> norm1, norm2, shortcut_norm;
  bool has_conv2 = false;
  bool has_shortcut = false;
  std::unique_ptr<AttentionBlock<Real>> attention;
};

template <typename Real>
Conv<Real> he_conv(std::mt19937_64& rng, std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<Real> w(cout * cin * k * k);
  for (auto& v : w) v = static_cast<Real>(dist(rng));
  return {BasicTensor<Real>(Shape{cout, cin, k, k}, std::move(w)).set_requires_grad(), stride, k / 2};
}

template <typename Real>
Norm<Real> make_norm(NormKind kind, std::size_t c) {
  Norm<Real> n;
  n.kind = kind;
  n.gamma = BasicTensor<Real>(Shape{c}, Real{1}).set_requires_grad();
  n.beta = BasicTensor<Real>(Shape{c}, Real{0}).set_requires_grad();
  if (kind == NormKind::batch) {
    n.running_mean = BasicTensor<Real>(Shape{c}, Real{0});
    n.running_var = BasicTensor<Real>(Shape{c}, Real{1});
  }
  return n;
}

}  // namespace

template <typename Real>
struct Model<Real>::Impl {
  Conv<Real> stem;
  Norm<Real> stem_norm;
  std::vector<Block<Real>> blocks;
  std::vector<std::string> block_names;
  BasicTensor<Real> fc_weight, fc_bias;
};

template <typename Real>
Model<Real>::Model(ModelSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed), impl_(std::make_unique<Impl>()) {
  spec_.validate();
  std::mt19937_64 rng(derive_seed(seed, kBackboneSeedOffset));
  std::mt19937_64 attention_rng(derive_seed(seed, kAttentionSeedOffset));
  auto& m = *impl_;
  m.stem = he_conv<Real>(rng, spec_.stem_channels, spec_.in_channels, 3, 1);
  m.stem_norm = make_norm<Real>(spec_.norm, spec_.stem_channels);
  std::size_t in_c = spec_.stem_channels;
  const bool residual = spec_.arch == Arch::mini_resnet;
  for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
    const auto& st = spec_.stages[s];
    for (std::size_t b = 0; b < st.blocks; ++b) {
      const std::size_t stride = b == 0 ? st.stride : 1;
      Block<Real> blk;
      blk.conv1 = he_conv<Real>(rng, st.channels, in_c, 3, stride);
      blk.norm1 = make_norm<Real>(spec_.norm, st.channels);
      if (residual) {
        blk.has_conv2 = true;
        blk.conv2 = he_conv<Real>(rng, st.channels, st.channels, 3, 1);
        blk.norm2 = make_norm<Real>(spec_.norm, st.channels);
        if (stride != 1 || in_c != st.channels) {
          blk.has_shortcut = true;
          blk.shortcut = he_conv<Real>(rng, st.channels, in_c, 1, stride);
          blk.shortcut_norm = make_norm<Real>(spec_.norm, st.channels);
        }
      }
      blk.attention = make_attention<Real>(spec_.attention, st.channels, attention_rng);
      m.blocks.push_back(std::move(blk));
      m.block_names.push_back("stage" + std::to_string(s + 1) + ".block" + std::to_string(b));
      in_c = st.channels;
    }
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
  std::uniform_real_distribution<double> fc_dist(-bound, bound);
  std::vector<Real> fc(spec_.classes * in_c);
  for (auto& v : fc) v = static_cast<Real>(fc_dist(rng));
  m.fc_weight = BasicTensor<Real>(Shape{spec_.classes, in_c}, std::move(fc)).set_requires_grad();
  m.fc_bias = BasicTensor<Real>(Shape{spec_.classes}, Real{0}).set_requires_grad();
}

template <typename Real>
Model<Real>::~Model() = default;
template <typename Real>
Model<Real>::Model(Model&&) noexcept = default;
template <typename Real>
Model<Real>& Model<Real>::operator=(Model&&) noexcept = default;

template <typename Real>
BasicTensor<Real> Model<Real>::forward(const BasicTensor<Real>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw ShapeError("model expects [N," + std::to_string(spec_.in_channels) + ",H,W] input, got " +
                     to_string(x.shape()));
  }
  auto& m = *impl_;
  auto h = relu(m.stem_norm(m.stem(x), training));
  for (auto& blk : m.blocks) {
    auto y = blk.norm1(blk.conv1(h), training);
    if (blk.has_conv2) {
      y = blk.norm2(blk.conv2(relu(y)), training);
      if (blk.attention) y = blk.attention->forward(y, training).output;
      auto skip = blk.has_shortcut ? blk.shortcut_norm(blk.shortcut(h), training) : h;
      h = relu(add(y, skip));
    } else {
      if (blk.attention) y = blk.attention->forward(y, training).output;
      h = relu(y);
    }
  }
  return linear(reduce_spatial(h), m.fc_weight, m.fc_bias);
}

template <typename Real>
std::vector<int> Model<Real>::predict(const BasicTensor<Real>& x) {
  NoGradGuard guard;
  const auto logits = forward(x, false);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto v = logits.values();
  std::vector<int> labels(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (v[r * k + j] > v[r * k + best]) best = j;
    }
    labels[r] = static_cast<int>(best);
  }
  return labels;
}

template <typename Real>
std::vector<NamedTensor<Real>> Model<Real>::parameters() const {
  const auto& m = *impl_;
  std::vector<NamedTensor<Real>> out;
  auto add_norm = [&out](const std::string& prefix, const Norm<Real>& n) {
    out.push_back({prefix + ".gamma", n.gamma});
    out.push_back({prefix + ".beta", n.beta});
  };
  out.push_back({"stem.conv.weight", m.stem.weight});
  add_norm("stem.norm", m.stem_norm);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& blk = m.blocks[i];
    const auto& p = m.block_names[i];
    out.push_back({p + ".conv1.weight", blk.conv1.weight});
    add_norm(p + ".norm1", blk.norm1);
    if (blk.has_conv2) {
      out.push_back({p + ".conv2.weight", blk.conv2.weight});
      add_norm(p + ".norm2", blk.norm2);
    }
    if (blk.has_shortcut) {
      out.push_back({p + ".shortcut.weight", blk.shortcut.weight});
      add_norm(p + ".shortcut_norm", blk.shortcut_norm);
    }
    if (blk.attention) {
      for (auto& t : blk.attention->parameters()) out.push_back({p + ".attn." + t.name, t.tensor});
    }
  }
  out.push_back({"fc.weight", m.fc_weight});
  out.push_back({"fc.bias", m.fc_bias});
  return out;
}

template <typename Real>
std::vector<NamedTensor<Real>> Model<Real>::buffers() const {
  const auto& m = *impl_;
  std::vector<NamedTensor<Real>> out;
  auto add_norm = [&out](const std::string& prefix, const Norm<Real>& n) {
    if (n.kind != NormKind::batch) return;
    out.push_back({prefix + ".running_mean", n.running_mean});
    out.push_back({prefix + ".running_var", n.running_var});
  };
  add_norm("stem.norm", m.stem_norm);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& blk = m.blocks[i];
    const auto& p = m.block_names[i];
    add_norm(p + ".norm1", blk.norm1);
    if (blk.has_conv2) add_norm(p + ".norm2", blk.norm2);
    if (blk.has_shortcut) add_norm(p + ".shortcut_norm", blk.shortcut_norm);
    if (blk.attention) {
      for (auto& t : blk.attention->buffers()) out.push_back({p + ".attn." + t.name, t.tensor});
    }
  }
  return out;
}

template <typename Real>
std::size_t Model<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

template <typename Real>
std::size_t Model<Real>::attention_parameter_count() const {
  std::size_t n = 0;
  for (const auto& blk : impl_->blocks) {
    if (blk.attention) n += blk.attention->parameter_count();
  }
  return n;
}

template <typename Real>
std::vector<AttentionBlock<Real>*> Model<Real>::attention_blocks() {
  std::vector<AttentionBlock<Real>*> out;
  for (auto& blk : impl_->blocks) {
    if (blk.attention) out.push_back(blk.attention.get());
  }
  return out;
}

template <typename Real>
void Model<Real>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename Real>
Checkpoint Model<Real>::to_checkpoint(std::uint64_t step) const {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.seed = seed_;
  for (const auto& group : {parameters(), buffers()}) {
    for (const auto& t : group) ckpt.tensors.push_back({t.name, t.tensor.template cast<float>()});
  }
  return ckpt;
}

template <typename Real>
void Model<Real>::load_checkpoint(const Checkpoint& ckpt) {
  for (const auto& group : {parameters(), buffers()}) {
    for (auto t : group) {
      const auto* src = ckpt.find(t.name);
      if (!src) throw FormatError("checkpoint lacks tensor '" + t.name + "'");
      if (src->tensor.shape() != t.tensor.shape()) {
        throw FormatError("checkpoint tensor '" + t.name + "' has shape " + to_string(src->tensor.shape()) +
                          ", model expects " + to_string(t.tensor.shape()));
      }
      auto dst = t.tensor.mutable_values();
      auto from = src->tensor.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(from[i]);
    }
  }
  seed_ = ckpt.seed;
}

std::size_t closed_form_param_count(const ModelSpec& spec) {
  spec.validate();
  const bool residual = spec.arch == Arch::mini_resnet;
  auto conv = [](std::size_t cout, std::size_t cin, std::size_t k) { return cout * cin * k * k; };
  std::size_t total = conv(spec.stem_channels, spec.in_channels, 3) + 2 * spec.stem_channels;
  std::size_t in_c = spec.stem_channels;
  for (const auto& st : spec.stages) {
    for (std::size_t b = 0; b < st.blocks; ++b) {
      const std::size_t stride = b == 0 ? st.stride : 1;
      total += conv(st.channels, in_c, 3) + 2 * st.channels;
      if (residual) {
        total += conv(st.channels, st.channels, 3) + 2 * st.channels;
        if (stride != 1 || in_c != st.channels) total += conv(st.channels, in_c, 1) + 2 * st.channels;
      }
      total += attention_block_params(spec.attention, st.channels);
      in_c = st.channels;
    }
  }
  return total + spec.classes * in_c + spec.classes;
}

template class Model<float>;
template class Model<double>;

}  // namespace mca
