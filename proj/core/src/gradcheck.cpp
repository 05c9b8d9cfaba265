#include "mca/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mca/attention.hpp"
#include "mca/errors.hpp"
#include "mca/moments.hpp"
#include "mca/ops.hpp"

namespace mca {

namespace {

double projection(const TensorD& out, const std::vector<double>& weights) {
  double s = 0.0;
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
  return s;
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

TensorD random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0, double shift = 0.0) {
  std::normal_distribution<double> dist(shift, scale);
  std::vector<double> v(num_elements(shape));
  for (auto& x : v) x = dist(rng);
  return TensorD(std::move(shape), std::move(v)).set_requires_grad();
}

void randomize(std::mt19937_64& rng, TensorD& t, double scale, double shift) {
  std::normal_distribution<double> dist(shift, scale);
  for (auto& x : t.mutable_values()) x = dist(rng);
}

double check_block(std::mt19937_64& rng, AttentionBlock<double>& block, std::size_t channels) {
  const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
  std::vector<TensorD> inputs{random_tensor(rng, Shape{n, channels, h, w})};
  for (auto& p : block.parameters()) {
    auto t = p.tensor;
    randomize(rng, t, 0.5, p.name == "affine.gamma" ? 1.0 : 0.0);
    inputs.push_back(t);
  }
  return max_gradient_error(
      [&block](const std::vector<TensorD>& in) { return block.forward(in[0], false).output; }, inputs, rng);
}

double trial(const std::string& op, std::mt19937_64& rng) {
  if (op == "moment1" || op == "moment2" || op == "moment3") {
    const int order = op.back() - '0';
    Shape s{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 2, 5)};
    return max_gradient_error(
        [order](const std::vector<TensorD>& in) {
          return order == 1 ? moment1(in[0]) : central_moment(in[0], order);
        },
        {random_tensor(rng, s, 1.0, 0.5)}, rng);
  }
  if (op == "cmc") {
    const std::size_t rows = pick(rng, 1, 3), k = 2 * pick(rng, 0, 2) + 1, c = pick(rng, k, k + 5);
    AttentionConfig cfg = mca_triple();
    cfg.moments.resize(rows);
    cfg.kernel_size = static_cast<int>(k);
    auto p = make_cmc_params<double>(rows, c, cfg);
    randomize(rng, p.kernel, 0.5, 0.0);
    randomize(rng, p.gamma, 0.5, 1.0);
    randomize(rng, p.beta, 0.5, 0.0);
    randomize(rng, p.alpha_logit, 1.0, 0.0);
    auto orders = cfg.moments;
    return max_gradient_error(
        [p, orders](const std::vector<TensorD>& in) {
          return cmc_forward(MomentVector<double>{in[0], orders}, p, true);
        },
        {random_tensor(rng, Shape{pick(rng, 1, 2), rows, c}), p.kernel, p.gamma, p.beta, p.alpha_logit}, rng);
  }
  if (op == "cfc") {
    const std::size_t rows = pick(rng, 1, 3), c = pick(rng, 1, 6);
    std::vector<int> orders(rows);
    for (std::size_t r = 0; r < rows; ++r) orders[r] = static_cast<int>(r) + 1;
    return max_gradient_error(
        [orders](const std::vector<TensorD>& in) { return cfc_forward(MomentVector<double>{in[0], orders}, in[1]); },
        {random_tensor(rng, Shape{pick(rng, 1, 2), rows, c}), random_tensor(rng, Shape{rows, c})}, rng);
  }
  if (op == "se") {
    std::mt19937_64 init(rng());
    SeBlock<double> block(8, 4, init);
    return check_block(rng, block, 8);
  }
  if (op == "eca") {
    const std::size_t c = pick(rng, 3, 9);
    EcaBlock<double> block(c, 3);
    return check_block(rng, block, c);
  }
  if (op == "mca-e" || op == "mca-s") {
    const std::size_t c = pick(rng, 11, 14);
    McaBlock<double> block(op == "mca-e" ? mca_e() : mca_s(), c);
    return check_block(rng, block, c);
  }
  if (op == "conv2d") {
    const std::size_t k = pick(rng, 0, 1) * 2 + 1, stride = pick(rng, 1, 2);
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    return max_gradient_error(
        [stride, k](const std::vector<TensorD>& in) { return conv2d(in[0], in[1], stride, k / 2); },
        {random_tensor(rng, Shape{pick(rng, 1, 2), cin, pick(rng, 2, 5), pick(rng, 2, 5)}),
         random_tensor(rng, Shape{cout, cin, k, k})},
        rng);
  }
  if (op == "conv1d") {
    const std::size_t rows = pick(rng, 1, 3), k = 2 * pick(rng, 0, 2) + 1, c = pick(rng, k, k + 4);
    return max_gradient_error(
        [k](const std::vector<TensorD>& in) { return conv1d_channel(in[0], in[1], k / 2); },
        {random_tensor(rng, Shape{pick(rng, 1, 2), rows, c}), random_tensor(rng, Shape{1, rows, k})}, rng);
  }
  throw ConfigError("unknown gradcheck op '" + op + "'");
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return h;
}

double threshold_for(const std::string& op) { return op.rfind("moment", 0) == 0 ? 1e-6 : 1e-4; }

}  // namespace

double max_gradient_error(const GradFn& fn, std::vector<TensorD> inputs, std::mt19937_64& rng,
                          const GradcheckOptions& opts) {
  for (auto& t : inputs) t.zero_grad();
  const TensorD out = fn(inputs);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> weights(out.size());
  for (auto& w : weights) w = dist(rng);

  sum(mul(out, TensorD(out.shape(), weights))).backward();

  const double h = opts.step;
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t.values()[i];
      auto at = [&](double x) {
        t.mutable_values()[i] = x;
        return projection(fn(inputs), weights);
      };
      const double numeric =
          (-at(x0 + 2 * h) + 8 * at(x0 + h) - 8 * at(x0 - h) + at(x0 - 2 * h)) / (12 * h);
      t.mutable_values()[i] = x0;
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.error_floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

std::vector<std::string> gradcheck_ops() {
  return {"moment1", "moment2", "moment3", "cmc", "cfc", "se", "eca", "mca-e", "mca-s", "conv2d", "conv1d"};
}

std::vector<std::string> resolve_gradcheck_ops(const std::string& name) {
  if (name == "all") return gradcheck_ops();
  if (name == "mca-block") return {"mca-e", "mca-s"};
  const auto ops = gradcheck_ops();
  if (std::find(ops.begin(), ops.end(), name) == ops.end()) {
    throw ConfigError("unknown gradcheck op '" + name + "'");
  }
  return {name};
}

GradcheckResult run_gradcheck(const std::string& op, int trials, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("gradcheck needs at least one trial");
  resolve_gradcheck_ops(op);
  GradcheckResult res;
  res.op = op;
  res.threshold = threshold_for(op);
  std::mt19937_64 rng(seed ^ name_hash(op));
  for (int t = 0; t < trials; ++t) res.max_rel_error = std::max(res.max_rel_error, trial(op, rng));
  res.trials = trials;
  if (op == "moment3") {
    Shape s{2, 3, 3, 3};
    std::vector<double> v(num_elements(s));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.25 * static_cast<double>(i / 9);
    TensorD x(s, std::move(v));
    x.set_requires_grad();
    res.max_rel_error = std::max(
        res.max_rel_error,
        max_gradient_error([](const std::vector<TensorD>& in) { return central_moment(in[0], 3); }, {x}, rng));
    ++res.trials;
  }
  return res;
}

}  // namespace mca
