#include "mca/moments.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mca/ops.hpp"

namespace mca {

namespace {

template <typename Real>
struct ChannelStats {
  double mean = 0.0;
  double residual = 0.0;  // mean of (x - mean) as computed; true mean = mean + residual
  double m2 = 0.0;
  double m3 = 0.0;
  bool constant = false;
};

template <typename Real>
ChannelStats<Real> channel_stats(const Real* p, std::size_t n) {
  ChannelStats<Real> s;
  s.mean = static_cast<double>(detail::spatial_mean(p, n));
  s.constant = std::all_of(p, p + n, [&](Real v) { return v == p[0]; });
  if (s.constant) return s;
  // Corrected two-pass: moments about the rounded mean, then shifted by the
  // residual so rounding of the mean does not leak into M3 at first order.
  double acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - s.mean;
    acc1 += d;
    acc2 += d * d;
    acc3 += d * d * d;
  }
  const double inv = 1.0 / static_cast<double>(n);
  const double e = acc1 * inv, r2 = acc2 * inv, r3 = acc3 * inv;
  s.residual = e;
  s.m2 = r2 - e * e;
  s.m3 = r3 - 3.0 * e * r2 + 2.0 * e * e * e;
  return s;
}

template <typename Real>
void require_feature_map(const BasicTensor<Real>& x, const char* op) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + to_string(x.shape()));
  }
  if (x.dim(2) * x.dim(3) == 0) {
    throw ShapeError(std::string(op) + ": empty spatial extent in " + to_string(x.shape()));
  }
}

}  // namespace

template <typename Real>
BasicTensor<Real> moment1(const BasicTensor<Real>& x) {
  require_feature_map(x, "moment1");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const Real* xd = x.values().data();
  std::vector<Real> out(nc);
  for (std::size_t i = 0; i < nc; ++i) out[i] = detail::spatial_mean(xd + i * hw, hw);
  return detail::make_result<Real>(
      Shape{x.dim(0), x.dim(1)}, std::move(out), "moment1", {&x},
      [nc, hw](const detail::Storage<Real>& o, const std::vector<detail::StoragePtr<Real>>& in) {
        Real* g = in[0]->grad_buffer();
        const Real inv = Real{1} / static_cast<Real>(hw);
        for (std::size_t i = 0; i < nc; ++i) {
          const Real share = o.grad[i] * inv;
          for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += share;
        }
      });
}

template <typename Real>
BasicTensor<Real> central_moment(const BasicTensor<Real>& x, int order) {
  if (order != 2 && order != 3) {
    throw ConfigError("central_moment: order must be 2 or 3, got " + std::to_string(order));
  }
  require_feature_map(x, "central_moment");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const Real* xd = x.values().data();
  std::vector<Real> out(nc);
  std::vector<double> means(nc), residuals(nc), m2(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    const auto s = channel_stats(xd + i * hw, hw);
    means[i] = s.mean;
    residuals[i] = s.residual;
    m2[i] = s.m2;
    out[i] = static_cast<Real>(order == 2 ? s.m2 : s.m3);
  }
  return detail::make_result<Real>(
      Shape{x.dim(0), x.dim(1)}, std::move(out), order == 2 ? "moment2" : "moment3", {&x},
      [nc, hw, order, means = std::move(means), residuals = std::move(residuals), m2 = std::move(m2)](
          const detail::Storage<Real>& o, const std::vector<detail::StoragePtr<Real>>& in) {
        Real* g = in[0]->grad_buffer();
        const Real* xd = in[0]->data.data();
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t i = 0; i < nc; ++i) {
          const double gy = static_cast<double>(o.grad[i]);
          for (std::size_t j = 0; j < hw; ++j) {
            const double d = (static_cast<double>(xd[i * hw + j]) - means[i]) - residuals[i];
            const double local = order == 2 ? 2.0 * inv * d : 3.0 * inv * (d * d - m2[i]);
            g[i * hw + j] += static_cast<Real>(gy * local);
          }
        }
      });
}

template <typename Real>
MomentVector<Real> aggregate(const BasicTensor<Real>& x, std::span<const int> orders) {
  if (orders.empty()) throw ConfigError("aggregate: empty moment selection");
  for (std::size_t i = 0; i < orders.size(); ++i) {
    if (orders[i] < 1 || orders[i] > 3) {
      throw ConfigError("aggregate: moment order " + std::to_string(orders[i]) + " outside {1,2,3}");
    }
    if (i > 0 && orders[i] <= orders[i - 1]) {
      throw ConfigError("aggregate: moment orders must be strictly ascending");
    }
  }
  std::vector<BasicTensor<Real>> rows;
  rows.reserve(orders.size());
  for (int k : orders) rows.push_back(k == 1 ? moment1(x) : central_moment(x, k));
  return {stack_rows<Real>(rows), std::vector<int>(orders.begin(), orders.end())};
}

SampleMoments sample_moments(std::span<const double> samples) {
  if (samples.empty()) throw ShapeError("sample_moments: no samples");
  const auto s = channel_stats(samples.data(), samples.size());
  return {s.mean, s.m2, s.m3};
}

void EmaConfig::validate() const {
  if (max_order < 1 || max_order > 3) {
    throw ConfigError("EmaConfig: max_order must be in 1..3, got " + std::to_string(max_order));
  }
  if (alphas.size() != static_cast<std::size_t>(max_order)) {
    throw ConfigError("EmaConfig: need one alpha per order (" + std::to_string(max_order) + "), got " +
                      std::to_string(alphas.size()));
  }
  for (double a : alphas) {
    if (!(a > 0.0 && a <= 1.0)) {
      throw ConfigError("EmaConfig: alpha " + std::to_string(a) + " outside (0,1]");
    }
  }
}

namespace {

// Per-dimension moment vector of the given order (order 1 = raw mean).
std::vector<double> marginal_moments(std::span<const double> samples, std::size_t dims, int order) {
  if (dims == 0 || samples.empty() || samples.size() % dims != 0) {
    throw ShapeError("sample matrix of " + std::to_string(samples.size()) + " values is not a whole number of " +
                     std::to_string(dims) + "-dimensional draws");
  }
  const std::size_t draws = samples.size() / dims;
  std::vector<double> column(draws);
  std::vector<double> out(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    for (std::size_t r = 0; r < draws; ++r) column[r] = samples[r * dims + d];
    const auto s = sample_moments(column);
    out[d] = order == 1 ? s.mean : order == 2 ? s.m2 : s.m3;
  }
  return out;
}

double l2(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

double ema_scalar(std::span<const double> samples, std::size_t dims, const EmaConfig& cfg) {
  cfg.validate();
  double total = 0.0;
  for (int k = 1; k <= cfg.max_order; ++k) {
    total += cfg.alphas[static_cast<std::size_t>(k - 1)] * l2(marginal_moments(samples, dims, k));
  }
  return total;
}

double moment_norm_bound(int k, long dims) {
  if (k <= 0) throw ConfigError("moment_norm_bound: order must be positive, got " + std::to_string(k));
  if (dims <= 0) throw ConfigError("moment_norm_bound: dimension must be positive, got " + std::to_string(dims));
  const double kk = static_cast<double>(k);
  const double peak = (1.0 / (kk + 1.0)) * std::pow(kk / (kk + 1.0), kk);
  return std::sqrt(static_cast<double>(dims)) * (peak + std::pow(2.0, -(1.0 + kk)));
}

BoundCheck check_bound(std::span<const double> samples, std::size_t dims, double lo, double hi, int k) {
  if (!(hi > lo)) throw ConfigError("check_bound: need hi > lo");
  if (samples.empty()) throw ShapeError("check_bound: no samples");
  for (double v : samples) {
    if (!(v >= lo && v <= hi)) {
      throw ConfigError("check_bound: sample " + std::to_string(v) + " outside [" + std::to_string(lo) + "," +
                        std::to_string(hi) + "]");
    }
  }
  BoundCheck r;
  r.bound = moment_norm_bound(k, static_cast<long>(dims));
  std::vector<double> moments;
  if (k == 1) {
    // First central moment: E(X - E X), zero up to rounding.
    moments = marginal_moments(samples, dims, 1);
    const std::size_t draws = samples.size() / dims;
    for (std::size_t d = 0; d < dims; ++d) {
      double acc = 0.0;
      for (std::size_t i = 0; i < draws; ++i) acc += samples[i * dims + d] - moments[d];
      moments[d] = acc / static_cast<double>(draws);
    }
  } else if (k <= 3) {
    moments = marginal_moments(samples, dims, k);
  } else {
    // Orders above 3 only appear in diagnostics; evaluate the definition directly.
    const auto means = marginal_moments(samples, dims, 1);
    const std::size_t draws = samples.size() / dims;
    moments.assign(dims, 0.0);
    for (std::size_t d = 0; d < dims; ++d) {
      for (std::size_t i = 0; i < draws; ++i) moments[d] += std::pow(samples[i * dims + d] - means[d], k);
      moments[d] /= static_cast<double>(draws);
    }
  }
  r.moment_norm = l2(moments) / std::pow(hi - lo, k);
  r.margin = r.bound - r.moment_norm;
  r.holds = r.margin >= 0.0;
  return r;
}

template BasicTensor<float> moment1(const BasicTensor<float>&);
template BasicTensor<double> moment1(const BasicTensor<double>&);
template BasicTensor<float> central_moment(const BasicTensor<float>&, int);
template BasicTensor<double> central_moment(const BasicTensor<double>&, int);
template MomentVector<float> aggregate(const BasicTensor<float>&, std::span<const int>);
template MomentVector<double> aggregate(const BasicTensor<double>&, std::span<const int>);

}  // namespace mca
