#pragma once

// Per-channel central moments over the spatial extent of a feature map, with
// closed-form gradients, plus the scalar moment aggregate and the
// order-decreasing norm bound used to justify truncating at low orders.

#include <cstddef>
#include <span>
#include <vector>

#include "mca/tensor.hpp"

namespace mca {

/// Spatial mean per channel: x[N,C,H,W] -> [N,C]. d mu / d x_i = 1/N.
template <typename Real>
BasicTensor<Real> moment1(const BasicTensor<Real>& x);

/// k-th central moment (1/N) sum (x_i - mu)^k per channel, k in {2,3},
/// computed in two passes. Order 3 is the raw third central moment, not the
/// standardized skewness, so constant channels give exactly 0.
///   d M2 / d x_i = (2/N)(x_i - mu)
///   d M3 / d x_i = (3/N)((x_i - mu)^2 - M2)
template <typename Real>
BasicTensor<Real> central_moment(const BasicTensor<Real>& x, int order);

/// Rows of selected moments stacked per channel: values[N, orders.size(), C].
template <typename Real>
struct MomentVector {
  BasicTensor<Real> values;
  std::vector<int> orders;

  std::size_t rows() const { return orders.size(); }
};

/// Moment aggregation. orders must be a nonempty strictly ascending subset of
/// {1,2,3}: {1} is GAP, {1,2} mean+variance, {1,3} mean+skew, {1,2,3} all.
template <typename Real>
MomentVector<Real> aggregate(const BasicTensor<Real>& x, std::span<const int> orders);

/// Scalar statistics of one sample run, in double, two-pass.
struct SampleMoments {
  double mean = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
};
SampleMoments sample_moments(std::span<const double> samples);

/// Weighted sum of moment norms up to order max_order. alphas[k-1] weights
/// the order-k term; the order-1 term uses the raw mean.
struct EmaConfig {
  int max_order = 2;
  std::vector<double> alphas{1.0, 1.0};

  void validate() const;
};

/// samples holds draws row-major, `dims` values per draw. Norms are taken
/// over the vector of per-dimension (marginal) moments.
double ema_scalar(std::span<const double> samples, std::size_t dims, const EmaConfig& cfg);

/// sqrt(N) * ( (1/(k+1)) (k/(k+1))^k + 2^-(1+k) ), the bound on the norm of
/// the order-k marginal central moments of a distribution on [0,1]^N.
double moment_norm_bound(int k, long dims);

struct BoundCheck {
  bool holds = false;
  double moment_norm = 0.0;  // ||M_k|| / (b-a)^k
  double bound = 0.0;
  double margin = 0.0;       // bound - moment_norm
};

/// Checks the order-k bound for draws in [lo,hi]^dims (row-major, dims per draw).
BoundCheck check_bound(std::span<const double> samples, std::size_t dims, double lo, double hi, int k);

}  // namespace mca
