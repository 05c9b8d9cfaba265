#pragma once

// Differentiable tensor ops. Layout is batch x channel x height x width for
// images, batch x rows x channels for moment stacks, batch x features for
// dense activations. All ops are defined for float and double.

#include <cstddef>
#include <span>
#include <vector>

#include "mca/tensor.hpp"

namespace mca {

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& x, const BasicTensor<Real>& y);
template <typename Real>
BasicTensor<Real> sub(const BasicTensor<Real>& x, const BasicTensor<Real>& y);
template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& x, const BasicTensor<Real>& y);
template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, Real factor);

/// Sum / mean of every element, as a shape-[1] tensor.
template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x);
template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x);

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape);

template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x);

/// Logistic function. Results are kept inside the open interval (0,1) even
/// where the exact value rounds to 0 or 1 in the working precision.
template <typename Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x);

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw]; output extent
/// (H + 2*pad - kh) / stride + 1 per spatial axis, zero padding.
template <typename Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& w, std::size_t stride,
                         std::size_t pad);

/// Cross-correlation along the channel axis of m[N,K,C] with w[1,K,k],
/// summing over the K rows. k must be odd and pad == k/2, so the output
/// [N,1,C] keeps the channel extent. Out-of-range channels read as zero.
template <typename Real>
BasicTensor<Real> conv1d_channel(const BasicTensor<Real>& m, const BasicTensor<Real>& w,
                                 std::size_t pad);

enum class SpatialReduction { mean };

/// Per-channel reduction over H*W: x[N,C,H,W] -> [N,C].
template <typename Real>
BasicTensor<Real> reduce_spatial(const BasicTensor<Real>& x,
                                 SpatialReduction kind = SpatialReduction::mean);

/// x[N,C,H,W] * gate[N,C,1,1], gate broadcast over the spatial extent.
template <typename Real>
BasicTensor<Real> broadcast_mul(const BasicTensor<Real>& x, const BasicTensor<Real>& gate);

/// x[N,in] * w[out,in]^T + b[out]; b may be undefined.
template <typename Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& w,
                         const BasicTensor<Real>& b);

/// Mean negative log-likelihood of labels under softmax(logits[N,K]).
template <typename Real>
BasicTensor<Real> softmax_cross_entropy(const BasicTensor<Real>& logits,
                                        std::span<const int> labels);

/// y[n,c,...] = x[n,c,...] * scale[c] + bias[c] for rank-2 or rank-4 x.
template <typename Real>
BasicTensor<Real> channel_affine(const BasicTensor<Real>& x, const BasicTensor<Real>& scale,
                                 const BasicTensor<Real>& bias);

/// Batch normalization over (N,H,W) per channel. In training mode batch
/// statistics are used and the running buffers are updated in place; in
/// eval mode the running buffers are used as constants.
template <typename Real>
BasicTensor<Real> batch_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gamma,
                             const BasicTensor<Real>& beta, BasicTensor<Real>& running_mean,
                             BasicTensor<Real>& running_var, bool training, Real momentum = Real(0.1),
                             Real eps = Real(1e-5));

/// Stacks K tensors of shape [N,C] into [N,K,C].
template <typename Real>
BasicTensor<Real> stack_rows(std::span<const BasicTensor<Real>> rows);

/// m[N,K,C] with row k multiplied by factors[k].
template <typename Real>
BasicTensor<Real> scale_rows(const BasicTensor<Real>& m, const BasicTensor<Real>& factors);

/// out[n,c] = sum_k weights[k,c] * m[n,k,c]; no interaction across channels.
template <typename Real>
BasicTensor<Real> cfc_fuse(const BasicTensor<Real>& m, const BasicTensor<Real>& weights);

namespace detail {

/// Arithmetic mean of n values. A constant run returns that constant exactly.
template <typename Real>
Real spatial_mean(const Real* p, std::size_t n) {
  bool constant = true;
  for (std::size_t i = 1; i < n && constant; ++i) constant = p[i] == p[0];
  if (constant) return p[0];
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(p[i]);
  return static_cast<Real>(acc / static_cast<double>(n));
}

}  // namespace detail

}  // namespace mca
