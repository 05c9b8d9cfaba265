#include "mca/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace mca {

namespace {

template <typename Real>
using Inputs = std::vector<detail::StoragePtr<Real>>;

template <typename Real>
bool wants_grad(const detail::StoragePtr<Real>& s) {
  return s && s->requires_grad;
}

template <typename Real>
void require_same_shape(const BasicTensor<Real>& x, const BasicTensor<Real>& y, const char* op) {
  if (x.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(x.shape()) + " vs " +
                     to_string(y.shape()));
  }
}

template <typename Real>
void require_rank(const BasicTensor<Real>& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + to_string(x.shape()));
  }
}

// Column buffer for one image: rows are (ci, ki, kj), columns output pixels.
template <typename Real>
void im2col(const Real* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            Real* col) {
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        Real* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(h) &&
                                iw < static_cast<std::ptrdiff_t>(w);
            row[oh * wo + ow] =
                inside ? x[(ci * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)]
                       : Real{0};
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im(const Real* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            Real* x) {
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const Real* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(ci * h + static_cast<std::size_t>(ih)) * w + static_cast<std::size_t>(iw)] +=
                row[oh * wo + ow];
          }
        }
      }
    }
  }
}

template <typename Real>
Real logistic(Real v) {
  constexpr Real lo = std::numeric_limits<Real>::denorm_min();
  const Real hi = std::nextafter(Real{1}, Real{0});
  Real s;
  if (v >= Real{0}) {
    s = Real{1} / (Real{1} + std::exp(-v));
  } else {
    const Real e = std::exp(v);
    s = e / (Real{1} + e);
  }
  return std::clamp(s, lo, hi);
}

}  // namespace

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& x, const BasicTensor<Real>& y) {
  require_same_shape(x, y, "add");
  auto a = x.values();
  auto b = y.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<Real>(x.shape(), std::move(out), "add", {&x, &y},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     for (std::size_t k = 0; k < 2; ++k) {
                                       if (!wants_grad(in[k])) continue;
                                       Real* g = in[k]->grad_buffer();
                                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> sub(const BasicTensor<Real>& x, const BasicTensor<Real>& y) {
  require_same_shape(x, y, "sub");
  auto a = x.values();
  auto b = y.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<Real>(x.shape(), std::move(out), "sub", {&x, &y},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     if (wants_grad(in[0])) {
                                       Real* g = in[0]->grad_buffer();
                                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                     }
                                     if (wants_grad(in[1])) {
                                       Real* g = in[1]->grad_buffer();
                                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& x, const BasicTensor<Real>& y) {
  require_same_shape(x, y, "mul");
  auto a = x.values();
  auto b = y.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<Real>(x.shape(), std::move(out), "mul", {&x, &y},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     const auto& a = in[0]->data;
                                     const auto& b = in[1]->data;
                                     if (wants_grad(in[0])) {
                                       Real* g = in[0]->grad_buffer();
                                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * b[i];
                                     }
                                     if (wants_grad(in[1])) {
                                       Real* g = in[1]->grad_buffer();
                                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * a[i];
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, Real factor) {
  auto a = x.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result<Real>(x.shape(), std::move(out), "scale", {&x},
                                   [factor](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
                                   });
}

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
  double acc = 0.0;
  for (Real v : x.values()) acc += static_cast<double>(v);
  return detail::make_result<Real>(Shape{1}, {static_cast<Real>(acc)}, "sum", {&x},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     for (std::size_t i = 0; i < in[0]->data.size(); ++i) g[i] += o.grad[0];
                                   });
}

template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x) {
  double acc = 0.0;
  for (Real v : x.values()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.size());
  return detail::make_result<Real>(Shape{1}, {static_cast<Real>(acc / n)}, "mean", {&x},
                                   [n](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     const Real share = static_cast<Real>(o.grad[0] / n);
                                     for (std::size_t i = 0; i < in[0]->data.size(); ++i) g[i] += share;
                                   });
}

template <typename Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape) {
  if (num_elements(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  return detail::make_result<Real>(std::move(shape), std::move(out), "reshape", {&x},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                   });
}

template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x) {
  auto a = x.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > Real{0} ? a[i] : Real{0};
  return detail::make_result<Real>(x.shape(), std::move(out), "relu", {&x},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     const auto& a = in[0]->data;
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       if (a[i] > Real{0}) g[i] += o.grad[i];
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x) {
  auto a = x.values();
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logistic(a[i]);
  return detail::make_result<Real>(x.shape(), std::move(out), "sigmoid", {&x},
                                   [](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       const Real s = o.data[i];
                                       g[i] += o.grad[i] * s * (Real{1} - s);
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& w, std::size_t stride,
                         std::size_t pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " input channels, input " +
                     to_string(x.shape()) + " has " + std::to_string(cin));
  }
  if (h + 2 * pad < kh || wd + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                     to_string(x.shape()) + " with pad " + std::to_string(pad));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw;
  const std::size_t pix = ho * wo;

  std::vector<Real> out(n * cout * pix);
  std::vector<Real> col(patch * pix);
  const Real* xd = x.values().data();
  const Real* wdat = w.values().data();
  for (std::size_t b = 0; b < n; ++b) {
    im2col(xd + b * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
    detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(pix), static_cast<int>(patch),
                 Real{1}, wdat, static_cast<int>(patch), col.data(), static_cast<int>(pix), Real{0},
                 out.data() + b * cout * pix, static_cast<int>(pix));
  }

  return detail::make_result<Real>(
      Shape{n, cout, ho, wo}, std::move(out), "conv2d", {&x, &w},
      [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
        const Real* xd = in[0]->data.data();
        const Real* wdat = in[1]->data.data();
        const bool need_x = wants_grad(in[0]);
        const bool need_w = wants_grad(in[1]);
        Real* gx = need_x ? in[0]->grad_buffer() : nullptr;
        Real* gw = need_w ? in[1]->grad_buffer() : nullptr;
        std::vector<Real> col(patch * pix);
        std::vector<Real> dcol(need_x ? patch * pix : 0);
        for (std::size_t b = 0; b < n; ++b) {
          const Real* gy = o.grad.data() + b * cout * pix;
          if (need_w) {
            im2col(xd + b * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
            detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(patch),
                         static_cast<int>(pix), Real{1}, gy, static_cast<int>(pix), col.data(),
                         static_cast<int>(pix), Real{1}, gw, static_cast<int>(patch));
          }
          if (need_x) {
            detail::gemm(true, false, static_cast<int>(patch), static_cast<int>(pix),
                         static_cast<int>(cout), Real{1}, wdat, static_cast<int>(patch), gy,
                         static_cast<int>(pix), Real{0}, dcol.data(), static_cast<int>(pix));
            col2im(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, gx + b * cin * h * wd);
          }
        }
      });
}

template <typename Real>
BasicTensor<Real> conv1d_channel(const BasicTensor<Real>& m, const BasicTensor<Real>& w,
                                 std::size_t pad) {
  require_rank(m, 3, "conv1d_channel", "moment stack");
  require_rank(w, 3, "conv1d_channel", "kernel");
  const std::size_t n = m.dim(0), rows = m.dim(1), c = m.dim(2);
  const std::size_t k = w.dim(2);
  if (w.dim(0) != 1) throw ShapeError("conv1d_channel: kernel must have one output row, got " + to_string(w.shape()));
  if (k % 2 == 0) throw ShapeError("conv1d_channel: kernel size must be odd, got " + std::to_string(k));
  if (w.dim(1) != rows) {
    throw ShapeError("conv1d_channel: kernel has " + std::to_string(w.dim(1)) + " moment rows, input has " +
                     std::to_string(rows));
  }
  if (pad != k / 2) {
    throw ShapeError("conv1d_channel: pad must be k/2 = " + std::to_string(k / 2) + ", got " +
                     std::to_string(pad));
  }
  const auto half = static_cast<std::ptrdiff_t>(pad);
  const auto cc = static_cast<std::ptrdiff_t>(c);
  const Real* md = m.values().data();
  const Real* wd = w.values().data();
  std::vector<Real> out(n * c, Real{0});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::ptrdiff_t ch = 0; ch < cc; ++ch) {
      Real acc{0};
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = md + (b * rows + r) * c;
        const Real* taps = wd + r * k;
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = ch + static_cast<std::ptrdiff_t>(j) - half;
          if (src >= 0 && src < cc) acc += taps[j] * row[src];
        }
      }
      out[b * c + static_cast<std::size_t>(ch)] = acc;
    }
  }
  return detail::make_result<Real>(
      Shape{n, 1, c}, std::move(out), "conv1d_channel", {&m, &w},
      [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
        const Real* md = in[0]->data.data();
        const Real* wd = in[1]->data.data();
        Real* gm = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
        Real* gw = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::ptrdiff_t ch = 0; ch < cc; ++ch) {
            const Real gy = o.grad[b * c + static_cast<std::size_t>(ch)];
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t src = ch + static_cast<std::ptrdiff_t>(j) - half;
                if (src < 0 || src >= cc) continue;
                const std::size_t idx = (b * rows + r) * c + static_cast<std::size_t>(src);
                if (gm) gm[idx] += gy * wd[r * k + j];
                if (gw) gw[r * k + j] += gy * md[idx];
              }
            }
          }
        }
      });
}

template <typename Real>
BasicTensor<Real> reduce_spatial(const BasicTensor<Real>& x, SpatialReduction kind) {
  (void)kind;
  require_rank(x, 4, "reduce_spatial", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("reduce_spatial: empty spatial extent in " + to_string(x.shape()));
  const Real* xd = x.values().data();
  std::vector<Real> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) out[i] = detail::spatial_mean(xd + i * hw, hw);
  return detail::make_result<Real>(Shape{n, c}, std::move(out), "reduce_spatial", {&x},
                                   [hw](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     Real* g = in[0]->grad_buffer();
                                     const Real inv = Real{1} / static_cast<Real>(hw);
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       const Real share = o.grad[i] * inv;
                                       for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += share;
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> broadcast_mul(const BasicTensor<Real>& x, const BasicTensor<Real>& gate) {
  require_rank(x, 4, "broadcast_mul", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.shape() != Shape{n, c, 1, 1}) {
    throw ShapeError("broadcast_mul: gate " + to_string(gate.shape()) + " does not broadcast against " +
                     to_string(x.shape()) + "; expected " + to_string(Shape{n, c, 1, 1}));
  }
  const Real* xd = x.values().data();
  const Real* gd = gate.values().data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < n * c; ++i) {
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] = xd[i * hw + j] * gd[i];
  }
  return detail::make_result<Real>(x.shape(), std::move(out), "broadcast_mul", {&x, &gate},
                                   [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     const Real* xd = in[0]->data.data();
                                     const Real* gd = in[1]->data.data();
                                     Real* gx = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
                                     Real* gg = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
                                     for (std::size_t i = 0; i < n * c; ++i) {
                                       Real acc{0};
                                       for (std::size_t j = 0; j < hw; ++j) {
                                         const Real gy = o.grad[i * hw + j];
                                         if (gx) gx[i * hw + j] += gy * gd[i];
                                         acc += gy * xd[i * hw + j];
                                       }
                                       if (gg) gg[i] += acc;
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& w,
                         const BasicTensor<Real>& b) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::size_t n = x.dim(0), in_f = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in_f) {
    throw ShapeError("linear: weight " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  if (b.defined() && b.shape() != Shape{out_f}) {
    throw ShapeError("linear: bias " + to_string(b.shape()) + " must be [" + std::to_string(out_f) + "]");
  }
  const Real* xd = x.values().data();
  const Real* wd = w.values().data();
  const Real* bd = b.defined() ? b.values().data() : nullptr;
  std::vector<Real> out(n * out_f);
  // Plain loops keep every row independent of the batch size.
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out_f; ++o) {
      Real acc = bd ? bd[o] : Real{0};
      for (std::size_t i = 0; i < in_f; ++i) acc += wd[o * in_f + i] * xd[r * in_f + i];
      out[r * out_f + o] = acc;
    }
  }
  return detail::make_result<Real>(
      Shape{n, out_f}, std::move(out), "linear", {&x, &w, &b},
      [=](const detail::Storage<Real>& st, const Inputs<Real>& in) {
        const Real* xd = in[0]->data.data();
        const Real* wd = in[1]->data.data();
        Real* gx = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
        Real* gw = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
        Real* gb = wants_grad(in[2]) ? in[2]->grad_buffer() : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t o = 0; o < out_f; ++o) {
            const Real gy = st.grad[r * out_f + o];
            if (gb) gb[o] += gy;
            for (std::size_t i = 0; i < in_f; ++i) {
              if (gx) gx[r * in_f + i] += gy * wd[o * in_f + i];
              if (gw) gw[o * in_f + i] += gy * xd[r * in_f + i];
            }
          }
        }
      });
}

template <typename Real>
BasicTensor<Real> softmax_cross_entropy(const BasicTensor<Real>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  const Real* z = logits.values().data();
  std::vector<Real> probs(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(k) + ")");
    }
    const Real* row = z + r * k;
    const Real top = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - top));
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<Real>(std::exp(static_cast<double>(row[j] - top) - log_denom));
    }
    loss += log_denom - static_cast<double>(row[y] - top);
  }
  loss /= static_cast<double>(n);
  std::vector<int> saved(labels.begin(), labels.end());
  return detail::make_result<Real>(
      Shape{1}, {static_cast<Real>(loss)}, "softmax_cross_entropy", {&logits},
      [n, k, probs = std::move(probs), saved = std::move(saved)](const detail::Storage<Real>& o,
                                                                 const Inputs<Real>& in) {
        Real* g = in[0]->grad_buffer();
        const Real share = o.grad[0] / static_cast<Real>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const Real target = static_cast<std::size_t>(saved[r]) == j ? Real{1} : Real{0};
            g[r * k + j] += share * (probs[r * k + j] - target);
          }
        }
      });
}

template <typename Real>
BasicTensor<Real> channel_affine(const BasicTensor<Real>& x, const BasicTensor<Real>& scale,
                                 const BasicTensor<Real>& bias) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("channel_affine: input must be [N,C] or [N,C,H,W], got " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (scale.shape() != Shape{c} || bias.shape() != Shape{c}) {
    throw ShapeError("channel_affine: scale " + to_string(scale.shape()) + " / bias " +
                     to_string(bias.shape()) + " must be [" + std::to_string(c) + "]");
  }
  const Real* xd = x.values().data();
  const Real* sd = scale.values().data();
  const Real* bd = bias.values().data();
  std::vector<Real> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) out[base + j] = xd[base + j] * sd[ch] + bd[ch];
    }
  }
  return detail::make_result<Real>(
      x.shape(), std::move(out), "channel_affine", {&x, &scale, &bias},
      [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
        const Real* xd = in[0]->data.data();
        const Real* sd = in[1]->data.data();
        Real* gx = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
        Real* gs = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
        Real* gb = wants_grad(in[2]) ? in[2]->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * inner;
            Real acc_s{0}, acc_b{0};
            for (std::size_t j = 0; j < inner; ++j) {
              const Real gy = o.grad[base + j];
              if (gx) gx[base + j] += gy * sd[ch];
              acc_s += gy * xd[base + j];
              acc_b += gy;
            }
            if (gs) gs[ch] += acc_s;
            if (gb) gb[ch] += acc_b;
          }
        }
      });
}

template <typename Real>
BasicTensor<Real> batch_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gamma,
                             const BasicTensor<Real>& beta, BasicTensor<Real>& running_mean,
                             BasicTensor<Real>& running_var, bool training, Real momentum, Real eps) {
  require_rank(x, 4, "batch_norm", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const auto* t : {&gamma, &beta, static_cast<const BasicTensor<Real>*>(&running_mean),
                        static_cast<const BasicTensor<Real>*>(&running_var)}) {
    if (t->shape() != Shape{c}) {
      throw ShapeError("batch_norm: per-channel tensor " + to_string(t->shape()) + " must be [" +
                       std::to_string(c) + "]");
    }
  }
  if (!training) {
    // Eval mode is a fixed affine map built from the running statistics.
    std::vector<Real> s(c), t(c);
    auto rm = running_mean.values();
    auto rv = running_var.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      s[ch] = Real{1} / std::sqrt(rv[ch] + eps);
      t[ch] = -rm[ch] * s[ch];
    }
    auto normalized = channel_affine(x, BasicTensor<Real>(Shape{c}, s), BasicTensor<Real>(Shape{c}, t));
    return channel_affine(normalized, gamma, beta);
  }
  const std::size_t count = n * hw;
  if (count < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
  const Real* xd = x.values().data();
  std::vector<Real> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < hw; ++j) acc += xd[(b * c + ch) * hw + j];
    const double m = acc / static_cast<double>(count);
    double var = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = xd[(b * c + ch) * hw + j] - m;
        var += d * d;
      }
    var /= static_cast<double>(count);
    mu[ch] = static_cast<Real>(m);
    inv_std[ch] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    auto rm = running_mean.mutable_values();
    auto rv = running_var.mutable_values();
    const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
    rm[ch] = static_cast<Real>((1.0 - momentum) * rm[ch] + momentum * m);
    rv[ch] = static_cast<Real>((1.0 - momentum) * rv[ch] + momentum * unbiased);
  }
  std::vector<Real> xhat(x.size());
  std::vector<Real> out(x.size());
  const Real* gd = gamma.values().data();
  const Real* bd = beta.values().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t i = (b * c + ch) * hw + j;
        xhat[i] = (xd[i] - mu[ch]) * inv_std[ch];
        out[i] = xhat[i] * gd[ch] + bd[ch];
      }
    }
  }
  return detail::make_result<Real>(
      x.shape(), std::move(out), "batch_norm", {&x, &gamma, &beta},
      [=, xhat = std::move(xhat)](const detail::Storage<Real>& o, const Inputs<Real>& in) {
        const Real* gd = in[1]->data.data();
        Real* gx = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
        Real* gg = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
        Real* gb = wants_grad(in[2]) ? in[2]->grad_buffer() : nullptr;
        const Real m = static_cast<Real>(count);
        for (std::size_t ch = 0; ch < c; ++ch) {
          Real sum_gy{0}, sum_gy_xhat{0};
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t i = (b * c + ch) * hw + j;
              sum_gy += o.grad[i];
              sum_gy_xhat += o.grad[i] * xhat[i];
            }
          if (gg) gg[ch] += sum_gy_xhat;
          if (gb) gb[ch] += sum_gy;
          if (!gx) continue;
          const Real k = gd[ch] * inv_std[ch] / m;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t i = (b * c + ch) * hw + j;
              gx[i] += k * (m * o.grad[i] - sum_gy - xhat[i] * sum_gy_xhat);
            }
        }
      });
}

template <typename Real>
BasicTensor<Real> stack_rows(std::span<const BasicTensor<Real>> rows) {
  if (rows.empty()) throw ShapeError("stack_rows: nothing to stack");
  const Shape first = rows.front().shape();
  if (first.size() != 2) throw ShapeError("stack_rows: rows must be [N,C], got " + to_string(first));
  for (const auto& r : rows) {
    if (r.shape() != first) {
      throw ShapeError("stack_rows: row shape " + to_string(r.shape()) + " differs from " + to_string(first));
    }
  }
  const std::size_t n = first[0], c = first[1], k = rows.size();
  std::vector<Real> out(n * k * c);
  for (std::size_t r = 0; r < k; ++r) {
    const Real* src = rows[r].values().data();
    for (std::size_t b = 0; b < n; ++b) std::copy_n(src + b * c, c, out.data() + (b * k + r) * c);
  }
  std::vector<const BasicTensor<Real>*> inputs;
  for (const auto& r : rows) inputs.push_back(&r);
  return detail::make_result<Real>(Shape{n, k, c}, std::move(out), "stack_rows", inputs,
                                   [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     for (std::size_t r = 0; r < k; ++r) {
                                       if (!wants_grad(in[r])) continue;
                                       Real* g = in[r]->grad_buffer();
                                       for (std::size_t b = 0; b < n; ++b)
                                         for (std::size_t ch = 0; ch < c; ++ch)
                                           g[b * c + ch] += o.grad[(b * k + r) * c + ch];
                                     }
                                   });
}

template <typename Real>
BasicTensor<Real> scale_rows(const BasicTensor<Real>& m, const BasicTensor<Real>& factors) {
  require_rank(m, 3, "scale_rows", "moment stack");
  const std::size_t n = m.dim(0), k = m.dim(1), c = m.dim(2);
  if (factors.shape() != Shape{k}) {
    throw ShapeError("scale_rows: factors " + to_string(factors.shape()) + " must be [" +
                     std::to_string(k) + "]");
  }
  const Real* md = m.values().data();
  const Real* fd = factors.values().data();
  std::vector<Real> out(m.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = (b * k + r) * c + ch;
        out[i] = md[i] * fd[r];
      }
  return detail::make_result<Real>(m.shape(), std::move(out), "scale_rows", {&m, &factors},
                                   [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     const Real* md = in[0]->data.data();
                                     const Real* fd = in[1]->data.data();
                                     Real* gm = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
                                     Real* gf = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
                                     for (std::size_t b = 0; b < n; ++b)
                                       for (std::size_t r = 0; r < k; ++r)
                                         for (std::size_t ch = 0; ch < c; ++ch) {
                                           const std::size_t i = (b * k + r) * c + ch;
                                           if (gm) gm[i] += o.grad[i] * fd[r];
                                           if (gf) gf[r] += o.grad[i] * md[i];
                                         }
                                   });
}

template <typename Real>
BasicTensor<Real> cfc_fuse(const BasicTensor<Real>& m, const BasicTensor<Real>& weights) {
  require_rank(m, 3, "cfc_fuse", "moment stack");
  const std::size_t n = m.dim(0), k = m.dim(1), c = m.dim(2);
  if (weights.shape() != Shape{k, c}) {
    throw ShapeError("cfc_fuse: weights " + to_string(weights.shape()) + " must be " +
                     to_string(Shape{k, c}));
  }
  const Real* md = m.values().data();
  const Real* wd = weights.values().data();
  std::vector<Real> out(n * c, Real{0});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Real acc{0};
      for (std::size_t r = 0; r < k; ++r) acc += wd[r * c + ch] * md[(b * k + r) * c + ch];
      out[b * c + ch] = acc;
    }
  return detail::make_result<Real>(Shape{n, c}, std::move(out), "cfc_fuse", {&m, &weights},
                                   [=](const detail::Storage<Real>& o, const Inputs<Real>& in) {
                                     const Real* md = in[0]->data.data();
                                     const Real* wd = in[1]->data.data();
                                     Real* gm = wants_grad(in[0]) ? in[0]->grad_buffer() : nullptr;
                                     Real* gw = wants_grad(in[1]) ? in[1]->grad_buffer() : nullptr;
                                     for (std::size_t b = 0; b < n; ++b)
                                       for (std::size_t ch = 0; ch < c; ++ch) {
                                         const Real gy = o.grad[b * c + ch];
                                         for (std::size_t r = 0; r < k; ++r) {
                                           const std::size_t i = (b * k + r) * c + ch;
                                           if (gm) gm[i] += gy * wd[r * c + ch];
                                           if (gw) gw[r * c + ch] += gy * md[i];
                                         }
                                       }
                                   });
}

#define MCA_INSTANTIATE_OPS(Real)                                                                        \
  template BasicTensor<Real> add(const BasicTensor<Real>&, const BasicTensor<Real>&);                  \
  template BasicTensor<Real> sub(const BasicTensor<Real>&, const BasicTensor<Real>&);                  \
  template BasicTensor<Real> mul(const BasicTensor<Real>&, const BasicTensor<Real>&);                  \
  template BasicTensor<Real> scale(const BasicTensor<Real>&, Real);                                    \
  template BasicTensor<Real> sum(const BasicTensor<Real>&);                                            \
  template BasicTensor<Real> mean(const BasicTensor<Real>&);                                           \
  template BasicTensor<Real> reshape(const BasicTensor<Real>&, Shape);                                 \
  template BasicTensor<Real> relu(const BasicTensor<Real>&);                                           \
  template BasicTensor<Real> sigmoid(const BasicTensor<Real>&);                                        \
  template BasicTensor<Real> conv2d(const BasicTensor<Real>&, const BasicTensor<Real>&, std::size_t,   \
                                    std::size_t);                                                      \
  template BasicTensor<Real> conv1d_channel(const BasicTensor<Real>&, const BasicTensor<Real>&,        \
                                            std::size_t);                                              \
  template BasicTensor<Real> reduce_spatial(const BasicTensor<Real>&, SpatialReduction);               \
  template BasicTensor<Real> broadcast_mul(const BasicTensor<Real>&, const BasicTensor<Real>&);        \
  template BasicTensor<Real> linear(const BasicTensor<Real>&, const BasicTensor<Real>&,                \
                                    const BasicTensor<Real>&);                                         \
  template BasicTensor<Real> softmax_cross_entropy(const BasicTensor<Real>&, std::span<const int>);    \
  template BasicTensor<Real> channel_affine(const BasicTensor<Real>&, const BasicTensor<Real>&,        \
                                            const BasicTensor<Real>&);                                 \
  template BasicTensor<Real> batch_norm(const BasicTensor<Real>&, const BasicTensor<Real>&,            \
                                        const BasicTensor<Real>&, BasicTensor<Real>&,                  \
                                        BasicTensor<Real>&, bool, Real, Real);                         \
  template BasicTensor<Real> stack_rows(std::span<const BasicTensor<Real>>);                           \
  template BasicTensor<Real> scale_rows(const BasicTensor<Real>&, const BasicTensor<Real>&);           \
  template BasicTensor<Real> cfc_fuse(const BasicTensor<Real>&, const BasicTensor<Real>&);

MCA_INSTANTIATE_OPS(float)
MCA_INSTANTIATE_OPS(double)

#undef MCA_INSTANTIATE_OPS

}  // namespace mca
