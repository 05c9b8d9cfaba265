#pragma once

// Channel attention blocks: moment channel attention (moment aggregation,
// cross-moment convolution, sigmoid recalibration) and the SE / ECA
// baselines, plus closed-form parameter accounting.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mca/moments.hpp"
#include "mca/tensor.hpp"

namespace mca {

enum class AttentionKind { none, mca, se, eca };
enum class Fusion { cmc, cfc };

struct AttentionConfig {
  AttentionKind kind = AttentionKind::none;
  std::vector<int> moments;       // mca only, ascending subset of {1,2,3}
  int kernel_size = 0;            // 0: variant default (eca: adaptive in C)
  double alpha_init = 0.5;        // initial per-moment factor
  bool learn_alpha = true;        // false: factors fixed at alpha_init
  bool use_affine = true;         // per-channel gamma/beta after fusion
  bool standardize_moments = false;
  Fusion fusion = Fusion::cmc;
  int reduction = 16;             // se only

  /// Canonical variant name ("mca-e", "se", "mca-dual13-cfc", ...).
  std::string name() const;
  void validate() const;
};

AttentionConfig no_attention();
AttentionConfig mca_e();       // {M1, M2}, k = 11
AttentionConfig mca_s();       // {M1, M3}, k = 3
AttentionConfig mca_triple();  // {M1, M2, M3}, k = 3
AttentionConfig mca_mono(int order);
AttentionConfig mca_dual(int first, int second);
AttentionConfig se_attention(int reduction = 16);
AttentionConfig eca_attention(int kernel_size = 0);

/// Parses "none", "mca-e", "mca-s", "mca-triple", "mca-mono<k>",
/// "mca-dual<jk>", "se", "se<r>", "eca", with an optional "-cfc" suffix on
/// mca variants. kernel overrides the default kernel size.
AttentionConfig parse_attention(std::string_view name, std::optional<int> kernel = std::nullopt);

/// Kernel size ECA derives from the channel count: nearest odd to (log2 C + 1)/2.
int eca_adaptive_kernel(std::size_t channels);

/// Kernel size actually used for a block with `channels` channels.
int resolve_kernel(const AttentionConfig& cfg, std::size_t channels);

template <typename Real>
struct CmcParams {
  BasicTensor<Real> kernel;       // [1, K, k], shared across channels
  BasicTensor<Real> gamma;        // [C]
  BasicTensor<Real> beta;         // [C]
  BasicTensor<Real> alpha_logit;  // [K]; alpha = sigmoid(logit). Undefined when alpha is fixed.
  Real fixed_alpha = Real{1};

  std::size_t parameter_count() const;
};

/// W = 1/(K k), gamma = 1, beta = 0, alpha = alpha_init.
template <typename Real>
CmcParams<Real> make_cmc_params(std::size_t rows, std::size_t channels, const AttentionConfig& cfg);

template <typename Real>
struct GateOutput {
  BasicTensor<Real> fused;  // F, [N,C]
  BasicTensor<Real> gate;   // sigmoid(F), [N,C]
  BasicTensor<Real> output; // X * gate, [N,C,H,W]
};

/// F = affine(conv1d_channel(alpha . M, W)); affine skipped when disabled.
template <typename Real>
BasicTensor<Real> cmc_forward(const MomentVector<Real>& m, const CmcParams<Real>& p, bool use_affine);

/// F_c = sum_k weights[k,c] M[k,c].
template <typename Real>
BasicTensor<Real> cfc_forward(const MomentVector<Real>& m, const BasicTensor<Real>& weights);

/// Multiplies x[N,C,H,W] by sigmoid(fused[N,C]).
template <typename Real>
GateOutput<Real> recalibrate(const BasicTensor<Real>& x, BasicTensor<Real> fused);

/// aggregate -> CMC -> sigmoid -> broadcast multiply.
template <typename Real>
GateOutput<Real> mca_forward(const BasicTensor<Real>& x, const AttentionConfig& cfg,
                             const CmcParams<Real>& p);

/// GAP -> channel conv1d with kernel[1,1,k] -> sigmoid -> multiply.
template <typename Real>
GateOutput<Real> eca_forward(const BasicTensor<Real>& x, const BasicTensor<Real>& kernel);

template <typename Real>
struct SeParams {
  BasicTensor<Real> w1;  // [C/r, C]
  BasicTensor<Real> b1;  // [C/r]
  BasicTensor<Real> w2;  // [C, C/r]
  BasicTensor<Real> b2;  // [C]
};

/// GAP -> FC(C -> C/r) -> ReLU -> FC(C/r -> C) -> sigmoid -> multiply.
template <typename Real>
GateOutput<Real> se_forward(const BasicTensor<Real>& x, const SeParams<Real>& p);

/// Layer interface shared by every attention variant. Blocks own their
/// parameters; forward is pure apart from the optional moment
/// standardization statistics, which update only when training.
template <typename Real>
class AttentionBlock {
 public:
  virtual ~AttentionBlock() = default;

  virtual GateOutput<Real> forward(const BasicTensor<Real>& x, bool training) = 0;
  virtual std::vector<NamedTensor<Real>> parameters() const = 0;
  virtual std::vector<NamedTensor<Real>> buffers() const { return {}; }

  std::size_t parameter_count() const;
};

/// Returns nullptr for AttentionKind::none. rng feeds SE initialization only.
template <typename Real>
std::unique_ptr<AttentionBlock<Real>> make_attention(const AttentionConfig& cfg, std::size_t channels,
                                                     std::mt19937_64& rng);

template <typename Real>
class McaBlock : public AttentionBlock<Real> {
 public:
  McaBlock(const AttentionConfig& cfg, std::size_t channels);

  GateOutput<Real> forward(const BasicTensor<Real>& x, bool training) override;
  std::vector<NamedTensor<Real>> parameters() const override;
  std::vector<NamedTensor<Real>> buffers() const override;

  CmcParams<Real>& params() { return params_; }
  BasicTensor<Real>& cfc_weights() { return cfc_weights_; }
  const AttentionConfig& config() const { return cfg_; }

 private:
  AttentionConfig cfg_;
  CmcParams<Real> params_;
  BasicTensor<Real> cfc_weights_;  // [K,C], cfc fusion only
  BasicTensor<Real> moment_scale_; // [K], running mean |M_k|, standardization only
};

template <typename Real>
class EcaBlock : public AttentionBlock<Real> {
 public:
  EcaBlock(std::size_t channels, int kernel_size);

  GateOutput<Real> forward(const BasicTensor<Real>& x, bool training) override;
  std::vector<NamedTensor<Real>> parameters() const override;

  BasicTensor<Real>& kernel() { return kernel_; }

 private:
  BasicTensor<Real> kernel_;  // [1,1,k]
};

template <typename Real>
class SeBlock : public AttentionBlock<Real> {
 public:
  SeBlock(std::size_t channels, int reduction, std::mt19937_64& rng);

  GateOutput<Real> forward(const BasicTensor<Real>& x, bool training) override;
  std::vector<NamedTensor<Real>> parameters() const override;

  SeParams<Real>& params() { return params_; }

 private:
  SeParams<Real> params_;
};

/// Stage description used for analytic accounting: blocks and channels.
struct StageCount {
  std::size_t blocks = 0;
  std::size_t channels = 0;
};

struct ParamCountReport {
  std::string variant;
  std::size_t counted = 0;      // sum of instantiated per-block parameter counts
  std::size_t closed_form = 0;  // closed-form count for the variant family
  std::size_t affine_term = 0;  // sum N_s * C_s * 2 (mca variants with affine), else 0
  long long delta() const { return static_cast<long long>(counted) - static_cast<long long>(closed_form); }
};

/// Parameter count of one attention block over `channels` channels.
std::size_t attention_block_params(const AttentionConfig& cfg, std::size_t channels);

/// Counted attention parameters vs. the closed forms:
///   MCA (cmc):  sum N_s C_s 2
///   MCA (cfc):  sum N_s C_s (K + 2)
///   SE:         (2/r) sum N_s C_s^2 (bias-free)
///   ECA:        sum N_s k(C_s)
ParamCountReport count_params(const std::vector<StageCount>& stages, const AttentionConfig& cfg);

}  // namespace mca
