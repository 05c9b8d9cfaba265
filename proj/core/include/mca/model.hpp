#pragma once

// Desk-scale backbones with one attention slot per block: a plain mini-CNN
// and a three-stage residual network of basic blocks. The attention block
// sits after the last normalization of each block, before the residual add.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mca/attention.hpp"
#include "mca/checkpoint.hpp"
#include "mca/tensor.hpp"

namespace mca {

enum class Arch { mini_cnn, mini_resnet };
enum class NormKind { affine, batch };

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t channels = 16;
  std::size_t stride = 1;
};

struct ModelSpec {
  Arch arch = Arch::mini_resnet;
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::vector<StageSpec> stages{{2, 16, 1}, {2, 32, 2}, {2, 64, 2}};
  std::size_t classes = 10;
  AttentionConfig attention;
  NormKind norm = NormKind::affine;

  void validate() const;
  std::vector<StageCount> stage_counts() const;
};

std::string to_string(Arch arch);
Arch parse_arch(const std::string& name);
std::string to_string(NormKind norm);
NormKind parse_norm(const std::string& name);

/// Bottleneck stages of ResNet-50 as (blocks, output channels). Used only for
/// analytic parameter accounting; never instantiated as a network.
std::vector<StageCount> resnet50_stages();

template <typename Real>
class Model {
 public:
  /// He fan-in initialization for convolutions and the classifier, unit
  /// scale / zero shift for normalization. Backbone and attention draw from
  /// separate streams so the attention choice never shifts backbone weights.
  Model(ModelSpec spec, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  /// x[N, in_channels, H, W] -> logits[N, classes].
  BasicTensor<Real> forward(const BasicTensor<Real>& x, bool training = false);
  std::vector<int> predict(const BasicTensor<Real>& x);

  std::vector<NamedTensor<Real>> parameters() const;
  /// Non-learnable state (running statistics).
  std::vector<NamedTensor<Real>> buffers() const;
  std::size_t parameter_count() const;
  std::size_t attention_parameter_count() const;
  std::vector<AttentionBlock<Real>*> attention_blocks();

  void zero_grad();

  Checkpoint to_checkpoint(std::uint64_t step) const;
  /// Copies every named tensor from the checkpoint; names and shapes must match.
  /// The model takes over the checkpoint's seed.
  void load_checkpoint(const Checkpoint& ckpt);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

 private:
  struct Impl;
  ModelSpec spec_;
  std::uint64_t seed_;
  std::unique_ptr<Impl> impl_;
};

/// Total learnable parameters of the backbone for `spec` without building it.
std::size_t closed_form_param_count(const ModelSpec& spec);

}  // namespace mca
