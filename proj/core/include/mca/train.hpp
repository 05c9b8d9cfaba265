#pragma once

// SGD with momentum and step decay, top-k evaluation, and the multi-seed
// variant comparison harness.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mca/checkpoint.hpp"
#include "mca/data.hpp"
#include "mca/model.hpp"

namespace mca {

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 10;
  std::size_t batch_size = 128;
  std::vector<int> lr_steps{6, 8};  // 0-based epochs at which the decay applies
  double lr_decay = 0.1;
  std::uint64_t seed = 0;
  double flip_prob = 0.5;
  bool decay_attention = true;      // false: attention parameters skip weight decay
  std::size_t max_steps = 0;        // 0: no cap

  void validate() const;
};

/// Learning rate in effect during `epoch` (0-based).
double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct MetricsRecord {
  int epoch = 0;
  double loss = 0.0;
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
  double wall_ms = 0.0;
  double lr = 0.0;
};

/// v <- momentum v + (grad + wd param); param <- param - lr v.
template <typename Real>
void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity, double lr,
                double momentum, double weight_decay);

/// One velocity buffer per parameter tensor.
template <typename Real>
class Sgd {
 public:
  /// decay_mask[i] false exempts parameter i from weight decay; empty means all decay.
  Sgd(std::vector<NamedTensor<Real>> params, double lr, double momentum, double weight_decay,
      std::vector<bool> decay_mask = {});

  /// Uses each parameter's accumulated gradient (zero when absent).
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::span<const Real> velocity(std::size_t i) const { return velocity_.at(i); }

 private:
  std::vector<NamedTensor<Real>> params_;
  std::vector<std::vector<Real>> velocity_;
  std::vector<bool> decay_mask_;
  double lr_, momentum_, weight_decay_;
};

struct TrainResult {
  std::vector<MetricsRecord> history;  // one per epoch
  std::vector<double> step_losses;
  std::size_t steps = 0;
  Checkpoint checkpoint;
};

/// Per-epoch callback, invoked after each history record is appended.
using EpochCallback = std::function<void(const MetricsRecord&)>;

/// Trains in place. Epoch metrics come from `eval` when given, otherwise from
/// the running training-batch predictions. Throws NumericalError naming the
/// step when the loss or a gradient is not finite.
TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& cfg, const Dataset* eval = nullptr,
                  const EpochCallback& on_epoch = {});

/// Loss and top-1/top-5 over the whole dataset, in inference mode.
MetricsRecord evaluate(Model<float>& model, const Dataset& data, std::size_t batch_size = 256);

/// Number of rows whose label ranks within the k largest logits. Ties rank
/// the lower class index first.
std::size_t topk_hits(std::span<const float> logits, std::size_t classes, std::span<const int> labels, std::size_t k);

/// Top-k accuracy in percent.
double topk_accuracy(std::span<const float> logits, std::size_t classes, std::span<const int> labels, std::size_t k);

struct SweepVariant {
  ModelSpec spec;           // backbone; its attention field is replaced
  AttentionConfig attention;
};

struct SweepRow {
  std::string variant;
  std::vector<double> top1;  // per seed
  double top1_mean = 0.0;
  double top1_std = 0.0;     // sample standard deviation; 0 for one seed
  double top5_mean = 0.0;
  std::size_t params = 0;
  std::size_t attention_params = 0;
  double wall_ms_mean = 0.0;
};

using SweepProgress = std::function<void(const std::string& variant, std::uint64_t seed, const MetricsRecord& eval)>;

/// Trains every variant under every seed (model seed = training seed) and
/// evaluates on `test`.
std::vector<SweepRow> run_variant_sweep(const std::vector<SweepVariant>& variants, const Dataset& train_set,
                                        const Dataset& test, const TrainConfig& cfg,
                                        const std::vector<std::uint64_t>& seeds,
                                        const SweepProgress& progress = {});

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& history);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace mca
