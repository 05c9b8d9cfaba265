#include "mca/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "mca/errors.hpp"
#include "mca/ops.hpp"
#include "mca/seeds.hpp"

namespace mca {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("lr decay factor must lie in (0,1)");
  for (int s : lr_steps) {
    if (s < 0) throw ConfigError("lr step epochs must be non-negative");
  }
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0,1]");
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int s : cfg.lr_steps) {
    if (epoch >= s) lr *= cfg.lr_decay;
  }
  return lr;
}

template <typename Real>
void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity, double lr,
                double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd update: parameter, gradient and velocity sizes differ (" + std::to_string(param.size()) +
                     ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  const Real m = static_cast<Real>(momentum), wd = static_cast<Real>(weight_decay), eta = static_cast<Real>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = m * velocity[i] + (grad[i] + wd * param[i]);
    param[i] -= eta * velocity[i];
  }
}

template <typename Real>
Sgd<Real>::Sgd(std::vector<NamedTensor<Real>> params, double lr, double momentum, double weight_decay,
               std::vector<bool> decay_mask)
    : params_(std::move(params)), decay_mask_(std::move(decay_mask)), lr_(lr), momentum_(momentum),
      weight_decay_(weight_decay) {
  if (!decay_mask_.empty() && decay_mask_.size() != params_.size()) {
    throw ShapeError("decay mask length differs from parameter count");
  }
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.size(), Real{0});
}

template <typename Real>
void Sgd<Real>::step() {
  std::vector<Real> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    std::span<const Real> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.size(), Real{0});
      g = zeros;
    }
    const double wd = decay_mask_.empty() || decay_mask_[i] ? weight_decay_ : 0.0;
    sgd_update<Real>(t.mutable_values(), g, velocity_[i], lr_, momentum_, wd);
  }
}

template void sgd_update<float>(std::span<float>, std::span<const float>, std::span<float>, double, double, double);
template void sgd_update<double>(std::span<double>, std::span<const double>, std::span<double>, double, double,
                                 double);
template class Sgd<float>;
template class Sgd<double>;

std::size_t topk_hits(std::span<const float> logits, std::size_t classes, std::span<const int> labels, std::size_t k) {
  if (classes == 0 || logits.size() != labels.size() * classes) {
    throw ShapeError("logits of size " + std::to_string(logits.size()) + " do not match " +
                     std::to_string(labels.size()) + " labels x " + std::to_string(classes) + " classes");
  }
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = logits.subspan(r * classes, classes);
    const auto l = static_cast<std::size_t>(labels[r]);
    if (labels[r] < 0 || l >= classes) throw ShapeError("label " + std::to_string(labels[r]) + " out of range");
    std::size_t rank = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (row[j] > row[l] || (row[j] == row[l] && j < l)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return hits;
}

double topk_accuracy(std::span<const float> logits, std::size_t classes, std::span<const int> labels, std::size_t k) {
  if (labels.empty()) throw ConfigError("accuracy of an empty set is undefined");
  return 100.0 * static_cast<double>(topk_hits(logits, classes, labels, k)) / static_cast<double>(labels.size());
}

MetricsRecord evaluate(Model<float>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  const auto start = std::chrono::steady_clock::now();
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::size_t> idx;
  Tensor images;
  std::vector<int> labels;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(b + batch_size, data.size());
    idx.resize(e - b);
    std::iota(idx.begin(), idx.end(), b);
    gather_batch(data, idx, images, labels);
    const auto logits = model.forward(images, false);
    loss_sum += static_cast<double>(softmax_cross_entropy(logits, std::span<const int>(labels)).item()) *
                static_cast<double>(labels.size());
    const std::size_t classes = logits.dim(1);
    hit1 += topk_hits(logits.values(), classes, labels, 1);
    hit5 += topk_hits(logits.values(), classes, labels, 5);
  }
  MetricsRecord rec;
  const double n = static_cast<double>(data.size());
  rec.loss = loss_sum / n;
  rec.top1 = 100.0 * static_cast<double>(hit1) / n;
  rec.top5 = 100.0 * static_cast<double>(hit5) / n;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

namespace {

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& cfg, const Dataset* eval,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  auto params = model.parameters();
  std::vector<bool> decay_mask;
  for (const auto& p : params) {
    decay_mask.push_back(cfg.decay_attention || p.name.find(".attn.") == std::string::npos);
  }
  Sgd<float> opt(params, cfg.lr, cfg.momentum, cfg.weight_decay, decay_mask);

  TrainResult result;
  Tensor images;
  std::vector<int> labels;
  bool capped = false;
  for (int epoch = 0; epoch < cfg.epochs && !capped; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    opt.set_lr(lr_at_epoch(cfg, epoch));
    const auto order = epoch_permutation(data.size(), derive_seed(cfg.seed, kShuffleSeedOffset, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    std::size_t seen = 0, hit1 = 0, hit5 = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      if (cfg.max_steps != 0 && result.steps >= cfg.max_steps) {
        capped = true;
        break;
      }
      const std::size_t e = std::min(b + cfg.batch_size, order.size());
      gather_batch(data, std::span<const std::size_t>(order).subspan(b, e - b), images, labels);
      if (cfg.flip_prob > 0.0) images = augment(images, cfg.flip_prob, derive_seed(cfg.seed, kAugmentSeedOffset, result.steps));

      model.zero_grad();
      const auto logits = model.forward(images, true);
      const auto loss = softmax_cross_entropy(logits, std::span<const int>(labels));
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite loss at step " + std::to_string(result.steps) + " (epoch " +
                             std::to_string(epoch) + ")");
      }
      loss.backward();
      for (const auto& p : params) {
        if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
          throw NumericalError("non-finite gradient for " + p.name + " at step " + std::to_string(result.steps) +
                               " (epoch " + std::to_string(epoch) + ")");
        }
      }
      opt.step();

      const std::size_t classes = logits.dim(1);
      hit1 += topk_hits(logits.values(), classes, labels, 1);
      hit5 += topk_hits(logits.values(), classes, labels, 5);
      seen += labels.size();
      loss_sum += loss_value * static_cast<double>(labels.size());
      result.step_losses.push_back(loss_value);
      ++result.steps;
    }
    if (seen == 0) break;
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr();
    rec.loss = loss_sum / static_cast<double>(seen);
    if (eval) {
      const auto ev = evaluate(model, *eval);
      rec.top1 = ev.top1;
      rec.top5 = ev.top5;
    } else {
      rec.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(seen);
      rec.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(seen);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.zero_grad();
  result.checkpoint = model.to_checkpoint(result.steps);
  return result;
}

std::vector<SweepRow> run_variant_sweep(const std::vector<SweepVariant>& variants, const Dataset& train_set,
                                        const Dataset& test, const TrainConfig& cfg,
                                        const std::vector<std::uint64_t>& seeds, const SweepProgress& progress) {
  if (seeds.empty()) throw ConfigError("variant sweep needs at least one seed");
  std::vector<SweepRow> rows;
  for (const auto& v : variants) {
    ModelSpec spec = v.spec;
    spec.attention = v.attention;
    SweepRow row;
    row.variant = v.attention.name();
    double wall = 0.0, top5 = 0.0;
    for (auto seed : seeds) {
      TrainConfig run = cfg;
      run.seed = seed;
      Model<float> model(spec, seed);
      row.params = model.parameter_count();
      row.attention_params = model.attention_parameter_count();
      const auto start = std::chrono::steady_clock::now();
      train(model, train_set, run);
      const auto ev = evaluate(model, test);
      wall += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      row.top1.push_back(ev.top1);
      top5 += ev.top5;
      if (progress) progress(row.variant, seed, ev);
    }
    const double n = static_cast<double>(seeds.size());
    row.top1_mean = std::accumulate(row.top1.begin(), row.top1.end(), 0.0) / n;
    if (seeds.size() > 1) {
      double ss = 0.0;
      for (double t : row.top1) ss += (t - row.top1_mean) * (t - row.top1_mean);
      row.top1_std = std::sqrt(ss / (n - 1.0));
    }
    row.top5_mean = top5 / n;
    row.wall_ms_mean = wall / n;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& history) {
  out << "epoch,loss,top1,top5,wall_ms\n";
  out.precision(10);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.loss << ',' << r.top1 << ',' << r.top5 << ',' << r.wall_ms << '\n';
  }
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "variant,seeds,top1_mean,top1_std,top5_mean,params,attention_params,wall_ms_mean\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.variant << ',' << r.top1.size() << ',' << r.top1_mean << ',' << r.top1_std << ',' << r.top5_mean << ','
        << r.params << ',' << r.attention_params << ',' << r.wall_ms_mean << '\n';
  }
}

}  // namespace mca
