#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mca/errors.hpp"
#include "mca/ops.hpp"
#include "mca/train.hpp"

using namespace mca;

namespace {

ModelSpec small_model(const char* attention) {
  ModelSpec spec;
  spec.stem_channels = 8;
  spec.stages = {{1, 8, 1}, {1, 16, 2}};
  spec.in_channels = 1;
  spec.classes = 4;
  spec.norm = NormKind::batch;
  const std::string name(attention);
  spec.attention = name == "none" ? no_attention() : parse_attention(name, 3);
  return spec;
}

TrainConfig overfit_config() {
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.lr_steps = {};
  cfg.flip_prob = 0.0;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(Sgd, PlainStepSubtractsGradient) {
  std::vector<float> p{1.0f, -2.0f, 0.5f}, v(3, 0.0f);
  const std::vector<float> g{0.25f, 0.5f, -1.0f};
  sgd_update<float>(p, g, v, 1.0, 0.0, 0.0);
  EXPECT_EQ(p, (std::vector<float>{0.75f, -2.5f, 1.5f}));
}

TEST(Sgd, ZeroGradientWithoutDecayIsANoOp) {
  std::vector<double> p{1.0, -2.0}, v(2, 0.0);
  const std::vector<double> g(2, 0.0);
  for (int i = 0; i < 5; ++i) sgd_update<double>(p, g, v, 0.1, 0.9, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Sgd, MomentumRecurrence) {
  // Constant gradient: velocities g and 1.9 g, total displacement lr * g * 2.9.
  std::vector<double> p{0.0}, v{0.0};
  const std::vector<double> g{0.3};
  const double lr = 0.05;
  sgd_update<double>(p, g, v, lr, 0.9, 0.0);
  sgd_update<double>(p, g, v, lr, 0.9, 0.0);
  EXPECT_NEAR(p[0], -lr * 0.3 * 2.9, 1e-15);
  EXPECT_NEAR(v[0], 0.3 * 1.9, 1e-15);
}

TEST(SgdProperty, WeightDecayFollowsScalarRecurrence) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double lr = 0.2 * u(rng) + 1e-3, mom = 0.95 * u(rng), wd = 0.1 * u(rng), p0 = 4.0 * u(rng) - 2.0;
    std::vector<double> p{p0}, v{0.0};
    const std::vector<double> g{0.0};
    long double rp = p0, rv = 0.0L;
    for (int step = 0; step < 30; ++step) {
      sgd_update<double>(p, g, v, lr, mom, wd);
      rv = mom * rv + wd * rp;
      rp -= lr * rv;
    }
    ASSERT_NEAR(p[0], static_cast<double>(rp), 1e-13 * std::abs(p0) + 1e-300) << trial;
    if (mom == 0.0) ASSERT_NEAR(p[0], p0 * std::pow(1 - lr * wd, 30), 1e-12);
  }
  std::vector<double> p(2), v(3);
  const std::vector<double> g(2);
  EXPECT_THROW(sgd_update<double>(p, g, v, 0.1, 0.0, 0.0), ShapeError);
}

TEST(Sgd, DecayMaskExemptsParameters) {
  TensorD a(Shape{1}, 1.0), b(Shape{1}, 1.0);
  Sgd<double> opt({{"a", a}, {"b", b}}, 0.1, 0.0, 0.5, {true, false});
  opt.step();
  EXPECT_DOUBLE_EQ(a.values()[0], 0.95);
  EXPECT_EQ(b.values()[0], 1.0);
  EXPECT_THROW(Sgd<double>({{"a", a}}, 0.1, 0.0, 0.5, {true, false}), ShapeError);
}

TEST(Schedule, StepDecayAtConfiguredEpoch) {
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.lr_steps = {2};
  cfg.lr_decay = 0.1;
  EXPECT_EQ(lr_at_epoch(cfg, 0), 0.05);
  EXPECT_EQ(lr_at_epoch(cfg, 1), 0.05);
  EXPECT_NEAR(std::log10(lr_at_epoch(cfg, 2)), std::log10(0.05) - 1.0, 1e-12);
  EXPECT_NEAR(std::log10(lr_at_epoch(cfg, 5)), std::log10(0.05) - 1.0, 1e-12);
  cfg.lr_steps = {6, 8};
  EXPECT_NEAR(lr_at_epoch(cfg, 9), 0.05 * 0.01, 1e-15);
}

TEST(TrainConfig, RejectsOutOfRangeValues) {
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.momentum = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.weight_decay = -1e-4; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_decay = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Metrics, PerfectLogitsAndTies) {
  const std::vector<float> perfect{9, 0, 0, 0, 9, 0, 0, 0, 9};
  const std::vector<int> labels{0, 1, 2};
  EXPECT_EQ(topk_accuracy(perfect, 3, labels, 1), 100.0);
  EXPECT_EQ(topk_accuracy(perfect, 3, labels, 5), 100.0);
  // All-equal logits: class 0 ranks first, class 2 last.
  const std::vector<float> flat(9, 1.0f);
  EXPECT_EQ(topk_hits(flat, 3, labels, 1), 1u);
  EXPECT_EQ(topk_hits(flat, 3, labels, 2), 2u);
  EXPECT_THROW(topk_accuracy(flat, 3, std::vector<int>{0, 3, 1}, 1), ShapeError);
  EXPECT_THROW(topk_accuracy({}, 3, std::vector<int>{}, 1), ConfigError);
}

TEST(Metrics, RandomLogitsMatchChance) {
  std::mt19937_64 rng(12);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> logits(1000 * 10);
  std::vector<int> labels(1000);
  for (auto& x : logits) x = d(rng);
  for (auto& l : labels) l = static_cast<int>(rng() % 10);
  const double top1 = topk_accuracy(logits, 10, labels, 1), top5 = topk_accuracy(logits, 10, labels, 5);
  EXPECT_NEAR(top1, 10.0, 3.0);
  EXPECT_NEAR(top5, 50.0, 5.0);
  EXPECT_GE(top5, top1);
}

TEST(Metrics, SoftmaxOfUniformLogitsIsLogClasses) {
  const Tensor z(Shape{2, 10}, 0.0f);
  const std::vector<int> labels{3, 9};
  EXPECT_NEAR(softmax_cross_entropy(z, std::span<const int>(labels)).item(), std::log(10.0), 1e-6);
}

TEST(Train, EvaluateRejectsEmptyData) {
  Model<float> m(small_model("none"), 0);
  Dataset empty{Tensor(Shape{1, 1, 8, 8}), {}, 4, "test"};
  EXPECT_THROW(evaluate(m, empty), ConfigError);
}

TEST(Train, OverfitLossMostlyDecreases) {
  const auto data = make_moment_dataset(64, 4, 1, 8, 1);
  Model<float> m(small_model("mca-s"), 3);
  const auto r = train(m, data, overfit_config());
  ASSERT_EQ(r.step_losses.size(), 40u);
  std::size_t down = 0;
  for (std::size_t i = 1; i < r.step_losses.size(); ++i) down += r.step_losses[i] < r.step_losses[i - 1];
  EXPECT_GE(static_cast<double>(down), 0.8 * static_cast<double>(r.step_losses.size() - 1));
  EXPECT_LT(r.step_losses.back(), r.step_losses.front());
  ASSERT_EQ(r.history.size(), 40u);
  for (const auto& h : r.history) {
    EXPECT_GE(h.top5, h.top1);
    EXPECT_LE(h.top5, 100.0);
  }
}

TEST(Train, SameSeedSameCheckpoint) {
  const auto data = make_moment_dataset(48, 4, 1, 8, 2);
  auto cfg = overfit_config();
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.flip_prob = 0.5;
  std::vector<std::vector<std::byte>> runs;
  for (int i = 0; i < 2; ++i) {
    Model<float> m(small_model("mca-e"), 4);
    runs.push_back(encode_checkpoint(train(m, data, cfg).checkpoint));
  }
  EXPECT_EQ(runs[0], runs[1]);
  cfg.seed = 4;
  Model<float> m(small_model("mca-e"), 4);
  EXPECT_NE(encode_checkpoint(train(m, data, cfg).checkpoint), runs[0]);
}

TEST(Train, MaxStepsCapsTheRun) {
  const auto data = make_moment_dataset(48, 4, 1, 8, 2);
  auto cfg = overfit_config();
  cfg.batch_size = 16;
  cfg.max_steps = 5;
  Model<float> m(small_model("none"), 1);
  const auto r = train(m, data, cfg);
  EXPECT_EQ(r.steps, 5u);
  EXPECT_EQ(r.checkpoint.step, 5u);
}

TEST(Train, NonFiniteLossNamesTheStep) {
  const auto data = make_moment_dataset(32, 4, 1, 8, 2);
  Model<float> m(small_model("mca-s"), 1);
  m.parameters().back().tensor.mutable_values()[0] = std::nanf("");
  try {
    train(m, data, overfit_config());
    FAIL() << "NaN weights trained without complaint";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Sweep, SingleVariantSingleSeedEqualsDirectRun) {
  const auto data = make_moment_dataset(32, 4, 1, 8, 5);
  const auto test = make_moment_dataset(16, 4, 1, 8, 6);
  auto cfg = overfit_config();
  cfg.epochs = 2;
  cfg.batch_size = 16;
  const auto spec = small_model("none");
  const auto rows = run_variant_sweep({{spec, parse_attention("mca-s", 3)}}, data, test, cfg, {9});
  ASSERT_EQ(rows.size(), 1u);

  auto direct_spec = spec;
  direct_spec.attention = parse_attention("mca-s", 3);
  Model<float> m(direct_spec, 9);
  auto direct_cfg = cfg;
  direct_cfg.seed = 9;
  train(m, data, direct_cfg);
  const auto ev = evaluate(m, test);
  EXPECT_EQ(rows[0].top1, std::vector<double>{ev.top1});
  EXPECT_EQ(rows[0].top5_mean, ev.top5);
  EXPECT_EQ(rows[0].top1_std, 0.0);
  EXPECT_EQ(rows[0].params, m.parameter_count());
}

TEST(Sweep, StatisticsAndParamColumn) {
  const auto data = make_moment_dataset(16, 4, 1, 8, 5);
  auto cfg = overfit_config();
  cfg.epochs = 1;
  cfg.batch_size = 16;
  const auto spec = small_model("none");
  const auto rows = run_variant_sweep({{spec, no_attention()}, {spec, parse_attention("mca-s", 3)}}, data, data,
                                      cfg, {1, 2, 3});
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    ASSERT_EQ(r.top1.size(), 3u);
    const double mean = (r.top1[0] + r.top1[1] + r.top1[2]) / 3.0;
    EXPECT_NEAR(r.top1_mean, mean, 1e-12);
    double ss = 0;
    for (double t : r.top1) ss += (t - mean) * (t - mean);
    EXPECT_NEAR(r.top1_std, std::sqrt(ss / 2.0), 1e-12);
  }
  // Two blocks of 8 and 16 channels: affine pairs plus a 2x3 kernel and two logits each.
  EXPECT_EQ(rows[1].params - rows[0].params, 2 * (8 + 16) + 2 * (2 * 3 + 2));
  EXPECT_EQ(rows[1].attention_params, rows[1].params - rows[0].params);
  EXPECT_THROW(run_variant_sweep({{spec, no_attention()}}, data, data, cfg, {}), ConfigError);

  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  EXPECT_NE(csv.str().find("mca-s"), std::string::npos);
}

TEST(Metrics, CsvHeaderAndRows) {
  std::ostringstream out;
  write_metrics_csv(out, {{0, 1.5, 25.0, 75.0, 12.5, 0.05}});
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "epoch,loss,top1,top5,wall_ms");
  EXPECT_NE(out.str().find("0,1.5,25,75,12.5"), std::string::npos) << out.str();
}
