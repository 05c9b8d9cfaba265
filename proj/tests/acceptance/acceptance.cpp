// Acceptance suite: one pass/fail line per criterion.
//
//   mca_acceptance                  run every criterion
//   mca_acceptance --criterion 4    run one
//
// Exit status: 0 all selected criteria pass, 1 any failure, 77 when nothing
// failed but a criterion could not run (missing dataset).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mca/attention.hpp"
#include "mca/checkpoint.hpp"
#include "mca/data.hpp"
#include "mca/errors.hpp"
#include "mca/gradcheck.hpp"
#include "mca/model.hpp"
#include "mca/moments.hpp"
#include "mca/train.hpp"
#include "oracles.hpp"

using namespace mca;

namespace {

// Tolerances and sizes, pinned.
constexpr int kGradTrials = 20;
constexpr double kGradSeconds = 60.0;
constexpr int kOracleChannels = 1000;
constexpr double kOracleRelTol = 1e-12;
constexpr double kShiftScaleTol = 1e-10;
constexpr int kBoundSets = 10000;
constexpr double kBernoulliBound = 0.273148;
constexpr double kBernoulliMargin = 0.0231;
constexpr double kBernoulliMarginTol = 1e-4;
constexpr int kEcaInputs = 100;
constexpr std::size_t kAffineTerm = 30208;
constexpr double kTotalParamTol = 0.005;
constexpr double kCfcSlack = 0.3;
constexpr std::size_t kOverfitSamples = 64;
constexpr std::size_t kOverfitSteps = 200;
constexpr double kOverfitTop1 = 95.0;
constexpr double kSweepSlack = 0.2;
constexpr double kSweepGain = 0.3;
constexpr std::size_t kSweepTrainSubset = 10000;
constexpr const char* kCifarEnv = "MCA_CIFAR10_DIR";

enum class Status { pass, fail, blocked };

struct Outcome {
  Status status = Status::pass;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::vector<double> random_channel(std::mt19937_64& rng) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 400)(rng);
  const int kind = std::uniform_int_distribution<int>(0, 4)(rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double offset = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
  std::vector<double> v(n);
  for (auto& x : v) {
    switch (kind) {
      case 0: x = gauss(rng); break;
      case 1: x = offset + 0.01 * gauss(rng); break;
      case 2: x = expo(rng); break;
      case 3: x = (rng() & 1) ? 1.0 : 0.0; break;
      default: x = offset + 1e-6 * gauss(rng); break;
    }
  }
  return v;
}

double lib_moment(const std::vector<double>& v, int k) {
  const TensorD x(Shape{1, 1, 1, v.size()}, v);
  return k == 1 ? moment1(x).item() : central_moment(x, k).item();
}

Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  std::string worst;
  double worst_ratio = 0.0;
  bool ok = true;
  std::ostringstream failures;
  for (const auto& op : gradcheck_ops()) {
    const auto r = run_gradcheck(op, kGradTrials, 0);
    const double moment_cap = op.rfind("moment", 0) == 0 ? 1e-6 : 1e-4;
    const bool pass = r.passed() && r.threshold <= moment_cap && r.trials >= kGradTrials;
    if (!pass) {
      ok = false;
      failures << ' ' << op << '=' << fmt(r.max_rel_error, 3);
    }
    if (r.max_rel_error / r.threshold >= worst_ratio) {
      worst_ratio = r.max_rel_error / r.threshold;
      worst = op + " " + fmt(r.max_rel_error, 3) + " (limit " + fmt(r.threshold, 1) + ")";
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < kGradSeconds;
  return verdict(ok, std::to_string(gradcheck_ops().size()) + " ops x " + std::to_string(kGradTrials) +
                         " trials, worst " + worst + ", " + fmt(secs, 3) + " s" + failures.str());
}

Outcome moment_oracle() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int c = 0; c < kOracleChannels; ++c) {
    const auto v = random_channel(rng);
    for (int k = 1; k <= 3; ++k) {
      const long double ref = k == 1 ? oracle::mean(v) : oracle::central_moment(v, k);
      const long double scale =
          k == 1 ? std::fabs(oracle::mean(v)) + oracle::absolute_moment(v, 1) : oracle::absolute_moment(v, k);
      if (scale == 0) {
        if (lib_moment(v, k) != static_cast<double>(ref)) worst = INFINITY;
        continue;
      }
      worst = std::max(worst, static_cast<double>(std::fabs(lib_moment(v, k) - ref) / scale));
    }
  }
  // Dyadic grids keep x + c and lambda x exact in binary64.
  double worst_shift = 0.0;
  const double grid = std::ldexp(1.0, -30);
  std::uniform_real_distribution<double> shift_d(-100.0, 100.0);
  std::uniform_int_distribution<int> lambda_d(1, 32);
  for (int c = 0; c < kOracleChannels; ++c) {
    auto v = random_channel(rng);
    for (auto& x : v) x = std::round(x / grid) * grid;
    const double shift = std::round(std::ldexp(shift_d(rng), 10)) / 1024.0;
    const double lambda = (rng() & 1 ? 1.0 : -1.0) * lambda_d(rng) / 8.0;
    std::vector<double> shifted(v), scaled(v);
    for (auto& x : shifted) x += shift;
    for (auto& x : scaled) x *= lambda;
    for (int k = 2; k <= 3; ++k) {
      const double base = lib_moment(v, k);
      const double size = static_cast<double>(oracle::absolute_moment(v, k));
      if (size == 0) continue;
      worst_shift = std::max(worst_shift, std::abs(lib_moment(shifted, k) - base) / size);
      worst_shift = std::max(worst_shift, std::abs(lib_moment(scaled, k) - std::pow(lambda, k) * base) /
                                              (std::pow(std::abs(lambda), k) * size));
    }
  }
  return verdict(worst <= kOracleRelTol && worst_shift <= kShiftScaleTol,
                 std::to_string(kOracleChannels) + " channels, max rel error " + fmt(worst, 3) +
                     ", shift/scale max rel error " + fmt(worst_shift, 3));
}

Outcome bound() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t violations = 0;
  double min_margin = INFINITY;
  for (int trial = 0; trial < kBoundSets; ++trial) {
    const std::size_t dims = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const std::size_t draws = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
    const double p = u(rng);
    std::vector<double> s(dims * draws);
    for (auto& x : s) {
      switch (trial % 3) {
        case 0: x = u(rng); break;
        case 1: x = u(rng) < p ? 1.0 : 0.0; break;
        default: x = std::pow(u(rng), 4.0); break;
      }
    }
    for (int k = 1; k <= 3; ++k) {
      const auto b = check_bound(s, dims, 0.0, 1.0, k);
      violations += !b.holds;
      min_margin = std::min(min_margin, b.margin);
    }
  }
  std::vector<double> bern;
  for (int i = 0; i < 1000; ++i) bern.push_back(i % 2);
  const auto b = check_bound(bern, 1, 0.0, 1.0, 2);
  const bool extremal = b.holds && b.moment_norm == 0.25 && std::abs(b.bound - kBernoulliBound) < 5e-7 &&
                        std::abs(b.margin - kBernoulliMargin) < kBernoulliMarginTol;
  return verdict(violations == 0 && extremal,
                 std::to_string(kBoundSets) + " sets x 3 orders, " + std::to_string(violations) +
                     " violations, min margin " + fmt(min_margin, 3) + "; Bernoulli M2 " + fmt(b.moment_norm) +
                     " bound " + fmt(b.bound, 7) + " margin " + fmt(b.margin));
}

Outcome eca_subsumption() {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> d(0.0f, 1.0f);
  AttentionConfig cfg = mca_mono(1);
  cfg.kernel_size = 5;
  cfg.learn_alpha = false;
  cfg.alpha_init = 1.0;
  cfg.use_affine = false;
  McaBlock<float> mca(cfg, 24);
  EcaBlock<float> eca(24, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const float w = d(rng);
    mca.params().kernel.mutable_values()[i] = w;
    eca.kernel().mutable_values()[i] = w;
  }
  int identical = 0;
  for (int trial = 0; trial < kEcaInputs; ++trial) {
    std::vector<float> v(2 * 24 * 4 * 4);
    for (auto& x : v) x = d(rng);
    const Tensor x(Shape{2, 24, 4, 4}, v);
    const auto a = mca.forward(x, false).output, b = eca.forward(x, false).output;
    identical += std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
  }
  return verdict(identical == kEcaInputs, std::to_string(identical) + "/" + std::to_string(kEcaInputs) +
                                              " inputs bit-identical, params " +
                                              std::to_string(mca.parameter_count()) + " vs " +
                                              std::to_string(eca.parameter_count()));
}

Outcome param_accounting() {
  const auto stages = resnet50_stages();
  bool ok = true;
  std::ostringstream detail;
  for (const auto& cfg : {mca_e(), mca_s()}) {
    const auto r = count_params(stages, cfg);
    const double rel = std::abs(static_cast<double>(r.counted) - static_cast<double>(kAffineTerm)) / kAffineTerm;
    const bool affine_exact = r.affine_term == kAffineTerm && r.closed_form == kAffineTerm;
    const bool total_close = rel <= kTotalParamTol;
    ok = ok && affine_exact && total_close;
    detail << r.variant << " affine " << r.affine_term << (affine_exact ? " exact" : " WRONG") << ", total "
           << r.counted << " (+" << fmt(100.0 * rel, 3) << "%, limit " << fmt(100.0 * kTotalParamTol, 2) << "%"
           << (total_close ? "" : " exceeded") << "); ";
  }
  detail << "se closed form " << count_params(stages, se_attention(16)).closed_form;
  return verdict(ok, detail.str());
}

struct SweepInputs {
  Dataset train, test;
};

std::optional<SweepInputs> cifar_inputs(std::string& why) {
  const char* dir = std::getenv(kCifarEnv);
  if (!dir || !*dir) {
    why = std::string("set ") + kCifarEnv + " to the cifar-10-batches-bin directory";
    return std::nullopt;
  }
  SweepInputs in{load_cifar10(cifar10_files(dir, true)).head(kSweepTrainSubset),
                 load_cifar10(cifar10_files(dir, false))};
  return in;
}

ModelSpec sweep_backbone() {
  ModelSpec spec;
  spec.norm = NormKind::batch;
  return spec;
}

std::vector<SweepRow> desk_sweep(const SweepInputs& in, const std::vector<AttentionConfig>& variants) {
  std::vector<SweepVariant> vs;
  for (const auto& a : variants) vs.push_back({sweep_backbone(), a});
  return run_variant_sweep(vs, in.train, in.test, TrainConfig{}, {1, 2, 3},
                           [](const std::string& v, std::uint64_t seed, const MetricsRecord& r) {
                             std::cerr << "  " << v << " seed " << seed << " top1 " << r.top1 << '\n';
                           });
}

Outcome cfc_vs_cmc() {
  std::string why;
  const auto in = cifar_inputs(why);
  if (!in) return {Status::blocked, why};
  const auto rows = desk_sweep(*in, {mca_e(), parse_attention("mca-e-cfc")});
  const double cmc = rows[0].top1_mean, cfc = rows[1].top1_mean;
  return verdict(cmc >= cfc - kCfcSlack, "cmc " + fmt(cmc) + " +- " + fmt(rows[0].top1_std, 3) + ", cfc " +
                                             fmt(cfc) + " +- " + fmt(rows[1].top1_std, 3));
}

Outcome overfit() {
  const auto data = make_moment_dataset(kOverfitSamples, 4, 3, 8, 1);
  TrainConfig cfg;
  cfg.epochs = static_cast<int>(kOverfitSteps);
  cfg.batch_size = kOverfitSamples;
  cfg.lr_steps = {};
  cfg.flip_prob = 0.0;
  cfg.seed = 1;
  bool ok = true;
  std::ostringstream detail;
  for (const char* name : {"none", "se", "eca", "mca-e", "mca-s", "mca-triple", "mca-mono1", "mca-mono2",
                           "mca-mono3", "mca-dual23", "mca-e-cfc", "mca-s-cfc", "mca-triple-cfc"}) {
    ModelSpec spec;
    spec.norm = NormKind::batch;
    spec.classes = 4;
    spec.attention = parse_attention(name);
    Model<float> model(spec, cfg.seed);
    std::size_t reached = 0;
    double best = 0.0;
    try {
      const auto r = train(model, data, cfg);
      for (std::size_t i = 0; i < r.history.size(); ++i) {
        best = std::max(best, r.history[i].top1);
        if (!reached && r.history[i].top1 >= kOverfitTop1) reached = i + 1;
      }
    } catch (const NumericalError& e) {
      ok = false;
      detail << (detail.tellp() > 0 ? "; " : "") << name << " NaN abort (" << e.what() << ")";
      continue;
    }
    ok = ok && reached != 0;
    detail << (detail.tellp() > 0 ? "; " : "") << name << ' '
           << (reached ? "step " + std::to_string(reached) : "best " + fmt(best, 3) + "%");
  }
  return verdict(ok, detail.str());
}

Outcome desk_sweep_gain() {
  std::string why;
  const auto in = cifar_inputs(why);
  if (!in) return {Status::blocked, why};
  const auto rows = desk_sweep(*in, {no_attention(), mca_e(), mca_s()});
  const double base = rows[0].top1_mean, e = rows[1].top1_mean, s = rows[2].top1_mean;
  const bool ok = e >= base - kSweepSlack && s >= base - kSweepSlack && std::max(e, s) >= base + kSweepGain;
  return verdict(ok, "none " + fmt(base) + ", mca-e " + fmt(e) + ", mca-s " + fmt(s));
}

Outcome determinism() {
  const auto data = make_moment_dataset(96, 4, 3, 8, 7);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.lr_steps = {2};
  cfg.seed = 11;
  std::vector<std::vector<std::byte>> runs;
  const auto dir = oracle::temp_dir("acceptance-determinism");
  for (int i = 0; i < 2; ++i) {
    ModelSpec spec;
    spec.norm = NormKind::batch;
    spec.classes = 4;
    spec.attention = mca_e();
    Model<float> model(spec, cfg.seed);
    const auto path = dir / ("run" + std::to_string(i) + ".mcaw");
    save_checkpoint(train(model, data, cfg).checkpoint, path);
    runs.push_back(read_file(path));
  }
  return verdict(runs[0] == runs[1], "two mca-e runs, " + std::to_string(runs[0].size()) + " byte checkpoints " +
                                         (runs[0] == runs[1] ? "identical" : "differ"));
}

template <typename Expected>
bool raises(const std::function<void()>& f) {
  try {
    f();
  } catch (const Expected&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome format_robustness() {
  const auto dir = oracle::temp_dir("acceptance-corrupt");
  std::vector<std::pair<std::string, bool>> cases;

  std::vector<std::uint8_t> px(2 * 4 * 4, 128);
  const auto images = oracle::idx_images(0x803, 2, 4, 4, px);
  const auto labels = oracle::idx_labels(0x801, 2, {3, 4});
  auto idx = [&](const std::string& tag, const std::vector<std::uint8_t>& im, const std::vector<std::uint8_t>& lb) {
    oracle::write_bytes(dir / (tag + "-images"), im);
    oracle::write_bytes(dir / (tag + "-labels"), lb);
    return [=] { load_mnist(dir / (tag + "-images"), dir / (tag + "-labels")); };
  };
  cases.emplace_back("idx bad magic", raises<FormatError>(idx("magic", oracle::idx_images(0x802, 2, 4, 4, px), labels)));
  cases.emplace_back("idx truncated", raises<TruncatedError>(idx(
                                          "trunc", std::vector<std::uint8_t>(images.begin(), images.end() - 5), labels)));
  cases.emplace_back("idx count mismatch",
                     raises<DimensionError>(idx("count", images, oracle::idx_labels(0x801, 1, {3}))));

  std::vector<std::uint8_t> record(kCifarRecordBytes, 9);
  record[0] = 2;
  auto cifar = [&](const std::string& tag, const std::vector<std::uint8_t>& bytes) {
    oracle::write_bytes(dir / tag, bytes);
    return [=] { load_cifar10({dir / tag}); };
  };
  // One whole record followed by a partial one.
  std::vector<std::uint8_t> two(2 * kCifarRecordBytes - 100, 9);
  two[0] = two[kCifarRecordBytes] = 2;
  cases.emplace_back("cifar misaligned", raises<AlignmentError>(cifar("misaligned.bin", two)));
  cases.emplace_back("cifar empty", raises<TruncatedError>(cifar("empty.bin", {})));
  auto bad_label = record;
  bad_label[0] = 200;
  cases.emplace_back("cifar label", raises<FormatError>(cifar("label.bin", bad_label)));

  ModelSpec spec;
  spec.attention = mca_s();
  const auto bytes = encode_checkpoint(Model<float>(spec, 1).to_checkpoint(0));
  auto magic = bytes;
  magic[1] = std::byte{'Z'};
  cases.emplace_back("checkpoint bad magic", raises<FormatError>([&] { decode_checkpoint(magic); }));
  auto version = bytes;
  version[4] = std::byte{2};
  cases.emplace_back("checkpoint version", raises<VersionError>([&] { decode_checkpoint(version); }));
  bool all_cuts = true;
  for (std::size_t cut = 0; cut < bytes.size(); cut += 997) {
    all_cuts = all_cuts && raises<TruncatedError>(
                               [&] { decode_checkpoint(std::vector<std::byte>(bytes.begin(), bytes.begin() + cut)); });
  }
  cases.emplace_back("checkpoint truncated", all_cuts);

  std::size_t typed = 0;
  std::string missed;
  for (const auto& [name, ok] : cases) {
    typed += ok;
    if (!ok) missed += " " + name;
  }
  return verdict(typed == cases.size(), std::to_string(typed) + "/" + std::to_string(cases.size()) +
                                            " corrupt fixtures raised their typed error" +
                                            (missed.empty() ? "" : "; missed:" + missed));
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "gradient correctness", gradients},
      {2, "moment oracle equivalence", moment_oracle},
      {3, "moment norm bound", bound},
      {4, "eca subsumption", eca_subsumption},
      {5, "parameter accounting", param_accounting},
      {6, "cmc vs cfc fusion", cfc_vs_cmc},
      {7, "trainability", overfit},
      {8, "desk-scale variant sweep", desk_sweep_gain},
      {9, "determinism", determinism},
      {10, "format robustness", format_robustness},
  };
  return all;
}

const char* label(Status s) {
  switch (s) {
    case Status::pass: return "PASS";
    case Status::fail: return "FAIL";
    default: return "BLOCKED";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria", "mca_acceptance"};
  std::vector<int> selected;
  app.add_option("--criterion", selected, "Criterion number (repeatable); default all")
      ->check(CLI::Range(1, static_cast<int>(criteria().size())));
  CLI11_PARSE(app, argc, argv);

  bool failed = false, blocked = false;
  for (const auto& c : criteria()) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << std::setw(2) << c.id << ' ' << std::setw(7) << std::left << label(o.status)
              << std::right << ' ' << c.name << " [" << fmt(secs, 3) << " s]: " << o.detail << std::endl;
    failed = failed || o.status == Status::fail;
    blocked = blocked || o.status == Status::blocked;
  }
  if (failed) return 1;
  return blocked ? 77 : 0;
}
