#include "mca/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mca/checkpoint.hpp"
#include "mca/errors.hpp"
#include "mca/gradcheck.hpp"
#include "mca/moments.hpp"
#include "mca/seeds.hpp"

namespace mca::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("invalid value '" + text + "' for " + key);
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

std::vector<StageSpec> parse_stages(const std::string& text) {
  // blocks:channels:stride, comma separated
  std::vector<StageSpec> out;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, ':');
    if (parts.size() != 3) throw ConfigError("stage '" + item + "' is not blocks:channels:stride");
    out.push_back({parse_number<std::size_t>("stages", parts[0]), parse_number<std::size_t>("stages", parts[1]),
                   parse_number<std::size_t>("stages", parts[2])});
  }
  return out;
}

std::filesystem::path require_file(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw NotFoundError("missing input file " + p.string());
  return p;
}

Model<float> build_model(const RunConfig& cfg) { return Model<float>(cfg.model, cfg.train.seed); }

void adapt_model_to(RunConfig& cfg, const Dataset& d) {
  cfg.model.in_channels = d.images.dim(1);
  cfg.model.classes = d.classes;
  cfg.model.validate();
}

struct Layers {
  std::string config_path;
  std::map<std::string, std::string> flags;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "Flat key = value configuration file");
    for (const auto& key : config_keys()) {
      if (key == "decay_attention") continue;
      app->add_option(flag_name(key), flags[key], "Overrides '" + key + "'");
    }
    app->add_option("--decay-attention", flags["decay_attention"], "Apply weight decay to attention parameters");
  }

  RunConfig resolve(CLI::App* app) const {
    std::vector<ConfigMap> layers;
    if (!config_path.empty()) layers.push_back(read_config_file(config_path));
    ConfigMap given;
    for (const auto& [key, value] : flags) {
      if (app->count(flag_name(key)) > 0) given[key] = value;
    }
    layers.push_back(std::move(given));
    return build_run_config(layers);
  }
};

void print_record(std::ostream& out, const MetricsRecord& r) {
  out << "epoch " << r.epoch << " lr " << r.lr << " loss " << std::setprecision(6) << r.loss << " top1 " << r.top1
      << " top5 " << r.top5 << " wall_ms " << std::setprecision(1) << std::fixed << r.wall_ms << std::defaultfloat
      << '\n';
}

int cmd_train(const RunConfig& base, std::ostream& out) {
  RunConfig cfg = base;
  const auto data = load_split(cfg, true);
  adapt_model_to(cfg, data);
  auto model = build_model(cfg);
  out << "model " << to_string(cfg.model.arch) << " attention " << cfg.model.attention.name() << " params "
      << model.parameter_count() << " attention_params " << model.attention_parameter_count() << '\n';
  const auto result = train(model, data, cfg.train, nullptr, [&out](const MetricsRecord& r) { print_record(out, r); });
  std::filesystem::create_directories(cfg.out);
  save_checkpoint(result.checkpoint, cfg.out / "checkpoint.mcaw");
  std::ofstream csv(cfg.out / "metrics.csv");
  if (!csv) throw IoError("cannot write " + (cfg.out / "metrics.csv").string());
  write_metrics_csv(csv, result.history);
  out << "wrote " << (cfg.out / "checkpoint.mcaw").string() << " and " << (cfg.out / "metrics.csv").string() << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& base, const std::string& checkpoint, std::ostream& out) {
  RunConfig cfg = base;
  const auto ckpt = load_checkpoint(require_file(checkpoint));
  const auto data = load_split(cfg, false);
  adapt_model_to(cfg, data);
  auto model = build_model(cfg);
  model.load_checkpoint(ckpt);
  const auto r = evaluate(model, data);
  out << "samples " << data.size() << " loss " << r.loss << " top1 " << r.top1 << " top5 " << r.top5 << '\n';
  return kOk;
}

int cmd_sweep(const RunConfig& base, const std::string& variants, const std::string& seeds, std::ostream& out) {
  RunConfig cfg = base;
  const auto train_set = load_split(cfg, true);
  const auto test = load_split(cfg, false);
  adapt_model_to(cfg, train_set);
  std::vector<SweepVariant> list;
  for (const auto& name : split(variants, ',')) list.push_back({cfg.model, parse_attention(name)});
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split(seeds, ',')) seed_list.push_back(parse_number<std::uint64_t>("seeds", s));
  const auto rows = run_variant_sweep(list, train_set, test, cfg.train, seed_list,
                                      [&out](const std::string& v, std::uint64_t seed, const MetricsRecord& r) {
                                        out << v << " seed " << seed << " top1 " << r.top1 << " top5 " << r.top5
                                            << '\n';
                                      });
  std::filesystem::create_directories(cfg.out);
  std::ofstream csv(cfg.out / "sweep.csv");
  if (!csv) throw IoError("cannot write " + (cfg.out / "sweep.csv").string());
  write_sweep_csv(csv, rows);
  write_sweep_csv(out, rows);
  return kOk;
}

int cmd_gradcheck(const std::string& op, int trials, std::uint64_t seed, std::ostream& out) {
  const auto ops = resolve_gradcheck_ops(op);
  bool ok = true;
  out << std::left << std::setw(10) << "op" << std::setw(8) << "trials" << std::setw(16) << "max_rel_error"
      << std::setw(12) << "threshold" << "status\n";
  for (const auto& name : ops) {
    const auto r = run_gradcheck(name, trials, seed);
    ok = ok && r.passed();
    out << std::setw(10) << r.op << std::setw(8) << r.trials << std::setw(16) << std::scientific
        << std::setprecision(3) << r.max_rel_error << std::setw(12) << r.threshold << std::defaultfloat
        << (r.passed() ? "PASS" : "FAIL") << '\n';
  }
  return ok ? kOk : kNumerical;
}

int cmd_bench_params(const std::string& arch, const std::string& attn, std::optional<int> kernel, std::ostream& out) {
  const auto cfg = parse_attention(attn, kernel);
  std::vector<StageCount> stages;
  std::optional<std::size_t> backbone;
  if (arch == "resnet50-spec") {
    stages = resnet50_stages();
  } else if (arch == "mini" || arch == "mini-resnet" || arch == "mini-cnn") {
    ModelSpec spec;
    spec.arch = parse_arch(arch == "mini-cnn" ? arch : "mini-resnet");
    spec.attention = cfg;
    stages = spec.stage_counts();
    backbone = closed_form_param_count(spec);
  } else {
    throw ConfigError("unknown arch '" + arch + "' (expected mini, mini-cnn or resnet50-spec)");
  }
  const auto r = count_params(stages, cfg);
  out << "arch " << arch << "\nvariant " << r.variant << "\ncounted " << r.counted << "\nclosed_form "
      << r.closed_form << "\ndelta " << r.delta() << '\n';
  if (r.affine_term != 0) out << "affine_term " << r.affine_term << '\n';
  if (backbone) out << "model_params " << *backbone << '\n';
  return kOk;
}

std::vector<std::vector<double>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(require_file(path));
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<double> row;
    for (const auto& cell : split(line, ',')) row.push_back(parse_number<double>("line " + std::to_string(line_no), cell));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ConfigError("ragged CSV: line " + std::to_string(line_no) + " has " + std::to_string(row.size()) +
                        " columns, expected " + std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("CSV " + path.string() + " has no samples");
  return rows;
}

int cmd_moments(const std::string& input, bool check, std::optional<int> k, double lo, double hi, std::ostream& out) {
  const auto rows = read_csv(input);
  const std::size_t dims = rows.front().size();
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  out << std::setprecision(10);
  for (std::size_t c = 0; c < dims; ++c) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(r[c]);
    const auto m = sample_moments(col);
    out << "column " << c << " M1 " << m.mean << " M2 " << m.m2 << " M3 " << m.m3 << '\n';
  }
  if (!check) return kOk;
  if (k && (*k < 1 || *k > 3)) throw ConfigError("--k must be 1, 2 or 3");
  std::vector<int> orders = k ? std::vector<int>{*k} : std::vector<int>{1, 2, 3};
  bool all = true;
  for (int order : orders) {
    const auto b = check_bound(flat, dims, lo, hi, order);
    all = all && b.holds;
    out << "k " << order << " norm " << b.moment_norm << " bound " << b.bound << " margin " << b.margin << ' '
        << (b.holds ? "holds" : "VIOLATED") << '\n';
  }
  return all ? kOk : kNumerical;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "lr",          "momentum",     "weight_decay",      "epochs",         "batch_size", "lr_steps",
      "lr_decay",    "seed",         "flip_prob",         "decay_attention", "max_steps", "attn",
      "kernel",      "arch",         "norm",              "stem_channels",  "stages",     "dataset",
      "data_dir",    "train_subset", "test_subset",       "synthetic_samples", "synthetic_side", "out"};
  return keys;
}

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap map;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  const auto& keys = config_keys();
  while (std::getline(ss, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(std::string_view(line).substr(0, eq));
    const auto value = trim(std::string_view(line).substr(eq + 1));
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    map[key] = value;
  }
  return map;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig build_run_config(const std::vector<ConfigMap>& layers) {
  ConfigMap merged;
  const auto& keys = config_keys();
  for (const auto& layer : layers) {
    for (const auto& [key, value] : layer) {
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown key '" + key + "'");
      merged[key] = value;
    }
  }
  RunConfig rc;
  auto& t = rc.train;
  auto get = [&merged](const char* key) -> const std::string* {
    const auto it = merged.find(key);
    return it == merged.end() ? nullptr : &it->second;
  };
  if (auto v = get("lr")) t.lr = parse_number<double>("lr", *v);
  if (auto v = get("momentum")) t.momentum = parse_number<double>("momentum", *v);
  if (auto v = get("weight_decay")) t.weight_decay = parse_number<double>("weight_decay", *v);
  if (auto v = get("epochs")) t.epochs = parse_number<int>("epochs", *v);
  if (auto v = get("batch_size")) t.batch_size = parse_number<std::size_t>("batch_size", *v);
  if (auto v = get("lr_steps")) {
    t.lr_steps.clear();
    if (!v->empty()) {
      for (const auto& s : split(*v, ',')) t.lr_steps.push_back(parse_number<int>("lr_steps", s));
    }
  }
  if (auto v = get("lr_decay")) t.lr_decay = parse_number<double>("lr_decay", *v);
  if (auto v = get("seed")) t.seed = parse_number<std::uint64_t>("seed", *v);
  if (auto v = get("flip_prob")) t.flip_prob = parse_number<double>("flip_prob", *v);
  if (auto v = get("decay_attention")) t.decay_attention = parse_bool("decay_attention", *v);
  if (auto v = get("max_steps")) t.max_steps = parse_number<std::size_t>("max_steps", *v);
  t.validate();

  std::optional<int> kernel;
  if (auto v = get("kernel")) kernel = parse_number<int>("kernel", *v);
  rc.model.attention = parse_attention(get("attn") ? *get("attn") : "none", kernel);
  if (auto v = get("arch")) rc.model.arch = parse_arch(*v);
  if (auto v = get("norm")) rc.model.norm = parse_norm(*v);
  if (auto v = get("stem_channels")) rc.model.stem_channels = parse_number<std::size_t>("stem_channels", *v);
  if (auto v = get("stages")) rc.model.stages = parse_stages(*v);
  rc.model.validate();

  if (auto v = get("dataset")) rc.dataset = *v;
  if (rc.dataset != "synthetic" && rc.dataset != "cifar10" && rc.dataset != "mnist") {
    throw ConfigError("unknown dataset '" + rc.dataset + "' (expected synthetic, cifar10 or mnist)");
  }
  if (auto v = get("data_dir")) rc.data_dir = *v;
  if (auto v = get("train_subset")) rc.train_subset = parse_number<std::size_t>("train_subset", *v);
  if (auto v = get("test_subset")) rc.test_subset = parse_number<std::size_t>("test_subset", *v);
  if (auto v = get("synthetic_samples")) rc.synthetic_samples = parse_number<std::size_t>("synthetic_samples", *v);
  if (auto v = get("synthetic_side")) rc.synthetic_side = parse_number<std::size_t>("synthetic_side", *v);
  if (rc.synthetic_samples == 0 || rc.synthetic_side == 0) throw ConfigError("synthetic extents must be positive");
  if (auto v = get("out")) rc.out = *v;
  return rc;
}

Dataset load_split(const RunConfig& cfg, bool train) {
  Dataset d;
  if (cfg.dataset == "synthetic") {
    d = make_moment_dataset(cfg.synthetic_samples, 4, 3, cfg.synthetic_side,
                            derive_seed(cfg.train.seed, kSyntheticDataSeedOffset, train ? 0 : 1));
  } else {
    if (cfg.data_dir.empty()) throw NotFoundError("dataset " + cfg.dataset + " needs data_dir");
    if (!std::filesystem::is_directory(cfg.data_dir)) throw NotFoundError("missing data directory " + cfg.data_dir.string());
    if (cfg.dataset == "cifar10") {
      d = load_cifar10(cifar10_files(cfg.data_dir, train));
    } else {
      const std::string prefix = train ? "train" : "t10k";
      d = load_mnist(require_file(cfg.data_dir / (prefix + "-images-idx3-ubyte")),
                     require_file(cfg.data_dir / (prefix + "-labels-idx1-ubyte")));
    }
  }
  d.split = cfg.dataset + (train ? "/train" : "/test");
  const std::size_t n = train ? cfg.train_subset : cfg.test_subset;
  if (n != 0 && n < d.size()) d = d.head(n);
  return d;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Moment channel attention: training, evaluation and diagnostics", "mca"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint.mcaw and metrics.csv");
  Layers train_layers;
  train_layers.add_to(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  Layers eval_layers;
  eval_layers.add_to(eval_cmd);
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Train and compare attention variants over several seeds");
  Layers sweep_layers;
  sweep_layers.add_to(sweep_cmd);
  std::string variants = "none,mca-e,mca-s,mca-triple";
  std::string seeds = "1,2,3";
  sweep_cmd->add_option("--variants", variants, "Comma-separated attention variants");
  sweep_cmd->add_option("--seeds", seeds, "Comma-separated seeds");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  std::string op = "all";
  int trials = 20;
  std::uint64_t grad_seed = 0;
  grad_cmd->add_option("--op", op, "Op name, mca-block or all");
  grad_cmd->add_option("--trials", trials, "Random trials per op");
  grad_cmd->add_option("--seed", grad_seed, "Trial seed");

  auto* bench_cmd = app.add_subcommand("bench-params", "Count attention parameters against the closed forms");
  std::string arch = "resnet50-spec";
  std::string attn = "mca-e";
  std::optional<int> bench_kernel;
  bench_cmd->add_option("--arch", arch, "mini, mini-cnn or resnet50-spec");
  bench_cmd->add_option("--attn", attn, "Attention variant");
  bench_cmd->add_option("--kernel", bench_kernel, "Channel kernel size override");

  auto* moments_cmd = app.add_subcommand("moments", "Per-column moments of a CSV of samples");
  std::string input;
  bool check = false;
  std::optional<int> k;
  double lo = 0.0, hi = 1.0;
  moments_cmd->add_option("--input", input, "CSV file, one sample per row")->required();
  moments_cmd->add_flag("--check-bound", check, "Check the order-k norm bound");
  moments_cmd->add_option("--k", k, "Single order to check (1..3)");
  moments_cmd->add_option("--lo", lo, "Lower support bound");
  moments_cmd->add_option("--hi", hi, "Upper support bound");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_layers.resolve(train_cmd), out);
    if (eval_cmd->parsed()) return cmd_eval(eval_layers.resolve(eval_cmd), checkpoint, out);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_layers.resolve(sweep_cmd), variants, seeds, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(op, trials, grad_seed, out);
    if (bench_cmd->parsed()) return cmd_bench_params(arch, attn, bench_kernel, out);
    if (moments_cmd->parsed()) return cmd_moments(input, check, k, lo, hi, out);
  } catch (const NotFoundError& e) {
    err << "error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kMissingInput;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace mca::cli
