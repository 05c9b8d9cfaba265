#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mca/data.hpp"
#include "mca/model.hpp"
#include "mca/train.hpp"

namespace mca::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kMissingInput = 2, kNumerical = 3 };

/// Flat configuration: one `key = value` per line, `#` starts a comment.
using ConfigMap = std::map<std::string, std::string>;

/// Every key accepted in config files and as a --flag (underscores become dashes).
const std::vector<std::string>& config_keys();

/// Throws ConfigError on malformed lines or unknown keys, NotFoundError when
/// the file cannot be read.
ConfigMap parse_config_text(const std::string& text);
ConfigMap read_config_file(const std::filesystem::path& path);

/// Default backbone for command-line runs: batch statistics on, since the
/// fixed-affine backbone diverges at the default learning rate.
inline ModelSpec training_model() {
  ModelSpec spec;
  spec.norm = NormKind::batch;
  return spec;
}

struct RunConfig {
  TrainConfig train;
  ModelSpec model = training_model();
  std::string dataset = "synthetic";  // synthetic | cifar10 | mnist
  std::filesystem::path data_dir;
  std::size_t train_subset = 10000;   // 0: whole split
  std::size_t test_subset = 0;        // 0: whole split
  std::size_t synthetic_samples = 256;
  std::size_t synthetic_side = 8;
  std::filesystem::path out = ".";
};

/// Later entries in `layers` override earlier ones key by key.
RunConfig build_run_config(const std::vector<ConfigMap>& layers);

/// Training (train = true) or test split for the configured dataset, subset
/// applied. Model input channels and classes follow the dataset.
Dataset load_split(const RunConfig& cfg, bool train);

/// Runs one command; never throws. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mca::cli
