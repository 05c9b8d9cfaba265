#include "mca/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mca/checkpoint.hpp"
#include "mca/errors.hpp"

namespace mca {

namespace {

std::uint32_t be32(const std::vector<std::byte>& b, std::size_t pos) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | std::to_integer<std::uint32_t>(b[pos + i]);
  return v;
}

constexpr float kInv255 = 1.0f / 255.0f;

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  gather_batch(*this, indices, out.images, out.labels);
  out.classes = classes;
  out.split = split;
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return subset(idx);
}

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size()) {
    throw FormatError("dataset images and labels disagree on the sample count");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw FormatError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("pixel value outside [0,1]");
  }
}

Dataset decode_mnist(const std::vector<std::byte>& images, const std::vector<std::byte>& labels) {
  if (images.size() < 16) throw TruncatedError("IDX image header truncated");
  if (labels.size() < 8) throw TruncatedError("IDX label header truncated");
  if (be32(images, 0) != 0x00000803u) throw FormatError("IDX image file has wrong magic");
  if (be32(labels, 0) != 0x00000801u) throw FormatError("IDX label file has wrong magic");
  const std::size_t n = be32(images, 4), rows = be32(images, 8), cols = be32(images, 12);
  const std::size_t n_labels = be32(labels, 4);
  if (n != n_labels) {
    throw DimensionError("IDX image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  }
  if (rows == 0 || cols == 0) throw DimensionError("IDX images have zero extent");
  const std::size_t pixels = rows * cols;
  if (images.size() - 16 < n * pixels) throw TruncatedError("IDX image data truncated");
  if (labels.size() - 8 < n) throw TruncatedError("IDX label data truncated");
  if (images.size() - 16 != n * pixels || labels.size() - 8 != n) {
    throw DimensionError("IDX file longer than its header declares");
  }
  Dataset d;
  d.classes = 10;
  d.split = "mnist";
  std::vector<float> px(n * pixels);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(std::to_integer<unsigned>(images[16 + i])) * kInv255;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = std::to_integer<int>(labels[8 + i]);
    if (l > 9) throw FormatError("IDX label " + std::to_string(l) + " at index " + std::to_string(i) + " is not a digit");
    d.labels[i] = l;
  }
  d.images = Tensor(Shape{n, 1, rows, cols}, std::move(px));
  return d;
}

Dataset load_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  return decode_mnist(read_file(images_path), read_file(labels_path));
}

Dataset decode_cifar10(const std::vector<std::byte>& bytes) {
  if (bytes.empty()) throw TruncatedError("CIFAR-10 file is empty");
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw AlignmentError("CIFAR-10 file length " + std::to_string(bytes.size()) + " is not a multiple of " +
                         std::to_string(kCifarRecordBytes));
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset d;
  d.classes = 10;
  d.split = "cifar10";
  d.labels.resize(n);
  std::vector<float> px(n * 3072);
  for (std::size_t r = 0; r < n; ++r) {
    const std::byte* rec = bytes.data() + r * kCifarRecordBytes;
    const int l = std::to_integer<int>(rec[0]);
    if (l > 9) throw FormatError("CIFAR-10 record " + std::to_string(r) + " has label " + std::to_string(l));
    d.labels[r] = l;
    for (std::size_t i = 0; i < 3072; ++i) px[r * 3072 + i] = static_cast<float>(std::to_integer<unsigned>(rec[1 + i])) * kInv255;
  }
  d.images = Tensor(Shape{n, 3, 32, 32}, std::move(px));
  return d;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ConfigError("no CIFAR-10 files given");
  std::vector<std::byte> all;
  for (const auto& p : paths) {
    auto b = read_file(p);
    if (b.size() % kCifarRecordBytes != 0) {
      throw AlignmentError(p.string() + ": length " + std::to_string(b.size()) + " is not a multiple of " +
                           std::to_string(kCifarRecordBytes));
    }
    all.insert(all.end(), b.begin(), b.end());
  }
  return decode_cifar10(all);
}

std::vector<std::filesystem::path> cifar10_files(const std::filesystem::path& root, bool train) {
  std::vector<std::filesystem::path> out;
  if (train) {
    for (int i = 1; i <= 5; ++i) out.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    out.push_back(root / "test_batch.bin");
  }
  for (const auto& p : out) {
    if (!std::filesystem::exists(p)) throw NotFoundError("missing CIFAR-10 file " + p.string());
  }
  return out;
}

std::vector<bool> flip_mask(std::size_t n, double flip_prob, std::uint64_t seed) {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip probability must lie in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<bool> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = u(rng) < flip_prob;
  return mask;
}

Tensor flip_horizontal(const Tensor& batch, const std::vector<bool>& mask) {
  if (batch.rank() != 4 || batch.dim(0) != mask.size()) {
    throw ShapeError("flip mask of " + std::to_string(mask.size()) + " entries for batch " + to_string(batch.shape()));
  }
  const std::size_t per = batch.size() / batch.dim(0);
  const std::size_t w = batch.dim(3);
  std::vector<float> out(batch.values().begin(), batch.values().end());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t row = 0; row < per / w; ++row) {
      auto* p = out.data() + i * per + row * w;
      std::reverse(p, p + w);
    }
  }
  return Tensor(batch.shape(), std::move(out));
}

Tensor augment(const Tensor& batch, double flip_prob, std::uint64_t seed) {
  if (batch.rank() != 4) throw ShapeError("augment expects [N,C,H,W], got " + to_string(batch.shape()));
  return flip_horizontal(batch, flip_mask(batch.dim(0), flip_prob, seed));
}

void SyntheticSpec::validate() const {
  if (!(stddev > 0.0) || !std::isfinite(stddev)) throw ConfigError("synthetic stddev must be positive");
  if (!std::isfinite(mean)) throw ConfigError("synthetic mean must be finite");
  if (distribution == Distribution::skewed && skew_direction != 1 && skew_direction != -1) {
    throw ConfigError("skew direction must be +1 or -1");
  }
  if (distribution == Distribution::mixture && !(mixture_weight >= 0.0 && mixture_weight <= 1.0)) {
    throw ConfigError("mixture weight must lie in [0,1]");
  }
  if (batch == 0 || channels == 0 || height == 0 || width == 0) throw ConfigError("synthetic extents must be positive");
}

TensorD gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(spec.batch * spec.channels * spec.height * spec.width);
  for (auto& v : out) {
    switch (spec.distribution) {
      case Distribution::gaussian:
        v = spec.mean + spec.stddev * normal(rng);
        break;
      case Distribution::skewed:
        v = spec.mean + spec.skew_direction * spec.stddev * (expo(rng) - 1.0);
        break;
      case Distribution::mixture: {
        const double centre = u(rng) < spec.mixture_weight ? spec.mean + spec.mixture_offset : spec.mean - spec.mixture_offset;
        v = centre + spec.stddev * normal(rng);
        break;
      }
    }
  }
  return TensorD(Shape{spec.batch, spec.channels, spec.height, spec.width}, std::move(out));
}

Dataset make_moment_dataset(std::size_t n, std::size_t classes, std::size_t channels, std::size_t side,
                            std::uint64_t seed) {
  if (classes < 1 || classes > 4) throw ConfigError("moment dataset supports 1 to 4 classes");
  if (n == 0 || channels == 0 || side == 0) throw ConfigError("moment dataset extents must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  Dataset d;
  d.classes = classes;
  d.split = "synthetic";
  d.labels.resize(n);
  const std::size_t per = channels * side * side;
  std::vector<float> px(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels[i] = label;
    for (std::size_t j = 0; j < per; ++j) {
      double v = 0.0;
      switch (label) {
        case 0: v = 0.5 + 0.05 * normal(rng); break;
        case 1: v = 0.5 + 0.25 * normal(rng); break;
        case 2: v = 0.5 + 0.15 * (expo(rng) - 1.0); break;
        default: v = 0.5 - 0.15 * (expo(rng) - 1.0); break;
      }
      px[i * per + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  d.images = Tensor(Shape{n, channels, side, side}, std::move(px));
  return d;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

void gather_batch(const Dataset& data, std::span<const std::size_t> indices, Tensor& images,
                  std::vector<int>& labels) {
  const auto& shape = data.images.shape();
  const std::size_t per = data.images.size() / shape[0];
  std::vector<float> px(indices.size() * per);
  labels.resize(indices.size());
  auto src = data.images.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    if (k >= data.size()) throw ShapeError("sample index " + std::to_string(k) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(k * per), per, px.begin() + static_cast<std::ptrdiff_t>(i * per));
    labels[i] = data.labels[k];
  }
  images = Tensor(Shape{indices.size(), shape[1], shape[2], shape[3]}, std::move(px));
}

}  // namespace mca
