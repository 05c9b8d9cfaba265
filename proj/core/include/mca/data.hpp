#pragma once

// Dataset ingestion (MNIST IDX, CIFAR-10 binary), horizontal-flip
// augmentation, and seeded synthetic activations for moment experiments.
// Pixels are scaled to [0,1]; no mean/std standardization.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mca/tensor.hpp"

namespace mca {

struct Dataset {
  Tensor images;            // [N,C,H,W], values in [0,1]
  std::vector<int> labels;  // [N], each in [0, classes)
  std::size_t classes = 10;
  std::string split;

  std::size_t size() const { return labels.size(); }
  /// Samples at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// The first `n` samples (all of them when n exceeds the size).
  Dataset head(std::size_t n) const;
  /// Throws FormatError if labels or pixels leave their ranges.
  void validate() const;
};

/// IDX pair: images magic 0x00000803, labels magic 0x00000801, big-endian header.
Dataset load_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
Dataset decode_mnist(const std::vector<std::byte>& images, const std::vector<std::byte>& labels);

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Concatenates CIFAR-10 binary batch files of 3073-byte records.
Dataset load_cifar10(const std::vector<std::filesystem::path>& paths);
Dataset decode_cifar10(const std::vector<std::byte>& bytes);

/// data_batch_1..5.bin (train) or test_batch.bin (test) under `root`.
std::vector<std::filesystem::path> cifar10_files(const std::filesystem::path& root, bool train);

/// Per-image flip decisions for one batch; reproducible from `seed`.
std::vector<bool> flip_mask(std::size_t n, double flip_prob, std::uint64_t seed);

/// Mirrors each image about its vertical axis where mask is true.
Tensor flip_horizontal(const Tensor& batch, const std::vector<bool>& mask);

/// flip_horizontal with a fresh mask drawn from `seed`.
Tensor augment(const Tensor& batch, double flip_prob, std::uint64_t seed);

enum class Distribution { gaussian, skewed, mixture };

struct SyntheticSpec {
  Distribution distribution = Distribution::gaussian;
  double mean = 0.0;
  double stddev = 1.0;
  int skew_direction = 1;        // skewed only: sign of the third central moment
  double mixture_offset = 2.0;   // mixture only: components at mean -/+ offset
  double mixture_weight = 0.5;   // mixture only: probability of the upper component
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t height = 100;
  std::size_t width = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Tensor[batch, channels, height, width] of independent draws. Skewed draws
/// are a shifted exponential with the requested mean and stddev, mirrored
/// for negative direction.
TensorD gen_synthetic(const SyntheticSpec& spec);

/// Images whose classes share a mean near 0.5 but differ in spread and
/// skew, clamped to [0,1]. Separable only through higher-order statistics
/// and spatial texture.
Dataset make_moment_dataset(std::size_t n, std::size_t classes, std::size_t channels, std::size_t side,
                            std::uint64_t seed);

/// Random permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed);

/// Copies images and labels at `indices` into a contiguous batch.
void gather_batch(const Dataset& data, std::span<const std::size_t> indices, Tensor& images,
                  std::vector<int>& labels);

}  // namespace mca
