#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "egdarts/tensor.hpp"

namespace egdarts {

enum class CifarVariant { c10, c100 };

/// Undecoded image records: pixel bytes exactly as stored on disk (per image:
/// 3 planes of height*width, row-major), so files round-trip bit-exactly.
struct RawDataset {
  int n = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;    // n * channels * height * width
  std::vector<int> labels;        // fine labels
  std::vector<int> coarse;        // c100 only; empty otherwise
  int num_classes = 0;
};

/// Normalized dataset: pixels scaled to [0,1] then per-channel standardized.
struct Dataset {
  std::string name;
  int channels = 3;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> images;  // n * channels * height * width
  std::vector<int> labels;
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t image_elems() const {
    return static_cast<int64_t>(channels) * height * width;
  }
};

/// Reads one CIFAR binary file (c10: 1 label byte + 3072 pixel bytes per
/// record; c100: coarse + fine label bytes + 3072).
RawDataset load_cifar_raw(const std::string& path, CifarVariant variant);

/// Re-encodes records to the on-disk layout (inverse of load_cifar_raw).
std::vector<uint8_t> encode_cifar_records(const RawDataset& raw, CifarVariant variant);

/// Standardizes a raw dataset. Without explicit statistics the widely used
/// CIFAR channel means/stds are applied for CIFAR data and computed from the
/// pixels otherwise.
Dataset normalize_raw(const RawDataset& raw, const std::string& name,
                      std::optional<std::array<double, 3>> mean = std::nullopt,
                      std::optional<std::array<double, 3>> stddev = std::nullopt);

/// Loads a file, or a directory holding the official train set layout
/// (c10: data_batch_1..5.bin, c100: train.bin).
Dataset load_cifar(const std::string& path, CifarVariant variant);

/// Deterministic class-balanced dataset of colored oriented gratings with
/// seeded noise; quantized to bytes so it exports to the CIFAR record layout.
RawDataset synth_raw(uint64_t seed, int n, int classes, int size);
Dataset synth_dataset(uint64_t seed, int n, int classes, int size);

struct SplitSpec {
  double weight_fraction = 0.5;
  uint64_t seed = 0;
};

/// Stratified disjoint split into (weight-training, alpha-validation) index
/// sets. Membership depends only on image content, the seed, and the
/// fraction, never on input order.
std::pair<std::vector<int>, std::vector<int>> split_indices(const Dataset& ds,
                                                            const SplitSpec& spec);

Dataset subset(const Dataset& ds, const std::vector<int>& indices);

TensorPtr batch_images(const Dataset& ds, const std::vector<int>& indices,
                       bool requires_grad = false);
std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& indices);

/// Training-time augmentation: horizontal flip (p=0.5) and 4-pixel pad-crop
/// with zero padding, applied per image on a batch tensor.
void augment_batch(Tensor& images, std::mt19937_64& rng);

}  // namespace egdarts
