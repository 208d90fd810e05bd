#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "prunekit/model_spec.hpp"
#include "prunekit/tensor.hpp"

namespace prunekit {

/// Images (N,C,H,W) with values in [0,1] and integer labels.
struct Split {
  Tensor images;
  std::vector<int> labels;

  int size() const noexcept { return static_cast<int>(labels.size()); }
};

enum class Provenance : std::uint8_t { kSynthetic = 0, kIdx = 1 };

struct DatasetBundle {
  Split train;
  Split test;
  int classes = 0;
  /// Per-channel statistics of the training split, applied when batching.
  std::vector<float> mean;
  std::vector<float> stddev;
  Provenance provenance = Provenance::kSynthetic;

  FeatureShape image_shape() const;
};

struct SyntheticOptions {
  int classes = 4;
  int per_class = 500;
  int image_size = 16;
  std::uint64_t seed = 7;
  double test_fraction = 0.2;
  double noise = 0.3;
};

/// Deterministic shape/texture classification set. Each class is a pattern
/// family (stripes at several orientations, checkerboards, blobs, rings,
/// crosses) with random frequency, phase, contrast, and additive noise.
DatasetBundle generate_synthetic(const SyntheticOptions& options);

/// Binary dataset file, little-endian:
///   "PKDS" u32 version=1 u32 classes u32 C u32 H u32 W u32 n_train u32 n_test
///   u8 provenance f32[C] mean f32[C] stddev
///   i32[n_train] labels f32[n_train*C*H*W] images
///   i32[n_test] labels f32[n_test*C*H*W] images
void save_dataset(const DatasetBundle& data, const std::filesystem::path& path);
DatasetBundle load_dataset(const std::filesystem::path& path);

/// Reads IDX (MNIST-style) ubyte image/label files; pixel bytes scale to [0,1].
DatasetBundle load_idx(const std::filesystem::path& train_images, const std::filesystem::path& train_labels,
                       const std::filesystem::path& test_images, const std::filesystem::path& test_labels);

void compute_normalization(DatasetBundle& data);

/// Gathers `indices` from `split` and normalizes with the bundle statistics.
Tensor make_batch(const DatasetBundle& data, const Split& split, std::span<const int> indices);
std::vector<int> gather_labels(const Split& split, std::span<const int> indices);

/// Keeps the first `per_class` training examples of every class.
Split per_class_subset(const Split& split, int classes, int per_class);

}  // namespace prunekit
