// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "amd/runtime.hpp"
#include "amd/tensor.hpp"

namespace amd {

// Labeled image collection. Images are stored flattened, one row per sample,
// channel-major ([channels][height][width]), already normalized.
struct Dataset {
  Tensor images;            // [n, channels * size * size]
  std::vector<int> labels;  // each in [0, num_classes)
  std::size_t image_size = 0;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  std::string provenance;   // generator seed or source file

  std::size_t size() const { return labels.size(); }
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

struct SynthConfig {
  std::size_t num_samples = 2048;
  std::size_t num_classes = 10;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  // Scales both the per-sample phase jitter and the additive pixel noise;
  // zero makes every image of a class identical.
  double noise_amplitude = 0.3;
};

// Class-conditioned oriented gratings (per-class orientation and spatial
// frequency) plus seeded noise. Same seed, same bytes.
Dataset gen_synth(std::uint64_t seed, const SynthConfig& cfg);

// One CIFAR-10 binary batch file: records of 3073 bytes, a label byte in
// [0, 9] followed by 3072 pixels (1024 red, 1024 green, 1024 blue, row-major
// 32x32). Pixels are scaled to [0, 1] and normalized per channel with the
// CIFAR-10 channel statistics, mean (0.4914, 0.4822, 0.4465) and standard
// deviation (0.2470, 0.2435, 0.2616).
Dataset load_cifar10(const std::string& path);

// Loads data_batch_1..5.bin as train and test_batch.bin as test from a
// directory holding the binary CIFAR-10 release.
struct TrainTest {
  Dataset train;
  Dataset test;
};
TrainTest load_cifar10_dir(const std::string& dir);

// Deterministic shuffled split; val_fraction of the samples (rounded down,
// at least one of each side) become the second part.
struct Split {
  Dataset train;
  Dataset val;
};
Split split_dataset(const Dataset& data, double val_fraction, Rng& rng);

// Rows `begin .. begin + count` of the given sample order.
Batch take_batch(const Dataset& data, const std::vector<std::size_t>& order,
                 std::size_t begin, std::size_t count);

// Fisher-Yates permutation of [0, n) with the project RNG (stable across
// platforms, unlike std::shuffle).
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace amd
