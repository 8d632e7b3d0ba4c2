// SPDX-License-Identifier: Apache-2.0
#include "amd/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "amd/errors.hpp"

namespace amd {

Dataset gen_synth(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.num_classes < 2) throw DomainError("gen_synth: need at least two classes");
  if (cfg.num_samples == 0 || cfg.image_size == 0 || cfg.channels == 0) {
    throw DomainError("gen_synth: sample count, image size, channels must be positive");
  }
  if (cfg.noise_amplitude < 0.0) {
    throw DomainError("gen_synth: noise amplitude must be non-negative");
  }
  const std::size_t img = cfg.image_size;
  const std::size_t pixels = cfg.channels * img * img;
  Dataset ds;
  ds.images = Tensor::zeros({cfg.num_samples, pixels}, false);
  ds.labels.resize(cfg.num_samples);
  ds.image_size = img;
  ds.channels = cfg.channels;
  ds.num_classes = cfg.num_classes;
  ds.provenance = "synth:" + std::to_string(seed);
  Rng rng(seed);
  double* data = ds.images.data();
  for (std::size_t i = 0; i < cfg.num_samples; ++i) {
    const int label = static_cast<int>(i % cfg.num_classes);
    ds.labels[i] = label;
    // One orientation and one spatial frequency per class.
    const double theta =
        std::numbers::pi * static_cast<double>(label) / static_cast<double>(cfg.num_classes);
    const double freq = 2.0 + static_cast<double>(label % 3);
    const double phase =
        cfg.noise_amplitude * rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double cos_t = std::cos(theta);
    const double sin_t = std::sin(theta);
    double* row = data + i * pixels;
    for (std::size_t y = 0; y < img; ++y) {
      for (std::size_t x = 0; x < img; ++x) {
        const double u = static_cast<double>(x) / static_cast<double>(img);
        const double v = static_cast<double>(y) / static_cast<double>(img);
        const double wave =
            std::cos(2.0 * std::numbers::pi * freq * (u * cos_t + v * sin_t) + phase);
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          row[c * img * img + y * img + x] =
              wave + cfg.noise_amplitude * rng.gaussian();
        }
      }
    }
  }
  return ds;
}

namespace {

constexpr std::size_t kCifarRecord = 3073;
constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarSide = 32;
// CIFAR-10 per-channel statistics of the [0, 1]-scaled training set.
constexpr double kCifarMean[3] = {0.4914, 0.4822, 0.4465};
constexpr double kCifarStd[3] = {0.2470, 0.2435, 0.2616};

}  // namespace

Dataset load_cifar10(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto file_len = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  if (file_len == 0 || file_len % kCifarRecord != 0) {
    throw FormatError(path + ": length " + std::to_string(file_len) +
                      " is not a positive multiple of " + std::to_string(kCifarRecord));
  }
  const std::size_t n = static_cast<std::size_t>(file_len / kCifarRecord);
  Dataset ds;
  ds.images = Tensor::zeros({n, kCifarPixels}, false);
  ds.labels.resize(n);
  ds.image_size = kCifarSide;
  ds.channels = 3;
  ds.num_classes = 10;
  ds.provenance = path;
  std::vector<unsigned char> record(kCifarRecord);
  double* out = ds.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!in.read(reinterpret_cast<char*>(record.data()), kCifarRecord)) {
      throw IoError(path + ": short read at record " + std::to_string(i));
    }
    if (record[0] > 9) {
      throw FormatError(path + ": label byte " + std::to_string(record[0]) +
                        " at record " + std::to_string(i));
    }
    ds.labels[i] = record[0];
    double* row = out + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const std::size_t channel = p / 1024;
      const double scaled = static_cast<double>(record[1 + p]) / 255.0;
      row[p] = (scaled - kCifarMean[channel]) / kCifarStd[channel];
    }
  }
  return ds;
}

TrainTest load_cifar10_dir(const std::string& dir) {
  TrainTest result;
  bool first = true;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = load_cifar10(dir + "/data_batch_" + std::to_string(b) + ".bin");
    if (first) {
      result.train = std::move(part);
      first = false;
      continue;
    }
    // Append rows onto the accumulated training tensor.
    const std::size_t prev = result.train.size();
    const std::size_t cols = result.train.images.cols();
    Tensor merged = Tensor::zeros({prev + part.size(), cols}, false);
    std::copy(result.train.images.data(), result.train.images.data() + prev * cols,
              merged.data());
    std::copy(part.images.data(), part.images.data() + part.size() * cols,
              merged.data() + prev * cols);
    result.train.images = merged;
    result.train.labels.insert(result.train.labels.end(), part.labels.begin(),
                               part.labels.end());
  }
  result.train.provenance = dir;
  result.test = load_cifar10(dir + "/test_batch.bin");
  return result;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.index(i)]);
  }
  return idx;
}

namespace {

Dataset gather(const Dataset& src, const std::vector<std::size_t>& idx, std::size_t begin,
               std::size_t count) {
  Dataset out;
  const std::size_t cols = src.images.cols();
  out.images = Tensor::zeros({count, cols}, false);
  out.labels.resize(count);
  out.image_size = src.image_size;
  out.channels = src.channels;
  out.num_classes = src.num_classes;
  out.provenance = src.provenance;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = idx[begin + i];
    std::copy(src.images.data() + s * cols, src.images.data() + (s + 1) * cols,
              out.images.data() + i * cols);
    out.labels[i] = src.labels[s];
  }
  return out;
}

}  // namespace

Split split_dataset(const Dataset& data, double val_fraction, Rng& rng) {
  if (data.size() < 2) throw DataError("split: need at least two samples");
  if (!(val_fraction > 0.0) || !(val_fraction < 1.0)) {
    throw DomainError("split: val fraction must lie in (0, 1)");
  }
  std::size_t val_count = static_cast<std::size_t>(
      static_cast<double>(data.size()) * val_fraction);
  val_count = std::max<std::size_t>(1, std::min(val_count, data.size() - 1));
  const std::vector<std::size_t> idx = shuffled_indices(data.size(), rng);
  Split split;
  split.train = gather(data, idx, 0, data.size() - val_count);
  split.val = gather(data, idx, data.size() - val_count, val_count);
  return split;
}

Batch take_batch(const Dataset& data, const std::vector<std::size_t>& order,
                 std::size_t begin, std::size_t count) {
  if (begin + count > order.size()) {
    throw ContractError("take_batch: range exceeds the sample order");
  }
  Batch batch;
  const std::size_t cols = data.images.cols();
  batch.images = Tensor::zeros({count, cols}, false);
  batch.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = order[begin + i];
    std::copy(data.images.data() + s * cols, data.images.data() + (s + 1) * cols,
              batch.images.data() + i * cols);
    batch.labels[i] = data.labels[s];
  }
  return batch;
}

}  // namespace amd
