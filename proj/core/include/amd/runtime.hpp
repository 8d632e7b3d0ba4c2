// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>

namespace amd {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency, capped by the AMD_THREADS environment variable when set.
std::size_t thread_count();

// Splits [0, n) into contiguous chunks and runs `body(begin, end)` on each,
// possibly concurrently. Chunk boundaries depend only on n and the thread
// count, and each chunk must write to disjoint locations, so results are
// bitwise identical for any thread count.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& body);

// Deterministic RNG: a fixed 64-bit generator plus fixed mappings to doubles,
// so streams reproduce across platforms for the same seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Uniform on [lo, hi).
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller (pairs cached).
  double gaussian();

  double gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
  }

  // Uniform integer on [0, n).
  std::size_t index(std::size_t n);

  // Derives an independent stream for a labeled subcomponent.
  Rng fork(std::uint64_t stream_id) const;

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace amd
