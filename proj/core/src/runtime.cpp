// SPDX-License-Identifier: Apache-2.0
#include "amd/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <stdexcept>
#include <thread>
#include <vector>

namespace amd {

std::size_t thread_count() {
  static const std::size_t count = [] {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("AMD_THREADS")) {
      char* end = nullptr;
      const long parsed = std::strtol(env, &end, 10);
      if (end != env && parsed > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(parsed));
    }
    return n;
  }();
  return count;
}

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  // Deterministic split: first `rem` chunks get one extra element.
  const std::size_t base = n / workers;
  const std::size_t rem = n % workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t begin = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t len = base + (w < rem ? 1 : 0);
    const std::size_t end = begin + len;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
    begin = end;
  }
  for (auto& t : pool) t.join();
}

double Rng::uniform() {
  // Top 53 bits -> [0, 1) with full double precision.
  return std::ldexp(static_cast<double>(gen_() >> 11), -53);
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on two fresh uniforms; u1 shifted away from zero.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = std::ldexp(1.0, -53);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t span = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t x = gen_();
  while (x >= limit) x = gen_();
  return static_cast<std::size_t>(x % span);
}

Rng Rng::fork(std::uint64_t stream_id) const {
  Rng copy = *this;
  // SplitMix64 finalizer mixes the stream id into a fresh seed.
  std::uint64_t z = copy.gen_() + 0x9e3779b97f4a7c15ull + stream_id;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z = z ^ (z >> 31);
  return Rng(z);
}

}  // namespace amd
