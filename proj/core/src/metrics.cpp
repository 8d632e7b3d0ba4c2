// SPDX-License-Identifier: Apache-2.0
#include "amd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <tuple>

#include "amd/errors.hpp"

namespace amd {
namespace {

std::string fmt_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Average ranks (1-based): tied values share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double shared = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

int stage_rank(const std::string& stage) {
  static const char* kOrder[] = {"pretrain-teacher", "importance", "grid",   "joint-distill",
                                 "select",           "final-distill", "sweep", "eval"};
  for (int i = 0; i < static_cast<int>(std::size(kOrder)); ++i)
    if (stage == kOrder[i]) return i;
  return static_cast<int>(std::size(kOrder));
}

std::string metrics_csv(std::vector<MetricsRow> rows) {
  auto key = [](const MetricsRow& r) {
    return std::tuple(stage_rank(r.stage), r.stage, r.epoch.value_or(-1),
                      r.candidate_index.has_value() ? static_cast<long long>(*r.candidate_index)
                                                    : -1LL,
                      r.metric);
  };
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const MetricsRow& a, const MetricsRow& b) { return key(a) < key(b); });

  std::string out = "stage,epoch,candidate_scale,metric,value,seed\n";
  for (const MetricsRow& r : rows) {
    out += r.stage;
    out += ',';
    if (r.epoch.has_value()) out += std::to_string(*r.epoch);
    out += ',';
    if (r.candidate_scale.has_value()) out += fmt_value(*r.candidate_scale);
    out += ',';
    out += r.metric;
    out += ',';
    out += fmt_value(r.value);
    out += ',';
    out += std::to_string(r.seed);
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  const std::string body = metrics_csv(rows);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move " + tmp + " into place at " + path);
  }
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw DimensionError("spearman needs equally sized vectors, got " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  if (a.size() < 2) throw DomainError("spearman needs at least two pairs");

  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    cov += da * db;
    var_a += da * da;
    var_b += db * db;
  }
  if (var_a == 0.0 || var_b == 0.0) return std::nullopt;  // constant side: undefined
  return cov / std::sqrt(var_a * var_b);
}

}  // namespace amd
