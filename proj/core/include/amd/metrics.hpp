// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace amd {

// One measurement destined for the run's metrics table. Optional fields
// export as empty CSV cells.
struct MetricsRow {
  std::string stage;
  std::optional<long> epoch;
  std::optional<std::size_t> candidate_index;  // ordering key, not exported
  std::optional<double> candidate_scale;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

// Pipeline position of a stage name; unknown stages sort last. Used to keep
// CSV export order independent of insertion order.
int stage_rank(const std::string& stage);

// Rows sorted by (stage rank, epoch, candidate index, metric). Values print
// with %.9g, so re-exporting the same report reproduces the file byte for
// byte. Header: stage,epoch,candidate_scale,metric,value,seed.
std::string metrics_csv(std::vector<MetricsRow> rows);

// Writes metrics_csv(rows) to path (temp file + rename). IoError on failure.
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

// Spearman rank correlation with average ranks on ties. Empty when either
// side has zero rank variance (correlation undefined), DimensionError when
// the vectors disagree in length, DomainError when shorter than two entries.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace amd
