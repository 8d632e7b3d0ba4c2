// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "amd/dataset.hpp"
#include "amd/model.hpp"

namespace amd {

// Evenly spaced candidate scales between student and teacher.
struct ScaleGrid {
  double teacher_scale = 1.0;  // S_t
  double student_scale = 0.0;  // S_s
  std::size_t m = 0;
  double delta = 0.0;                // (S_t - S_s) / m
  std::vector<double> targets;       // {S_s + k*delta : k = 0..m-1}, ascending
};

// Targets are computed by correctly rounded interpolation so that round
// decimal grids (e.g. 0.1 .. 0.9 by 0.1) come out as the exact double
// literals rather than drifting through repeated addition.
ScaleGrid build_grid(double teacher_scale, double student_scale, std::size_t m);

// Sensitivity of the task loss to each prunable structure: |d(loss)/d(gate)|
// at gate = 1, summed over probe batches.
struct ImportanceScores {
  std::vector<std::vector<double>> heads;  // [layer][head]
  std::vector<std::vector<double>> units;  // [layer][unit]
  // Removal cost per structure, used to normalize ranking into densities.
  std::size_t head_params = 0;
  std::size_t unit_params = 0;
};

ImportanceScores compute_importance(const MiniViT& teacher, const Dataset& data,
                                    std::size_t batch_size, std::size_t num_batches = 32);

// A nested set of pruning masks sharing one removal order. masks[i] is the
// candidate at targets[i]; every smaller mask is a subset of every larger
// one because all of them are snapshots along the same removal walk.
struct CandidateFamily {
  std::vector<double> targets;          // ascending
  std::vector<double> realized_scales;  // strictly increasing, within tolerance
  std::vector<StructuralMask> masks;

  struct Removal {
    std::size_t layer;
    bool is_head;
    std::size_t index;
  };
  std::vector<Removal> pruning_order;  // global ranking actually applied

  std::size_t size() const { return masks.size(); }
};

// Walks structures in ascending importance density (score / removal cost),
// skipping removals that would empty a layer, and snapshots the first state
// whose scale is <= each target, working from the largest target down.
// Realized scales must land within `tolerance` of their targets and be
// strictly increasing; otherwise PruningError (carrying the minimum scale
// the guard permits) is thrown.
CandidateFamily prune_to_grid(const ModelConfig& cfg, const ImportanceScores& scores,
                              const std::vector<double>& targets,
                              double tolerance = 0.02);

CandidateFamily prune_to_grid(const ModelConfig& cfg, const ImportanceScores& scores,
                              const ScaleGrid& grid, double tolerance = 0.02);

// Single-target convenience wrapper.
StructuralMask prune_to_scale(const ModelConfig& cfg, const ImportanceScores& scores,
                              double target, double tolerance = 0.02);

// Smallest scale reachable without emptying any layer.
double min_reachable_scale(const ModelConfig& cfg);

}  // namespace amd
