// SPDX-License-Identifier: Apache-2.0
#include "amd/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <tuple>

#include "amd/errors.hpp"
#include "amd/ops.hpp"

namespace amd {
namespace {

std::string fmt_scale(double s) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", s);
  return buf;
}

void check_scores(const ModelConfig& cfg, const ImportanceScores& scores) {
  if (scores.heads.size() != cfg.num_layers || scores.units.size() != cfg.num_layers) {
    throw ContractError("importance scores cover " + std::to_string(scores.heads.size()) +
                        " layers, model has " + std::to_string(cfg.num_layers));
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (scores.heads[l].size() != cfg.num_heads || scores.units[l].size() != cfg.mlp_hidden) {
      throw ContractError("importance score sizes do not match the model at layer " +
                          std::to_string(l));
    }
    for (double s : scores.heads[l])
      if (!std::isfinite(s) || s < 0.0) throw DomainError("importance scores must be finite and non-negative");
    for (double s : scores.units[l])
      if (!std::isfinite(s) || s < 0.0) throw DomainError("importance scores must be finite and non-negative");
  }
}

}  // namespace

ScaleGrid build_grid(double teacher_scale, double student_scale, std::size_t m) {
  if (!(student_scale > 0.0) || !(teacher_scale > student_scale)) {
    throw DomainError("build_grid requires 0 < student scale < teacher scale, got student " +
                      fmt_scale(student_scale) + ", teacher " + fmt_scale(teacher_scale));
  }
  if (m < 1) throw DomainError("build_grid requires at least one step");

  ScaleGrid grid;
  grid.teacher_scale = teacher_scale;
  grid.student_scale = student_scale;
  grid.m = m;
  grid.delta = (teacher_scale - student_scale) / static_cast<double>(m);
  grid.targets.resize(m);
  // Interpolate in extended precision: one rounding per target instead of k
  // accumulated additions, so decimal grids land on the nearest doubles.
  const long double s = student_scale;
  const long double t = teacher_scale;
  const long double md = static_cast<long double>(m);
  for (std::size_t k = 0; k < m; ++k) {
    const long double kd = static_cast<long double>(k);
    grid.targets[k] = static_cast<double>(((md - kd) * s + kd * t) / md);
  }
  for (std::size_t k = 0; k + 1 < m; ++k) {
    if (!(grid.targets[k] < grid.targets[k + 1]))
      throw DomainError("scale grid is too fine to be strictly increasing");
  }
  return grid;
}

ImportanceScores compute_importance(const MiniViT& teacher, const Dataset& data,
                                    std::size_t batch_size, std::size_t num_batches) {
  if (data.size() == 0) throw DataError("importance probe needs a non-empty dataset");
  if (batch_size == 0) throw DomainError("importance batch size must be positive");
  if (num_batches == 0) throw DomainError("importance needs at least one probe batch");

  const std::size_t layers = teacher.layer_heads().size();
  ImportanceScores scores;
  scores.head_params = head_param_count(teacher.config());
  scores.unit_params = unit_param_count(teacher.config());
  scores.heads.resize(layers);
  scores.units.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    scores.heads[l].assign(teacher.layer_heads()[l], 0.0);
    scores.units[l].assign(teacher.layer_units()[l], 0.0);
  }

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t cursor = 0;
  for (std::size_t b = 0; b < num_batches; ++b) {
    // Wrap around the dataset so any probe budget works on any dataset size.
    Batch batch;
    {
      std::vector<std::size_t> rows(batch_size);
      for (std::size_t r = 0; r < batch_size; ++r) rows[r] = (cursor + r) % data.size();
      cursor = (cursor + batch_size) % data.size();
      batch = take_batch(data, rows, 0, batch_size);
    }

    std::vector<Tensor> head_gates(layers), unit_gates(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      head_gates[l] = Tensor::full({teacher.layer_heads()[l]}, 1.0, true);
      unit_gates[l] = Tensor::full({teacher.layer_units()[l]}, 1.0, true);
    }

    TapeScope scope;
    MiniViT::Output out = teacher.forward_with_gates(batch.images, head_gates, unit_gates);
    Tensor loss = cross_entropy(out.logits, batch.labels);
    scope.tape().backward(loss);

    for (std::size_t l = 0; l < layers; ++l) {
      const double* hg = head_gates[l].grad_data();
      for (std::size_t h = 0; h < scores.heads[l].size(); ++h)
        scores.heads[l][h] += std::fabs(hg[h]);
      const double* ug = unit_gates[l].grad_data();
      for (std::size_t u = 0; u < scores.units[l].size(); ++u)
        scores.units[l][u] += std::fabs(ug[u]);
    }
  }

  for (std::size_t l = 0; l < layers; ++l) {
    for (double s : scores.heads[l])
      if (!std::isfinite(s)) throw TrainingError("non-finite head importance at layer " + std::to_string(l));
    for (double s : scores.units[l])
      if (!std::isfinite(s)) throw TrainingError("non-finite unit importance at layer " + std::to_string(l));
  }
  return scores;
}

double min_reachable_scale(const ModelConfig& cfg) {
  const double hp = static_cast<double>(head_param_count(cfg));
  const double up = static_cast<double>(unit_param_count(cfg));
  const double total = static_cast<double>(cfg.num_layers) *
                       (static_cast<double>(cfg.num_heads) * hp +
                        static_cast<double>(cfg.mlp_hidden) * up);
  return static_cast<double>(cfg.num_layers) * (hp + up) / total;
}

CandidateFamily prune_to_grid(const ModelConfig& cfg, const ImportanceScores& scores,
                              const std::vector<double>& targets, double tolerance) {
  cfg.validate();
  check_scores(cfg, scores);
  if (targets.empty()) throw DomainError("prune_to_grid needs at least one target scale");
  if (!(tolerance >= 0.0)) throw DomainError("pruning tolerance must be non-negative");
  for (std::size_t k = 0; k < targets.size(); ++k) {
    if (!std::isfinite(targets[k]) || targets[k] <= 0.0 || targets[k] > 1.0)
      throw DomainError("pruning targets must lie in (0, 1], got " + fmt_scale(targets[k]));
    if (k > 0 && !(targets[k] > targets[k - 1]))
      throw DomainError("pruning targets must be strictly increasing");
  }

  const std::size_t hp = head_param_count(cfg);
  const std::size_t up = unit_param_count(cfg);

  struct Entry {
    double density;
    CandidateFamily::Removal removal;
    std::size_t params;
  };
  std::vector<Entry> ranking;
  ranking.reserve(cfg.num_layers * (cfg.num_heads + cfg.mlp_hidden));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h)
      ranking.push_back({scores.heads[l][h] / static_cast<double>(hp), {l, true, h}, hp});
    for (std::size_t u = 0; u < cfg.mlp_hidden; ++u)
      ranking.push_back({scores.units[l][u] / static_cast<double>(up), {l, false, u}, up});
  }
  // Least important per parameter goes first; ties resolve by position so
  // the ranking, and with it the whole family, is reproducible.
  std::sort(ranking.begin(), ranking.end(), [](const Entry& a, const Entry& b) {
    return std::tuple(a.density, a.removal.layer, !a.removal.is_head, a.removal.index) <
           std::tuple(b.density, b.removal.layer, !b.removal.is_head, b.removal.index);
  });

  const std::size_t total = param_counts(cfg, StructuralMask::full(cfg)).total_prunable;
  StructuralMask mask = StructuralMask::full(cfg);
  std::vector<std::size_t> kept_heads(cfg.num_layers, cfg.num_heads);
  std::vector<std::size_t> kept_units(cfg.num_layers, cfg.mlp_hidden);
  std::size_t active = total;

  CandidateFamily family;
  family.targets = targets;
  family.realized_scales.assign(targets.size(), 0.0);
  family.masks.assign(targets.size(), StructuralMask{});

  std::size_t next = 0;  // walk position in the ranking
  for (std::size_t ti = targets.size(); ti-- > 0;) {
    const double target = targets[ti];
    while (static_cast<double>(active) / static_cast<double>(total) > target) {
      if (next == ranking.size()) {
        const double floor = min_reachable_scale(cfg);
        throw PruningError("target scale " + fmt_scale(target) +
                               " is below the one-head one-unit floor; minimum reachable scale is " +
                               fmt_scale(floor),
                           floor);
      }
      const Entry& e = ranking[next++];
      if (e.removal.is_head) {
        if (kept_heads[e.removal.layer] == 1) continue;  // guard: keep layers alive
        kept_heads[e.removal.layer] -= 1;
        mask.heads[e.removal.layer][e.removal.index] = false;
      } else {
        if (kept_units[e.removal.layer] == 1) continue;
        kept_units[e.removal.layer] -= 1;
        mask.units[e.removal.layer][e.removal.index] = false;
      }
      active -= e.params;
      family.pruning_order.push_back(e.removal);
    }
    family.realized_scales[ti] = static_cast<double>(active) / static_cast<double>(total);
    family.masks[ti] = mask;
  }

  for (std::size_t k = 0; k < targets.size(); ++k) {
    const double realized = family.realized_scales[k];
    if (std::fabs(realized - targets[k]) > tolerance) {
      throw PruningError("realized scale " + fmt_scale(realized) + " misses target " +
                             fmt_scale(targets[k]) + " by more than " + fmt_scale(tolerance),
                         realized);
    }
    if (k > 0 && !(realized > family.realized_scales[k - 1])) {
      throw PruningError("targets " + fmt_scale(targets[k - 1]) + " and " + fmt_scale(targets[k]) +
                             " collapse onto one candidate at scale " + fmt_scale(realized),
                         realized);
    }
  }
  return family;
}

CandidateFamily prune_to_grid(const ModelConfig& cfg, const ImportanceScores& scores,
                              const ScaleGrid& grid, double tolerance) {
  return prune_to_grid(cfg, scores, grid.targets, tolerance);
}

StructuralMask prune_to_scale(const ModelConfig& cfg, const ImportanceScores& scores,
                              double target, double tolerance) {
  return prune_to_grid(cfg, scores, std::vector<double>{target}, tolerance).masks.front();
}

}  // namespace amd
