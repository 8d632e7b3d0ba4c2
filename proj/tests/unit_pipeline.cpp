// SPDX-License-Identifier: Apache-2.0
// Grid construction, importance probing, the pruning walk, assistant
// selection, joint and pairwise distillation, the manual sweep, and the
// end-to-end pipeline drivers.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "amd/checkpoint.hpp"
#include "amd/dataset.hpp"
#include "amd/distill.hpp"
#include "amd/errors.hpp"
#include "amd/metrics.hpp"
#include "amd/model.hpp"
#include "amd/ops.hpp"
#include "amd/pipeline.hpp"
#include "amd/pruning.hpp"
#include "amd/runtime.hpp"
#include "amd/selection.hpp"
#include "amd/tensor.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

namespace {

using namespace amd;

template <typename E, typename Fn>
std::string thrown_message(Fn&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return {};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// A family built from explicit masks; realized scales are recomputed so the
// family is internally consistent without running the pruning walk.
CandidateFamily make_family(const ModelConfig& cfg, std::vector<StructuralMask> masks) {
  CandidateFamily fam;
  for (StructuralMask& m : masks) {
    m.validate(cfg);
    fam.realized_scales.push_back(masked_scale(cfg, m));
    fam.masks.push_back(std::move(m));
  }
  fam.targets = fam.realized_scales;
  return fam;
}

ImportanceScores make_scores(const ModelConfig& cfg, double head_value, double unit_value) {
  ImportanceScores s;
  s.head_params = head_param_count(cfg);
  s.unit_params = unit_param_count(cfg);
  s.heads.assign(cfg.num_layers, std::vector<double>(cfg.num_heads, head_value));
  s.units.assign(cfg.num_layers, std::vector<double>(cfg.mlp_hidden, unit_value));
  return s;
}

// Mirrors the training objective term by term so tests can predict losses:
// task cross-entropy plus alpha-weighted soft-logit KL plus beta-weighted
// hidden-state error.
double manual_loss(const MiniViT::Output& teacher_out, const MiniViT::Output& out,
                   const std::vector<int>& labels, const DistillConfig& cfg) {
  Tensor total;
  auto accumulate = [&](const Tensor& term, double weight) {
    const Tensor weighted = (weight == 1.0) ? term : scale(term, weight);
    total = total.defined() ? add(total, weighted) : weighted;
  };
  if (cfg.use_ce) accumulate(cross_entropy(out.logits, labels), 1.0);
  if (cfg.use_logit) accumulate(kl_soft_logits(teacher_out.logits, out.logits, cfg.gamma), cfg.alpha);
  if (cfg.use_feat) accumulate(mse_hidden(teacher_out.hidden, out.hidden), cfg.beta);
  REQUIRE(total.defined());
  return total.item();
}

// Nested three-candidate family over the tiny two-layer model: full, one
// head and two units removed, then two more units removed below that.
std::vector<StructuralMask> nested_masks(const ModelConfig& cfg) {
  StructuralMask a = StructuralMask::full(cfg);
  StructuralMask b = a;
  b.heads[0][1] = false;
  b.units[1][6] = false;
  b.units[1][7] = false;
  StructuralMask c = b;
  c.units[1][4] = false;
  c.units[1][5] = false;
  c.units[0][6] = false;
  c.units[0][7] = false;
  return {c, b, a};
}

DistillConfig fast_distill(std::size_t epochs, std::uint64_t seed) {
  DistillConfig d;
  d.epochs = epochs;
  d.warmup_epochs = epochs > 0 ? 0.25 : 0.0;
  d.batch_size = 16;
  d.base_lr = 1e-3;
  d.seed = seed;
  return d;
}

// Small but prunable pipeline geometry: sixteen two-wide heads keep the
// removal chunks well inside the default 0.02 scale tolerance.
RunConfig pipe_config(const std::string& out_dir, std::uint64_t seed) {
  RunConfig cfg;
  cfg.model.image_size = 16;
  cfg.model.channels = 1;
  cfg.model.patch_size = 4;
  cfg.model.embed_dim = 32;
  cfg.model.num_layers = 2;
  cfg.model.num_heads = 16;
  cfg.model.mlp_hidden = 64;
  cfg.model.num_classes = 4;
  cfg.distill.epochs = 2;
  cfg.distill.warmup_epochs = 0.5;
  cfg.distill.batch_size = 16;
  cfg.distill.base_lr = 3e-3;
  cfg.student_scale = 0.25;
  cfg.grid_steps = 3;
  cfg.chain_steps = 1;
  cfg.importance_batches = 4;
  cfg.data = "synth";
  cfg.synth.num_samples = 96;
  cfg.synth.num_classes = 4;
  cfg.synth.image_size = 16;
  cfg.synth.channels = 1;
  cfg.synth.noise_amplitude = 0.5;
  cfg.val_fraction = 0.125;
  cfg.student_init = "ta";
  cfg.out_dir = out_dir;
  cfg.seed = seed;
  return cfg;
}

// Reference argmax over eligible records, mirroring the documented rules:
// strictly-better score wins, exact ties go to the smaller scale.
struct BruteBest {
  bool found = false;
  std::size_t index = 0;
  double score = 0.0;
  double scale = 0.0;
};

BruteBest brute_select(const SelectionInput& in) {
  BruteBest best;
  for (const NPSDRecord& r : in.records) {
    if (!(r.scale > in.student_scale)) continue;
    const double s = in.lambda.has_value()
                         ? lambda_npsd(in.teacher_accuracy, in.teacher_scale, r.accuracy,
                                       r.scale, *in.student_accuracy, in.student_scale,
                                       *in.lambda)
                         : npsd(in.teacher_accuracy, in.teacher_scale, r.accuracy, r.scale);
    if (!best.found || s > best.score || (s == best.score && r.scale < best.scale)) {
      best = {true, r.candidate_index, s, r.scale};
    }
  }
  return best;
}

}  // namespace

TEST_CASE("scale grids interpolate to exact decimal targets") {
  SUBCASE("nine-step canonical grid") {
    const ScaleGrid g = build_grid(1.0, 0.1, 9);
    const double expect[] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    REQUIRE_EQ(g.targets.size(), 9);
    for (std::size_t k = 0; k < 9; ++k) CHECK_EQ(g.targets[k], expect[k]);
    CHECK_EQ(g.m, 9);
    CHECK_EQ(g.teacher_scale, 1.0);
    CHECK_EQ(g.student_scale, 0.1);
  }
  SUBCASE("four-step grid and its spacing") {
    const ScaleGrid g = build_grid(1.0, 0.2, 4);
    REQUIRE_EQ(g.targets.size(), 4);
    CHECK_EQ(g.targets[0], 0.2);
    CHECK_EQ(g.targets[1], 0.4);
    CHECK_EQ(g.targets[2], 0.6);
    CHECK_EQ(g.targets[3], 0.8);
    CHECK_EQ(g.delta, (1.0 - 0.2) / 4.0);
  }
  SUBCASE("single step grid is just the student scale") {
    const ScaleGrid g = build_grid(1.0, 0.1, 1);
    REQUIRE_EQ(g.targets.size(), 1);
    CHECK_EQ(g.targets[0], 0.1);
  }
  SUBCASE("random grids stay ordered and anchored") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
      const double s = rng.uniform(0.01, 0.9);
      const double t = std::min(1.0, s + rng.uniform(0.05, 1.0));
      const std::size_t m = 1 + rng.index(64);
      const ScaleGrid g = build_grid(t, s, m);
      REQUIRE_EQ(g.targets.size(), m);
      CHECK_EQ(g.targets[0], s);  // the smallest cell sits exactly on the student
      for (std::size_t k = 0; k < m; ++k) {
        CHECK_GT(g.targets[k], 0.0);
        CHECK_LT(g.targets[k], t);
        if (k > 0) CHECK_GT(g.targets[k], g.targets[k - 1]);
      }
    }
  }
  SUBCASE("degenerate endpoints are rejected") {
    CHECK_THROWS_AS(build_grid(1.0, 0.0, 9), DomainError);
    CHECK_THROWS_AS(build_grid(1.0, -0.1, 9), DomainError);
    CHECK_THROWS_AS(build_grid(0.5, 0.5, 3), DomainError);
    CHECK_THROWS_AS(build_grid(0.4, 0.5, 3), DomainError);
    CHECK_THROWS_AS(build_grid(1.0, 0.1, 0), DomainError);
  }
  SUBCASE("a grid finer than double spacing cannot stay increasing") {
    // One ulp of room split eight ways collapses neighboring targets.
    CHECK_THROWS_AS(build_grid(std::nextafter(0.5, 1.0), 0.5, 8), DomainError);
  }
}

TEST_CASE("importance scores measure gate sensitivity") {
  ModelConfig cfg = testutil::tiny_config();
  cfg.num_layers = 1;
  const Dataset data = gen_synth(101, testutil::tiny_synth(cfg, 64));

  SUBCASE("shapes, sign, and determinism") {
    Rng rng(7);
    const MiniViT model(cfg, rng);
    const ImportanceScores a = compute_importance(model, data, 16, 4);
    const ImportanceScores b = compute_importance(model, data, 16, 4);
    REQUIRE_EQ(a.heads.size(), 1);
    REQUIRE_EQ(a.heads[0].size(), cfg.num_heads);
    REQUIRE_EQ(a.units[0].size(), cfg.mlp_hidden);
    CHECK_EQ(a.head_params, head_param_count(cfg));
    CHECK_EQ(a.unit_params, unit_param_count(cfg));
    for (double s : a.heads[0]) CHECK_GE(s, 0.0);
    for (double s : a.units[0]) CHECK_GE(s, 0.0);
    CHECK(a.heads == b.heads);
    CHECK(a.units == b.units);
  }

  SUBCASE("a head with a zeroed output projection scores exactly zero") {
    Rng rng(7);
    MiniViT model(cfg, rng);
    const std::size_t dh = cfg.embed_dim / cfg.num_heads;
    for (NamedTensor p : model.named_parameters()) {
      if (p.name != "blocks.0.attn.wo") continue;
      double* w = p.tensor.data();
      // Rows dh..2*dh of the output projection belong to head 1.
      for (std::size_t r = dh; r < 2 * dh; ++r)
        for (std::size_t c = 0; c < cfg.embed_dim; ++c) w[r * cfg.embed_dim + c] = 0.0;
    }
    const ImportanceScores s = compute_importance(model, data, 16, 4);
    CHECK_EQ(s.heads[0][1], 0.0);
    CHECK_GT(s.heads[0][0], 0.0);
  }

  SUBCASE("weight-tied heads receive equal scores") {
    Rng rng(7);
    MiniViT model(cfg, rng);
    const std::size_t d = cfg.embed_dim;
    const std::size_t dh = d / cfg.num_heads;
    for (NamedTensor p : model.named_parameters()) {
      double* w = p.tensor.data();
      if (p.name == "blocks.0.attn.wq" || p.name == "blocks.0.attn.wk" ||
          p.name == "blocks.0.attn.wv") {
        // Copy head 0's columns onto head 1's.
        for (std::size_t r = 0; r < d; ++r)
          for (std::size_t c = 0; c < dh; ++c) w[r * d + dh + c] = w[r * d + c];
      } else if (p.name == "blocks.0.attn.wo") {
        for (std::size_t r = 0; r < dh; ++r)
          for (std::size_t c = 0; c < d; ++c) w[(dh + r) * d + c] = w[r * d + c];
      }
    }
    const ImportanceScores s = compute_importance(model, data, 16, 4);
    CHECK_LE(testutil::rel_err(s.heads[0][0], s.heads[0][1]), 1e-10);
    CHECK_GT(s.heads[0][0], 0.0);
  }

  SUBCASE("gate sensitivity ranks heads like leave-one-out ablation") {
    // Train the toy model briefly so both heads carry real signal, then
    // compare the gradient ranking against actually dropping each head.
    Rng rng(11);
    MiniViT model(cfg, rng);
    const Split split = split_dataset(data, 0.25, rng);
    DistillConfig d = fast_distill(3, 5);
    pretrain_teacher(model, split.train, split.val, d);

    const std::size_t batch_size = 16, num_batches = 4;
    const ImportanceScores s = compute_importance(model, data, batch_size, num_batches);

    double delta[2] = {0.0, 0.0};
    std::size_t cursor = 0;
    for (std::size_t b = 0; b < num_batches; ++b) {
      std::vector<std::size_t> rows(batch_size);
      for (std::size_t r = 0; r < batch_size; ++r) rows[r] = (cursor + r) % data.size();
      cursor = (cursor + batch_size) % data.size();
      const Batch batch = take_batch(data, rows, 0, batch_size);
      const double base =
          cross_entropy(model.forward(batch.images).logits, batch.labels).item();
      for (std::size_t h = 0; h < 2; ++h) {
        StructuralMask m = StructuralMask::full(cfg);
        m.heads[0][h] = false;
        const double ablated =
            cross_entropy(model.forward(batch.images, &m).logits, batch.labels).item();
        delta[h] += ablated - base;
      }
    }
    const bool grad_says_head0 = s.heads[0][0] > s.heads[0][1];
    const bool ablation_says_head0 = delta[0] > delta[1];
    CHECK_EQ(grad_says_head0, ablation_says_head0);
  }

  SUBCASE("probe input validation") {
    Rng rng(7);
    const MiniViT model(cfg, rng);
    CHECK_THROWS_AS(compute_importance(model, Dataset{}, 16, 4), DataError);
    CHECK_THROWS_AS(compute_importance(model, data, 0, 4), DomainError);
    CHECK_THROWS_AS(compute_importance(model, data, 16, 0), DomainError);
  }
}

TEST_CASE("pruning walk snapshots nested masks along one removal order") {
  // One layer, four wide heads, thirty-two thin units: head removals move
  // the scale in eighth steps, units in 1/64 steps.
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 4;
  cfg.mlp_hidden = 32;
  cfg.num_classes = 3;
  REQUIRE_EQ(head_param_count(cfg), 256);
  REQUIRE_EQ(unit_param_count(cfg), 32);

  ImportanceScores scores = make_scores(cfg, 0.0, 50.0);
  scores.heads[0] = {40.0, 30.0, 20.0, 10.0};  // densities far below the units'

  SUBCASE("hand-checked walk, one target") {
    const CandidateFamily fam = prune_to_grid(cfg, scores, std::vector<double>{0.75}, 0.02);
    REQUIRE_EQ(fam.size(), 1);
    CHECK_EQ(fam.realized_scales[0], 0.75);  // 1536 of 2048 parameters stay
    CHECK_EQ(fam.masks[0].heads[0], std::vector<bool>{true, true, false, false});
    for (bool u : fam.masks[0].units[0]) CHECK(u);
    REQUIRE_EQ(fam.pruning_order.size(), 2);
    CHECK(fam.pruning_order[0].is_head);
    CHECK_EQ(fam.pruning_order[0].index, 3);
    CHECK_EQ(fam.pruning_order[1].index, 2);
  }

  SUBCASE("hand-checked walk, two targets with a layer guard skip") {
    const CandidateFamily fam =
        prune_to_grid(cfg, scores, std::vector<double>{0.5, 0.75}, 0.02);
    REQUIRE_EQ(fam.size(), 2);
    CHECK_EQ(fam.realized_scales[1], 0.75);
    CHECK_EQ(fam.realized_scales[0], 0.5);
    // Reaching 0.5 walks past the guarded last head: heads 3, 2, 1 go, head
    // 0 is skipped to keep the layer alive, then eight units make up the
    // rest. Guarded skips consume ranking entries without being recorded.
    CHECK_EQ(fam.masks[0].heads[0], std::vector<bool>{true, false, false, false});
    std::size_t dropped_units = 0;
    for (bool u : fam.masks[0].units[0]) dropped_units += u ? 0 : 1;
    CHECK_EQ(dropped_units, 8);
    REQUIRE_EQ(fam.pruning_order.size(), 11);
    for (std::size_t k = 3; k < 11; ++k) {
      CHECK_FALSE(fam.pruning_order[k].is_head);
      CHECK_EQ(fam.pruning_order[k].index, k - 3);  // unit ties resolve by index
    }
    CHECK(fam.masks[0].subset_of(fam.masks[1]));
  }

  SUBCASE("a full-scale target needs no removals") {
    const CandidateFamily fam = prune_to_grid(cfg, scores, std::vector<double>{1.0}, 0.0);
    CHECK_EQ(fam.realized_scales[0], 1.0);
    CHECK(fam.pruning_order.empty());
    CHECK(fam.masks[0].subset_of(StructuralMask::full(cfg)));
    CHECK(StructuralMask::full(cfg).subset_of(fam.masks[0]));
  }

  SUBCASE("prune_to_scale matches the single-target family") {
    const StructuralMask m = prune_to_scale(cfg, scores, 0.75, 0.02);
    const CandidateFamily fam = prune_to_grid(cfg, scores, std::vector<double>{0.75}, 0.02);
    CHECK(m.subset_of(fam.masks[0]));
    CHECK(fam.masks[0].subset_of(m));
  }

  SUBCASE("target below the one-head one-unit floor reports the floor") {
    const double floor = min_reachable_scale(cfg);
    CHECK_EQ(floor, 288.0 / 2048.0);
    try {
      prune_to_grid(cfg, scores, std::vector<double>{0.05}, 0.02);
      FAIL("expected PruningError");
    } catch (const PruningError& e) {
      CHECK_EQ(e.min_reachable_scale, floor);
      CHECK(std::string(e.what()).find("floor") != std::string::npos);
    }
  }

  SUBCASE("target validation") {
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{}, 0.02), DomainError);
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{0.5, 0.5}, 0.02), DomainError);
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{0.6, 0.5}, 0.02), DomainError);
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{0.0}, 0.02), DomainError);
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{1.2}, 0.02), DomainError);
    CHECK_THROWS_AS(prune_to_grid(cfg, scores, std::vector<double>{0.5}, -0.01), DomainError);
  }

  SUBCASE("score validation") {
    ImportanceScores bad = scores;
    bad.heads[0][0] = -1.0;
    CHECK_THROWS_AS(prune_to_grid(cfg, bad, std::vector<double>{0.5}, 0.02), DomainError);
    bad = scores;
    bad.heads[0].pop_back();
    CHECK_THROWS_AS(prune_to_grid(cfg, bad, std::vector<double>{0.5}, 0.02), ContractError);
    bad = scores;
    bad.units.pop_back();
    CHECK_THROWS_AS(prune_to_grid(cfg, bad, std::vector<double>{0.5}, 0.02), ContractError);
  }
}

TEST_CASE("pruning failure modes carry the realized scale") {
  // Two huge heads and four tiny units: the walk can only move in crude
  // steps, so tolerance and collapse failures are easy to provoke.
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_hidden = 4;
  cfg.num_classes = 3;
  REQUIRE_EQ(head_param_count(cfg), 512);

  ImportanceScores scores = make_scores(cfg, 0.0, 100.0);
  scores.heads[0] = {1.0, 2.0};
  const double total = 2.0 * 512.0 + 4.0 * 32.0;  // 1152 prunable parameters

  SUBCASE("realized scale outside the tolerance") {
    try {
      prune_to_grid(cfg, scores, std::vector<double>{0.8}, 0.02);
      FAIL("expected PruningError");
    } catch (const PruningError& e) {
      CHECK_EQ(e.min_reachable_scale, 640.0 / total);  // where the walk landed
      CHECK(std::string(e.what()).find("misses target") != std::string::npos);
    }
  }

  SUBCASE("two targets collapsing onto one snapshot") {
    try {
      prune_to_grid(cfg, scores, std::vector<double>{0.5, 0.52}, 0.1);
      FAIL("expected PruningError");
    } catch (const PruningError& e) {
      CHECK_EQ(e.min_reachable_scale, 576.0 / total);
      CHECK(std::string(e.what()).find("collapse") != std::string::npos);
    }
  }
}

TEST_CASE("pruning the reference geometries") {
  // Four sixteen-wide heads per layer cannot reach a 0.1 scale: the one
  // head, one unit floor sits at 16896/131072. Doubling the head count
  // halves the chunk size and makes the whole nine-cell grid feasible.
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.channels = 3;
  cfg.patch_size = 8;
  cfg.embed_dim = 64;
  cfg.num_layers = 4;
  cfg.num_heads = 4;
  cfg.mlp_hidden = 128;
  cfg.num_classes = 10;

  Rng rng(17);
  ImportanceScores scores = make_scores(cfg, 0.0, 0.0);
  auto randomize = [&](ImportanceScores& s) {
    for (auto& layer : s.heads)
      for (double& v : layer) v = rng.uniform(0.1, 1.0);
    for (auto& layer : s.units)
      for (double& v : layer) v = rng.uniform(0.1, 1.0);
  };
  randomize(scores);

  SUBCASE("wide heads put the floor above the smallest cell") {
    CHECK_EQ(min_reachable_scale(cfg), 16896.0 / 131072.0);
    try {
      prune_to_grid(cfg, scores, build_grid(1.0, 0.1, 9), 0.02);
      FAIL("expected PruningError");
    } catch (const PruningError& e) {
      CHECK_EQ(e.min_reachable_scale, 16896.0 / 131072.0);
    }
  }

  SUBCASE("eight narrower heads realize the full grid") {
    cfg.num_heads = 8;
    ImportanceScores s8 = make_scores(cfg, 0.0, 0.0);
    randomize(s8);
    CHECK_EQ(min_reachable_scale(cfg), 8704.0 / 131072.0);
    const ScaleGrid grid = build_grid(1.0, 0.1, 9);
    const CandidateFamily fam = prune_to_grid(cfg, s8, grid, 0.02);
    REQUIRE_EQ(fam.size(), 9);
    for (std::size_t k = 0; k < 9; ++k) {
      CHECK_LE(std::fabs(fam.realized_scales[k] - grid.targets[k]), 0.02);
      CHECK_EQ(fam.realized_scales[k], masked_scale(cfg, fam.masks[k]));
      if (k > 0) {
        CHECK_GT(fam.realized_scales[k], fam.realized_scales[k - 1]);
        CHECK(fam.masks[k - 1].subset_of(fam.masks[k]));
      }
    }
  }
}

TEST_CASE("random pruning instances keep every family invariant") {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 32;
  cfg.num_layers = 2;
  cfg.num_heads = 16;
  cfg.mlp_hidden = 64;
  cfg.num_classes = 4;

  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    ImportanceScores scores = make_scores(cfg, 0.0, 0.0);
    for (auto& layer : scores.heads)
      for (double& v : layer) v = rng.uniform(0.01, 1.0);
    for (auto& layer : scores.units)
      for (double& v : layer) v = rng.uniform(0.01, 1.0);
    const double student = rng.uniform(0.08, 0.5);
    const std::size_t m = 2 + rng.index(8);
    const ScaleGrid grid = build_grid(1.0, student, m);

    const CandidateFamily fam = prune_to_grid(cfg, scores, grid, 0.02);
    REQUIRE_EQ(fam.size(), m);
    for (std::size_t k = 0; k < m; ++k) {
      fam.masks[k].validate(cfg);
      CHECK_LE(std::fabs(fam.realized_scales[k] - grid.targets[k]), 0.02);
      CHECK_EQ(fam.realized_scales[k], masked_scale(cfg, fam.masks[k]));
      if (k > 0) {
        CHECK_GT(fam.realized_scales[k], fam.realized_scales[k - 1]);
        CHECK(fam.masks[k - 1].subset_of(fam.masks[k]));
      }
    }
  }
}

TEST_CASE("slope scores rank candidates by accuracy kept per scale dropped") {
  SUBCASE("hand values") {
    CHECK_EQ(npsd(0.9, 1.0, 0.9, 0.5), 0.0);  // no drop, flat slope
    CHECK_LE(testutil::rel_err(npsd(0.9, 1.0, 0.8, 0.5), -0.2), 1e-14);
    CHECK_LE(testutil::rel_err(lambda_npsd(0.9, 1.0, 0.8, 0.5, 0.7, 0.1, 1.0), -0.45), 1e-14);
  }
  SUBCASE("zero lambda reduces to the plain slope bit for bit") {
    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
      const double pt = rng.uniform(0.5, 1.0);
      const double pa = rng.uniform(0.0, 1.0);
      const double ps = rng.uniform(0.0, 1.0);
      const double sa = rng.uniform(0.3, 0.9);
      CHECK_EQ(lambda_npsd(pt, 1.0, pa, sa, ps, 0.1, 0.0), npsd(pt, 1.0, pa, sa));
    }
  }
  SUBCASE("a candidate matching the student accuracy drops the second leg") {
    const double p = 0.77;
    CHECK_EQ(lambda_npsd(0.9, 1.0, p, 0.5, p, 0.1, 3.0), npsd(0.9, 1.0, p, 0.5));
  }
  SUBCASE("the same accuracy drop scores worse the less scale it buys") {
    double prev = npsd(0.9, 1.0, 0.85, 0.1);
    for (double s = 0.2; s < 0.96; s += 0.1) {
      const double cur = npsd(0.9, 1.0, 0.85, s);
      CHECK_LT(cur, prev);
      prev = cur;
    }
  }
  SUBCASE("domain checks") {
    CHECK_THROWS_AS(npsd(0.9, 1.0, 0.8, 1.0), DomainError);
    CHECK_THROWS_AS(npsd(0.9, 1.0, 0.8, 1.1), DomainError);
    CHECK_THROWS_AS(lambda_npsd(0.9, 1.0, 0.8, 0.5, 0.7, 0.5, 1.0), DomainError);
    CHECK_THROWS_AS(lambda_npsd(0.9, 1.0, 0.8, 1.0, 0.7, 0.1, 1.0), DomainError);
  }
}

TEST_CASE("assistant selection takes the best eligible slope") {
  auto make_input = [](std::vector<NPSDRecord> records, double student) {
    SelectionInput in;
    in.teacher_accuracy = 1.0;
    in.teacher_scale = 1.0;
    in.records = std::move(records);
    in.student_scale = student;
    return in;
  };

  SUBCASE("singleton") {
    const ScoredRecord r = select_optimal(make_input({{0, 0.5, 0.6}}, 0.1));
    CHECK_EQ(r.record.candidate_index, 0);
    CHECK_EQ(r.score, npsd(1.0, 1.0, 0.6, 0.5));
  }

  SUBCASE("exact score ties prefer the smaller scale") {
    // Both records sit on the same slope through the teacher point.
    const ScoredRecord r =
        select_optimal(make_input({{0, 0.6, 0.6}, {1, 0.3, 0.3}}, 0.1));
    CHECK_EQ(r.record.candidate_index, 1);
    CHECK_EQ(r.record.scale, 0.3);
  }

  SUBCASE("records at or below the student scale are ineligible") {
    const ScoredRecord r =
        select_optimal(make_input({{0, 0.1, 0.99}, {1, 0.5, 0.2}}, 0.1));
    CHECK_EQ(r.record.candidate_index, 1);
    CHECK_THROWS_AS(select_optimal(make_input({{0, 0.1, 0.99}}, 0.1)), SelectionError);
    CHECK_THROWS_AS(select_optimal(make_input({}, 0.1)), SelectionError);
  }

  SUBCASE("validation failures outrank eligibility") {
    CHECK_THROWS_AS(select_optimal(make_input({{0, 0.5, 0.6}, {1, 0.5, 0.7}}, 0.1)),
                    DomainError);
    CHECK_THROWS_AS(select_optimal(make_input({{0, 1.0, 0.6}}, 0.1)), DomainError);
    SelectionInput in = make_input({{0, 0.5, 0.6}}, 0.1);
    in.lambda = 1.0;  // two-segment score without a student accuracy
    CHECK_THROWS_AS(select_optimal(in), DomainError);
    in.student_accuracy = 0.4;
    CHECK_NOTHROW(select_optimal(in));
  }

  SUBCASE("argmax agrees with brute force over random inputs") {
    Rng rng(47);
    int eligible_seen = 0, empty_seen = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      SelectionInput in;
      in.teacher_accuracy = rng.uniform(0.5, 1.0);
      in.teacher_scale = 1.0;
      in.student_scale = rng.uniform(0.05, 0.6);
      const std::size_t n = 1 + rng.index(8);
      // Distinct scales via distinct slots on a fine lattice.
      std::vector<std::size_t> slots(90);
      for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
      Rng shuffle_rng = rng.fork(trial);
      const std::vector<std::size_t> order = shuffled_indices(slots.size(), shuffle_rng);
      for (std::size_t i = 0; i < n; ++i) {
        const double scale = 0.05 + 0.01 * static_cast<double>(order[i]);
        in.records.push_back({i, scale, rng.uniform(0.0, 1.0)});
      }
      switch (trial % 4) {
        case 0: break;
        case 1: in.lambda = 0.0; break;
        case 2: in.lambda = 0.7; break;
        default: in.lambda = 2.0; break;
      }
      if (in.lambda.has_value()) {
        in.student_accuracy = rng.uniform(0.0, 1.0);
        // The two-segment score needs every record strictly inside the
        // student-to-teacher band, so drop the floor below the lattice.
        in.student_scale = rng.uniform(0.005, 0.045);
      }

      const BruteBest expect = brute_select(in);
      if (!expect.found) {
        ++empty_seen;
        CHECK_THROWS_AS(select_optimal(in), SelectionError);
        continue;
      }
      ++eligible_seen;
      const ScoredRecord got = select_optimal(in);
      CHECK_EQ(got.record.candidate_index, expect.index);
      CHECK_EQ(got.score, expect.score);

      // Shuffling the records must not change the winner.
      SelectionInput shuffled = in;
      Rng perm_rng = rng.fork(10'000 + trial);
      const std::vector<std::size_t> perm =
          shuffled_indices(shuffled.records.size(), perm_rng);
      std::vector<NPSDRecord> reordered;
      for (std::size_t idx : perm) reordered.push_back(in.records[idx]);
      shuffled.records = reordered;
      const ScoredRecord again = select_optimal(shuffled);
      CHECK_EQ(again.record.candidate_index, expect.index);
      CHECK_EQ(again.score, expect.score);
    }
    CHECK_GT(eligible_seen, 500);
    CHECK_GT(empty_seen, 0);
  }

  SUBCASE("positive affine accuracy rescaling keeps the winner") {
    Rng rng(53);
    for (int trial = 0; trial < 200; ++trial) {
      SelectionInput in;
      in.teacher_accuracy = rng.uniform(0.6, 1.0);
      in.teacher_scale = 1.0;
      in.student_scale = 0.05;
      for (std::size_t i = 0; i < 5; ++i)
        in.records.push_back({i, 0.1 + 0.15 * static_cast<double>(i), rng.uniform(0.0, 1.0)});
      const ScoredRecord base = select_optimal(in);

      SelectionInput scaled = in;
      const double a = 0.5, b = 0.2;
      scaled.teacher_accuracy = a * in.teacher_accuracy + b;
      for (NPSDRecord& r : scaled.records) r.accuracy = a * r.accuracy + b;
      const ScoredRecord moved = select_optimal(scaled);
      CHECK_EQ(moved.record.candidate_index, base.record.candidate_index);
    }
  }
}

TEST_CASE("chained selection walks down the scale axis") {
  SelectionInput first;
  first.teacher_accuracy = 1.0;
  first.teacher_scale = 1.0;
  first.student_scale = 0.1;
  first.records = {{0, 0.8, 0.98}, {1, 0.6, 0.9}, {2, 0.4, 0.8}};

  SUBCASE("zero steps means no assistant at all") {
    int calls = 0;
    const auto chain = chain_select(first, 0, [&](const ScoredRecord&) {
      ++calls;
      return SelectionInput{};
    });
    CHECK(chain.empty());
    CHECK_EQ(calls, 0);
  }

  SUBCASE("one step never invokes the rerun hook") {
    int calls = 0;
    const auto chain = chain_select(first, 1, [&](const ScoredRecord&) {
      ++calls;
      return SelectionInput{};
    });
    REQUIRE_EQ(chain.size(), 1);
    CHECK_EQ(chain[0].record.candidate_index, 0);
    CHECK_EQ(calls, 0);
  }

  SUBCASE("each step reruns beneath the previous choice") {
    int calls = 0;
    RerunHook hook = [&](const ScoredRecord& chosen) {
      ++calls;
      SelectionInput next;
      next.teacher_accuracy = chosen.record.accuracy;
      next.teacher_scale = chosen.record.scale;
      next.student_scale = 0.1;
      for (const NPSDRecord& r : first.records)
        if (r.scale < chosen.record.scale) next.records.push_back(r);
      return next;
    };
    const auto chain = chain_select(first, 3, hook);
    REQUIRE_EQ(chain.size(), 3);
    CHECK_EQ(chain[0].record.scale, 0.8);
    CHECK_EQ(chain[1].record.scale, 0.6);
    CHECK_EQ(chain[2].record.scale, 0.4);
    CHECK_EQ(calls, 2);  // no rerun after the last step
    CHECK_EQ(chain[1].score, npsd(0.98, 0.8, 0.9, 0.6));
    CHECK_EQ(chain[2].score, npsd(0.9, 0.6, 0.8, 0.4));
  }

  SUBCASE("an exhausted band surfaces as a selection failure") {
    RerunHook empty_hook = [&](const ScoredRecord&) {
      SelectionInput next;
      next.teacher_accuracy = 0.9;
      next.teacher_scale = 0.5;
      next.student_scale = 0.1;
      return next;
    };
    CHECK_THROWS_AS(chain_select(first, 2, empty_hook), SelectionError);
  }

  SUBCASE("multi-step chains require a rerun hook") {
    CHECK_THROWS_AS(chain_select(first, 2, nullptr), ContractError);
    CHECK_NOTHROW(chain_select(first, 1, nullptr));
  }
}

TEST_CASE("one joint step is the sum of isolated candidate steps") {
  const ModelConfig cfg = testutil::tiny_config();
  const Dataset data = gen_synth(102, testutil::tiny_synth(cfg, 32));
  Rng rng(61);
  const MiniViT teacher(cfg, rng);
  const CandidateFamily fam = make_family(cfg, nested_masks(cfg));
  REQUIRE_EQ(fam.size(), 3);

  std::vector<std::size_t> order(32);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const Batch batch = take_batch(data, order, 0, 16);

  DistillConfig dcfg = fast_distill(1, 0);

  SUBCASE("loss decomposes candidate by candidate") {
    MiniViT shared = teacher.clone();
    std::vector<LossTerms> terms;
    PassLedger ledger;
    const double total = joint_step(teacher, shared, fam, batch, dcfg, &ledger, &terms);

    const MiniViT::Output teacher_out = teacher.forward(batch.images);
    double manual_sum = 0.0;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const MiniViT::Output out = shared.forward(batch.images, &fam.masks[i]);
      const double isolated = manual_loss(teacher_out, out, batch.labels, dcfg);
      CHECK_LE(testutil::rel_err(terms[i].total, isolated), 1e-10);
      manual_sum += isolated;
    }
    CHECK_LE(testutil::rel_err(total, manual_sum), 1e-10);

    CHECK_EQ(ledger.teacher_forward, 1);  // one frozen pass serves all candidates
    CHECK_EQ(ledger.candidate_forward, 3);
    CHECK_EQ(ledger.candidate_backward, 3);
    CHECK_EQ(ledger.eval_forward, 0);
  }

  SUBCASE("gradients match manually accumulated per-candidate backwards") {
    MiniViT joint_model = teacher.clone();
    MiniViT manual_model = teacher.clone();
    joint_step(teacher, joint_model, fam, batch, dcfg);

    const MiniViT::Output teacher_out = teacher.forward(batch.images);
    for (std::size_t i = 0; i < fam.size(); ++i) {
      TapeScope scope;
      const MiniViT::Output out = manual_model.forward(batch.images, &fam.masks[i]);
      Tensor total;
      auto accumulate = [&](const Tensor& term, double weight) {
        const Tensor weighted = (weight == 1.0) ? term : scale(term, weight);
        total = total.defined() ? add(total, weighted) : weighted;
      };
      accumulate(cross_entropy(out.logits, batch.labels), 1.0);
      accumulate(kl_soft_logits(teacher_out.logits, out.logits, dcfg.gamma), dcfg.alpha);
      accumulate(mse_hidden(teacher_out.hidden, out.hidden), dcfg.beta);
      scope.tape().backward(total);
    }

    // Vectorized reductions split work by buffer alignment, so two model
    // instances can round in different orders; anything beyond rounding
    // noise would mean a candidate's contribution went missing.
    const auto joint_params = joint_model.named_parameters();
    const auto manual_params = manual_model.named_parameters();
    REQUIRE_EQ(joint_params.size(), manual_params.size());
    double worst = 0.0;
    for (std::size_t p = 0; p < joint_params.size(); ++p) {
      const double* gj = joint_params[p].tensor.grad_data();
      const double* gm = manual_params[p].tensor.grad_data();
      REQUIRE((gj != nullptr) == (gm != nullptr));
      if (gj == nullptr) continue;
      for (std::size_t k = 0; k < joint_params[p].tensor.size(); ++k)
        worst = std::max(worst, std::fabs(gj[k] - gm[k]) /
                                    std::max(1.0, std::fabs(gj[k])));
    }
    CHECK_LE(worst, 1e-12);
  }

  SUBCASE("a single-candidate family reproduces the pairwise loss") {
    CandidateFamily one;
    one.targets = {fam.targets[2]};
    one.realized_scales = {fam.realized_scales[2]};
    one.masks = {fam.masks[2]};
    MiniViT shared = teacher.clone();
    const double total = joint_step(teacher, shared, one, batch, dcfg);
    const MiniViT::Output teacher_out = teacher.forward(batch.images);
    const MiniViT::Output out = shared.forward(batch.images, &one.masks[0]);
    CHECK_EQ(total, manual_loss(teacher_out, out, batch.labels, dcfg));
  }

  SUBCASE("zero distillation weights leave pure task loss") {
    DistillConfig plain = dcfg;
    plain.alpha = 0.0;
    plain.beta = 0.0;
    MiniViT shared = teacher.clone();
    const double total = joint_step(teacher, shared, fam, batch, plain);
    double ce_sum = 0.0;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const MiniViT::Output out = shared.forward(batch.images, &fam.masks[i]);
      ce_sum += cross_entropy(out.logits, batch.labels).item();
    }
    CHECK_LE(testutil::rel_err(total, ce_sum), 1e-12);
  }

  SUBCASE("a poisoned weight names the failing candidate") {
    MiniViT shared = teacher.clone();
    for (NamedTensor p : shared.named_parameters())
      if (p.name == "blocks.0.attn.wq") p.tensor.data()[0] = std::nan("");
    const std::string msg = thrown_message<TrainingError>(
        [&] { joint_step(teacher, shared, fam, batch, dcfg); });
    CHECK(msg.find("candidate 0") != std::string::npos);
    CHECK(msg.find("scale") != std::string::npos);
  }

  SUBCASE("an empty family is a contract violation") {
    MiniViT shared = teacher.clone();
    CHECK_THROWS_AS(joint_step(teacher, shared, CandidateFamily{}, batch, dcfg),
                    ContractError);
  }
}

TEST_CASE("joint training over the family") {
  const ModelConfig cfg = testutil::tiny_config();
  const Dataset all = gen_synth(103, testutil::tiny_synth(cfg, 50));
  Rng split_rng(67);
  const Split split = split_dataset(all, 0.2, split_rng);
  Rng rng(71);
  const MiniViT teacher(cfg, rng);
  const CandidateFamily fam = make_family(cfg, nested_masks(cfg));

  SUBCASE("pass ledger counts exactly") {
    DistillConfig dcfg = fast_distill(2, 9);
    MiniViT shared = teacher.clone();
    const JointReport rep = train_joint(teacher, shared, fam, split.train, split.val, dcfg);
    const std::size_t B =
        (split.train.size() + dcfg.batch_size - 1) / dcfg.batch_size;
    const std::size_t VB = (split.val.size() + dcfg.batch_size - 1) / dcfg.batch_size;
    CHECK_EQ(rep.ledger.teacher_forward, 2 * B);
    CHECK_EQ(rep.ledger.candidate_forward, 2 * B * fam.size());
    CHECK_EQ(rep.ledger.candidate_backward, 2 * B * fam.size());
    CHECK_EQ(rep.ledger.eval_forward, 2 * fam.size() * VB);
    CHECK_EQ(rep.ledger.candidate_passes(),
             rep.ledger.candidate_forward + rep.ledger.candidate_backward);
    CHECK_EQ(rep.ledger.training_passes(),
             rep.ledger.teacher_forward + rep.ledger.candidate_passes());
    REQUIRE_EQ(rep.stats.size(), 2);
    REQUIRE_EQ(rep.final_accuracy.size(), fam.size());
    for (std::size_t i = 0; i < fam.size(); ++i)
      CHECK_EQ(rep.final_accuracy[i], rep.stats.back()[i].val_accuracy);
  }

  SUBCASE("same seed, same run; the stream is a pure function of the config") {
    DistillConfig dcfg = fast_distill(2, 13);
    MiniViT a = teacher.clone();
    MiniViT b = teacher.clone();
    const JointReport ra = train_joint(teacher, a, fam, split.train, split.val, dcfg);
    const JointReport rb = train_joint(teacher, b, fam, split.train, split.val, dcfg);
    CHECK(ra.final_accuracy == rb.final_accuracy);
    for (std::size_t e = 0; e < ra.stats.size(); ++e)
      for (std::size_t i = 0; i < fam.size(); ++i)
        CHECK_EQ(ra.stats[e][i].train_loss, rb.stats[e][i].train_loss);
  }

  SUBCASE("zero epochs trains nothing and reports inherited accuracies") {
    DistillConfig dcfg = fast_distill(0, 9);
    MiniViT shared = teacher.clone();
    const JointReport rep = train_joint(teacher, shared, fam, split.train, split.val, dcfg);
    CHECK_EQ(rep.ledger.teacher_forward, 0);
    CHECK_EQ(rep.ledger.candidate_forward, 0);
    CHECK_EQ(rep.ledger.candidate_backward, 0);
    for (std::size_t i = 0; i < fam.size(); ++i) {
      const double inherited =
          evaluate_accuracy(teacher, split.val, dcfg.batch_size, nullptr, &fam.masks[i]);
      CHECK_EQ(rep.final_accuracy[i], inherited);
    }
  }

  SUBCASE("a zero-epoch schedule cannot warm up") {
    DistillConfig dcfg = fast_distill(0, 9);
    dcfg.warmup_epochs = 0.5;
    CHECK_THROWS_AS(dcfg.validate(), ConfigError);
  }

  SUBCASE("non-nested masks are rejected") {
    StructuralMask left = StructuralMask::full(cfg);
    left.heads[0][0] = false;
    StructuralMask right = StructuralMask::full(cfg);
    right.heads[0][1] = false;
    CandidateFamily crossed;
    crossed.targets = {masked_scale(cfg, left), 1.0};
    crossed.realized_scales = crossed.targets;
    crossed.masks = {left, right};
    MiniViT shared = teacher.clone();
    CHECK_THROWS_AS(train_joint(teacher, shared, crossed, split.train, split.val,
                                fast_distill(1, 9)),
                    ContractError);
  }
}

TEST_CASE("pairwise distillation and its ablation toggles") {
  const ModelConfig cfg = testutil::tiny_config();
  const Dataset all = gen_synth(103, testutil::tiny_synth(cfg, 50));
  Rng split_rng(73);
  const Split split = split_dataset(all, 0.2, split_rng);
  Rng rng(79);
  const MiniViT teacher(cfg, rng);
  const StructuralMask small = nested_masks(cfg)[0];

  SUBCASE("an identical student starts with a zero logit gap") {
    const MiniViT copy = teacher.materialize(StructuralMask::full(cfg));
    std::vector<std::size_t> order(32);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const Batch batch = take_batch(all, order, 0, 16);
    const MiniViT::Output a = teacher.forward(batch.images);
    const MiniViT::Output b = copy.forward(batch.images);
    CHECK_EQ(kl_soft_logits(a.logits, b.logits, 1.0).item(), 0.0);
    CHECK_GT(cross_entropy(b.logits, batch.labels).item(), 0.0);
  }

  SUBCASE("ledger arithmetic for one pair") {
    DistillConfig dcfg = fast_distill(2, 19);
    MiniViT student = teacher.materialize(small);
    const PairReport rep = distill_pair(teacher, student, split.train, split.val, dcfg);
    const std::size_t B = (split.train.size() + dcfg.batch_size - 1) / dcfg.batch_size;
    const std::size_t VB = (split.val.size() + dcfg.batch_size - 1) / dcfg.batch_size;
    CHECK_EQ(rep.ledger.teacher_forward, 2 * B);
    CHECK_EQ(rep.ledger.candidate_forward, 2 * B);
    CHECK_EQ(rep.ledger.candidate_backward, 2 * B);
    CHECK_EQ(rep.ledger.eval_forward, 2 * VB);
    CHECK_EQ(rep.final_accuracy, rep.epoch_val_accuracy.back());
  }

  SUBCASE("plain pretraining uses no teacher passes") {
    DistillConfig dcfg = fast_distill(2, 19);
    MiniViT model = teacher.clone();
    const PairReport rep = pretrain_teacher(model, split.train, split.val, dcfg);
    CHECK_EQ(rep.ledger.teacher_forward, 0);
    CHECK_GT(rep.ledger.candidate_forward, 0);
    CHECK_GE(rep.final_accuracy, 0.0);
    CHECK_LE(rep.final_accuracy, 1.0);
  }

  SUBCASE("each loss term can run alone, but not none") {
    for (int variant = 0; variant < 3; ++variant) {
      DistillConfig dcfg = fast_distill(1, 19);
      dcfg.use_ce = variant == 0;
      dcfg.use_logit = variant == 1;
      dcfg.use_feat = variant == 2;
      MiniViT student = teacher.materialize(small);
      const PairReport rep = distill_pair(teacher, student, split.train, split.val, dcfg);
      CHECK_GE(rep.final_accuracy, 0.0);
      CHECK_LE(rep.final_accuracy, 1.0);
    }
    DistillConfig none = fast_distill(1, 19);
    none.use_ce = none.use_logit = none.use_feat = false;
    CHECK_THROWS_AS(none.validate(), ConfigError);
  }

  SUBCASE("zero-epoch distillation reports the inherited accuracy") {
    DistillConfig dcfg = fast_distill(0, 19);
    MiniViT student = teacher.materialize(small);
    const PairReport rep = distill_pair(teacher, student, split.train, split.val, dcfg);
    StructuralMask m = small;
    const double inherited = evaluate_accuracy(teacher, split.val, dcfg.batch_size, nullptr, &m);
    CHECK_EQ(rep.final_accuracy, inherited);
    CHECK_EQ(rep.ledger.candidate_forward, 0);
  }
}

TEST_CASE("the manual sweep is exactly two pairwise runs per candidate") {
  const ModelConfig cfg = testutil::tiny_config();
  const Dataset all = gen_synth(103, testutil::tiny_synth(cfg, 50));
  Rng split_rng(83);
  const Split split = split_dataset(all, 0.2, split_rng);
  Rng rng(89);

  // Pretrain briefly so the teacher is a meaningful distillation source.
  MiniViT teacher(cfg, rng);
  pretrain_teacher(teacher, split.train, split.val, fast_distill(1, 29));

  const std::vector<StructuralMask> masks = nested_masks(cfg);
  CandidateFamily fam = make_family(cfg, {masks[0], masks[1]});
  const DistillConfig dcfg = fast_distill(1, 31);

  SUBCASE("single eligible candidate reproduces the two-leg recipe bit for bit") {
    const double student_scale =
        0.5 * (fam.realized_scales[0] + fam.realized_scales[1]);
    const ManualSweep sweep =
        sweep_manual(teacher, fam, split.train, split.val, dcfg, student_scale);
    REQUIRE_EQ(sweep.rows.size(), 1);
    CHECK_EQ(sweep.rows[0].candidate_index, 1);
    CHECK_EQ(sweep.rows[0].scale, fam.realized_scales[1]);

    MiniViT assistant = teacher.materialize(fam.masks[1]);
    const PairReport up = distill_pair(teacher, assistant, split.train, split.val, dcfg);
    MiniViT student = assistant.materialize(restrict_mask(fam.masks[0], fam.masks[1]));
    const PairReport down = distill_pair(assistant, student, split.train, split.val, dcfg);

    CHECK_EQ(sweep.rows[0].ta_accuracy, up.final_accuracy);
    CHECK_EQ(sweep.rows[0].student_accuracy, down.final_accuracy);
    CHECK_EQ(sweep.ledger.teacher_forward, up.ledger.teacher_forward + down.ledger.teacher_forward);
    CHECK_EQ(sweep.ledger.candidate_forward,
             up.ledger.candidate_forward + down.ledger.candidate_forward);
    CHECK_EQ(sweep.ledger.candidate_backward,
             up.ledger.candidate_backward + down.ledger.candidate_backward);
    CHECK_EQ(sweep.ledger.eval_forward, up.ledger.eval_forward + down.ledger.eval_forward);
  }

  SUBCASE("every candidate above the floor gets a row") {
    const ManualSweep sweep = sweep_manual(teacher, fam, split.train, split.val, dcfg, 0.01);
    CHECK_EQ(sweep.rows.size(), 2);
    CHECK_LT(sweep.rows[0].scale, sweep.rows[1].scale);
  }

  SUBCASE("nothing eligible is a selection failure") {
    CHECK_THROWS_AS(sweep_manual(teacher, fam, split.train, split.val, dcfg, 1.0),
                    SelectionError);
  }
}

TEST_CASE("run configs round-trip through JSON") {
  SUBCASE("explicit values survive") {
    RunConfig cfg = pipe_config("/tmp/amd-roundtrip", 7);
    cfg.lambda = 0.5;
    cfg.chain_steps = 2;
    cfg.student_init = "joint";
    cfg.prune_tolerance = 0.03;
    cfg.distill.alpha = 0.4;
    cfg.distill.use_feat = false;
    const RunConfig back = run_config_from_json(run_config_to_json(cfg));
    CHECK_EQ(back.model.embed_dim, cfg.model.embed_dim);
    CHECK_EQ(back.model.num_heads, cfg.model.num_heads);
    CHECK_EQ(back.distill.alpha, cfg.distill.alpha);
    CHECK_EQ(back.distill.use_feat, cfg.distill.use_feat);
    CHECK_EQ(back.distill.epochs, cfg.distill.epochs);
    CHECK_EQ(back.student_scale, cfg.student_scale);
    CHECK_EQ(back.grid_steps, cfg.grid_steps);
    CHECK_EQ(back.prune_tolerance, cfg.prune_tolerance);
    CHECK_EQ(back.chain_steps, cfg.chain_steps);
    REQUIRE(back.lambda.has_value());
    CHECK_EQ(*back.lambda, 0.5);
    CHECK_EQ(back.data, cfg.data);
    CHECK_EQ(back.synth.num_samples, cfg.synth.num_samples);
    CHECK_EQ(back.synth.noise_amplitude, cfg.synth.noise_amplitude);
    CHECK_EQ(back.val_fraction, cfg.val_fraction);
    CHECK_EQ(back.student_init, cfg.student_init);
    CHECK_EQ(back.out_dir, cfg.out_dir);
    CHECK_EQ(back.seed, cfg.seed);
  }
  SUBCASE("an unset lambda serializes as null and comes back unset") {
    RunConfig cfg = pipe_config("/tmp/amd-roundtrip", 7);
    const std::string text = run_config_to_json(cfg);
    CHECK(nlohmann::json::parse(text)["lambda"].is_null());
    CHECK_FALSE(run_config_from_json(text).lambda.has_value());
  }
  SUBCASE("unknown keys and malformed text are config errors") {
    CHECK_THROWS_AS(run_config_from_json("{\"grid_stepz\": 4}"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json("{\"model\": {\"embed\": 4}}"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json("{nope"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json("{\"grid_steps\": \"many\"}"), ConfigError);
  }
  SUBCASE("a missing file is an io error") {
    CHECK_THROWS_AS(run_config_from_file("/nonexistent/amd.json"), IoError);
  }
  SUBCASE("validation rules") {
    auto expect_config_error = [](auto mutate) {
      RunConfig cfg = pipe_config("/tmp/amd-validate", 7);
      mutate(cfg);
      CHECK_THROWS_AS(cfg.validate(), ConfigError);
    };
    expect_config_error([](RunConfig& c) { c.student_scale = 1.0; });
    expect_config_error([](RunConfig& c) { c.student_scale = 0.0; });
    expect_config_error([](RunConfig& c) { c.grid_steps = 0; });
    expect_config_error([](RunConfig& c) { c.lambda = -1.0; });
    expect_config_error([](RunConfig& c) { c.importance_batches = 0; });
    expect_config_error([](RunConfig& c) { c.val_fraction = 0.0; });
    expect_config_error([](RunConfig& c) { c.student_init = "teacher"; });
    expect_config_error([](RunConfig& c) { c.out_dir = ""; });
    expect_config_error([](RunConfig& c) { c.data = "mnist"; });
    expect_config_error([](RunConfig& c) { c.data = "cifar10:"; });
    expect_config_error([](RunConfig& c) { c.synth.image_size = 8; });
    expect_config_error([](RunConfig& c) { c.synth.num_classes = 7; });
  }
}

TEST_CASE("the automatic pipeline end to end") {
  testutil::TempDir tmp("pipeline");
  const RunConfig cfg = pipe_config(tmp.file("run1"), 3);
  const PipelineResult res = run_pipeline(cfg);
  const Split split = load_run_data(cfg);
  const std::size_t B =
      (split.train.size() + cfg.distill.batch_size - 1) / cfg.distill.batch_size;

  SUBCASE("artifacts land in the output directory") {
    namespace fs = std::filesystem;
    for (const char* name : {kTeacherCkpt, kImportanceCkpt, kJointCkpt, kAssistantCkpt,
                             kStudentCkpt, kReportJson, kMetricsCsv})
      CHECK(fs::exists(fs::path(cfg.out_dir) / name));
  }

  SUBCASE("shapes and the scoring table are internally consistent") {
    REQUIRE_EQ(res.candidate_scales.size(), cfg.grid_steps);
    REQUIRE_EQ(res.candidate_accuracy.size(), cfg.grid_steps);
    std::size_t eligible = 0;
    for (double s : res.candidate_scales) eligible += s > cfg.student_scale ? 1 : 0;
    REQUIRE_EQ(res.npsd_table.size(), eligible);

    std::size_t chosen_rows = 0;
    const SelectOutcome::TableRow* best = nullptr;
    for (const auto& row : res.npsd_table) {
      CHECK_EQ(row.scale, res.candidate_scales[row.candidate_index]);
      CHECK_EQ(row.accuracy, res.candidate_accuracy[row.candidate_index]);
      CHECK_EQ(row.score, npsd(res.teacher_accuracy, 1.0, row.accuracy, row.scale));
      chosen_rows += row.chosen ? 1 : 0;
      if (best == nullptr || row.score > best->score ||
          (row.score == best->score && row.scale < best->scale))
        best = &row;
    }
    CHECK_EQ(chosen_rows, 1);
    REQUIRE_EQ(res.chain.size(), 1);
    CHECK_EQ(res.chain[0].record.candidate_index, best->candidate_index);
    CHECK(best->chosen);
    CHECK_FALSE(res.kd_student_accuracy.has_value());
    CHECK_GE(res.student_accuracy, 0.0);
    CHECK_LE(res.student_accuracy, 1.0);
  }

  SUBCASE("ledgers add up exactly") {
    // Pretraining: one forward/backward per batch, no teacher, one eval
    // sweep per epoch. The automatic cost: the joint stage plus the final
    // pairwise stage.
    const std::size_t E = cfg.distill.epochs;
    const std::size_t m = cfg.grid_steps;
    CHECK_EQ(res.pretrain_ledger.teacher_forward, 0);
    CHECK_EQ(res.pretrain_ledger.candidate_forward, E * B);
    CHECK_EQ(res.pretrain_ledger.candidate_backward, E * B);
    CHECK_EQ(res.distill_ledger.teacher_forward, E * B + E * B);
    CHECK_EQ(res.distill_ledger.candidate_forward, E * B * m + E * B);
    CHECK_EQ(res.distill_ledger.candidate_backward, E * B * m + E * B);
  }

  SUBCASE("saved checkpoints evaluate to the reported numbers") {
    CHECK_EQ(stage_eval(cfg, tmp.file("run1") + "/" + kTeacherCkpt), res.teacher_accuracy);
    CHECK_EQ(stage_eval(cfg, tmp.file("run1") + "/" + kStudentCkpt), res.student_accuracy);
    const Checkpoint ta = load_checkpoint(tmp.file("run1") + "/" + kAssistantCkpt);
    REQUIRE(ta.find("scale") != nullptr);
    CHECK_EQ(ta.find("scale")->data()[0], res.chain.back().record.scale);
    CHECK_EQ(ta.find("accuracy")->data()[0], res.chain.back().record.accuracy);
    REQUIRE(ta.find_mask("ta") != nullptr);
    REQUIRE(ta.find_mask("student") != nullptr);
    CHECK_EQ(masked_scale(cfg.model, *ta.find_mask("ta")), res.chain.back().record.scale);
    const Checkpoint joint = load_checkpoint(tmp.file("run1") + "/" + kJointCkpt);
    for (std::size_t k = 0; k < cfg.grid_steps; ++k)
      CHECK(joint.find_mask("candidate." + std::to_string(k)) != nullptr);
  }

  SUBCASE("metrics, report, and re-export agree byte for byte") {
    const std::string csv_path = tmp.file("run1") + "/" + kMetricsCsv;
    const std::string report_path = tmp.file("run1") + "/" + kReportJson;
    const std::string csv_bytes = read_file(csv_path);
    CHECK_EQ(csv_bytes, metrics_csv(res.metrics));
    CHECK_EQ(metrics_csv(metrics_from_report_file(report_path)), csv_bytes);
    const std::string rexport = tmp.file("metrics2.csv");
    export_metrics(report_path, rexport);
    CHECK_EQ(read_file(rexport), csv_bytes);

    std::size_t lines = 0;
    for (char ch : csv_bytes) lines += ch == '\n' ? 1 : 0;
    CHECK_EQ(lines, res.metrics.size() + 1);

    bool saw_npsd = false, saw_chosen = false, saw_teacher_accuracy = false;
    for (const MetricsRow& row : res.metrics) {
      if (row.stage == "select" && row.metric == "npsd") saw_npsd = true;
      if (row.stage == "select" && row.metric == "chosen_scale") {
        saw_chosen = true;
        CHECK_EQ(row.value, res.chain.back().record.scale);
      }
      if (row.stage == "pretrain-teacher" && row.metric == "accuracy") {
        saw_teacher_accuracy = true;
        CHECK_EQ(row.value, res.teacher_accuracy);
      }
    }
    CHECK(saw_npsd);
    CHECK(saw_chosen);
    CHECK(saw_teacher_accuracy);

    const nlohmann::json report = nlohmann::json::parse(read_file(report_path));
    CHECK_EQ(report.at("kind").get<std::string>(), "pipeline");
    CHECK_EQ(report.at("npsd_table").size(), res.npsd_table.size());
    CHECK_EQ(report.at("chain").size(), 1);
    CHECK(report.at("kd_student_accuracy").is_null());
    CHECK_EQ(report.at("student_accuracy").get<double>(), res.student_accuracy);
  }

  SUBCASE("reruns with the same config are bit-identical") {
    RunConfig again = cfg;
    again.out_dir = tmp.file("run1-again");
    const PipelineResult res2 = run_pipeline(again);
    CHECK_EQ(res2.teacher_accuracy, res.teacher_accuracy);
    CHECK(res2.candidate_accuracy == res.candidate_accuracy);
    CHECK_EQ(res2.student_accuracy, res.student_accuracy);
    CHECK_EQ(read_file(again.out_dir + "/" + kMetricsCsv),
             read_file(tmp.file("run1") + "/" + kMetricsCsv));
  }

  SUBCASE("a manual sweep over the same directory reuses the teacher") {
    RunConfig scfg = cfg;
    const SweepResult sres = run_sweep(scfg);
    CHECK_EQ(sres.teacher_accuracy, res.teacher_accuracy);
    CHECK_EQ(sres.pretrain_ledger.candidate_forward, 0);  // nothing retrained
    std::size_t eligible = 0;
    for (double s : res.candidate_scales) eligible += s > cfg.student_scale ? 1 : 0;
    REQUIRE_EQ(sres.rows.size(), eligible);
    for (std::size_t i = 0; i < sres.rows.size(); ++i) {
      CHECK_EQ(sres.npsd_scores[i],
               npsd(sres.teacher_accuracy, 1.0, sres.rows[i].ta_accuracy, sres.rows[i].scale));
    }
    // Tiny validation splits quantize accuracy, so ties can make the rank
    // correlation legitimately undefined; demand agreement either way.
    std::vector<double> students;
    for (const SweepRow& r : sres.rows) students.push_back(r.student_accuracy);
    const std::optional<double> expect =
        sres.rows.size() >= 2 ? spearman(sres.npsd_scores, students) : std::nullopt;
    CHECK(sres.npsd_student_spearman == expect);
    if (sres.npsd_student_spearman.has_value()) {
      CHECK_GE(*sres.npsd_student_spearman, -1.0);
      CHECK_LE(*sres.npsd_student_spearman, 1.0);
    }

    const nlohmann::json report =
        nlohmann::json::parse(read_file(tmp.file("run1") + "/" + kReportJson));
    CHECK_EQ(report.at("kind").get<std::string>(), "sweep");
    CHECK_EQ(report.at("rows").size(), sres.rows.size());
    CHECK_EQ(report.at("teacher_accuracy").get<double>(), sres.teacher_accuracy);
  }
}

TEST_CASE("pipeline variants") {
  SUBCASE("a zero-length chain is the plain distillation baseline") {
    testutil::TempDir tmp("chain0");
    RunConfig cfg = pipe_config(tmp.file("out"), 3);
    cfg.chain_steps = 0;
    const PipelineResult res = run_pipeline(cfg);
    CHECK(res.candidate_accuracy.empty());
    CHECK(res.npsd_table.empty());
    CHECK(res.chain.empty());
    CHECK_FALSE(res.kd_student_accuracy.has_value());
    namespace fs = std::filesystem;
    CHECK_FALSE(fs::exists(fs::path(cfg.out_dir) / kJointCkpt));
    CHECK_FALSE(fs::exists(fs::path(cfg.out_dir) / kAssistantCkpt));
    CHECK(fs::exists(fs::path(cfg.out_dir) / kStudentCkpt));
    const Split split = load_run_data(cfg);
    const std::size_t B =
        (split.train.size() + cfg.distill.batch_size - 1) / cfg.distill.batch_size;
    const std::size_t E = cfg.distill.epochs;
    CHECK_EQ(res.distill_ledger.teacher_forward, E * B);  // only the final stage
    CHECK_EQ(res.distill_ledger.candidate_forward, E * B);
    const nlohmann::json report =
        nlohmann::json::parse(read_file(cfg.out_dir + "/" + kReportJson));
    CHECK(report.at("chain").empty());
    CHECK(report.at("npsd_table").empty());
  }

  SUBCASE("a second chain step re-runs joint training under the first pick") {
    testutil::TempDir tmp("chain2");
    RunConfig base = pipe_config(tmp.file("one"), 5);
    base.student_scale = 0.2;
    base.grid_steps = 4;
    const PipelineResult one = run_pipeline(base);
    REQUIRE_EQ(one.chain.size(), 1);

    RunConfig deeper = base;
    deeper.out_dir = tmp.file("two");
    deeper.chain_steps = 2;
    const PipelineResult two = run_pipeline(deeper);
    REQUIRE_EQ(two.chain.size(), 2);
    CHECK_EQ(two.chain[0].record.candidate_index, one.chain[0].record.candidate_index);
    CHECK_LT(two.chain[1].record.scale, two.chain[0].record.scale);
    CHECK_GT(two.chain[1].record.scale, deeper.student_scale);

    // The extra round retrains exactly the candidates below the first pick.
    std::size_t m_sub = 0;
    for (double s : one.candidate_scales) m_sub += s < one.chain[0].record.scale ? 1 : 0;
    const Split split = load_run_data(base);
    const std::size_t B =
        (split.train.size() + base.distill.batch_size - 1) / base.distill.batch_size;
    const std::size_t E = base.distill.epochs;
    CHECK_EQ(two.distill_ledger.candidate_forward - one.distill_ledger.candidate_forward,
             E * B * m_sub);
    CHECK_EQ(two.distill_ledger.candidate_backward - one.distill_ledger.candidate_backward,
             E * B * m_sub);

    bool saw_round_two = false;
    for (const MetricsRow& row : two.metrics)
      if (row.stage == "select" && row.metric == "chain_accuracy" && row.epoch == 1)
        saw_round_two = true;
    CHECK(saw_round_two);

    // The assistant checkpoint holds the innermost pick.
    const Checkpoint ta = load_checkpoint(deeper.out_dir + "/" + kAssistantCkpt);
    CHECK_EQ(ta.find("scale")->data()[0], two.chain.back().record.scale);
  }

  SUBCASE("the two-segment score pays for one extra probe run") {
    testutil::TempDir tmp("lambda");
    RunConfig plain = pipe_config(tmp.file("plain"), 3);
    const PipelineResult base = run_pipeline(plain);

    RunConfig weighted = plain;
    weighted.out_dir = tmp.file("weighted");
    weighted.lambda = 1.0;
    const PipelineResult res = run_pipeline(weighted);
    REQUIRE(res.kd_student_accuracy.has_value());
    for (const auto& row : res.npsd_table) {
      CHECK_EQ(row.score,
               lambda_npsd(res.teacher_accuracy, 1.0, row.accuracy, row.scale,
                           *res.kd_student_accuracy, weighted.student_scale, 1.0));
    }
    const Split split = load_run_data(plain);
    const std::size_t B =
        (split.train.size() + plain.distill.batch_size - 1) / plain.distill.batch_size;
    const std::size_t E = plain.distill.epochs;
    CHECK_EQ(res.distill_ledger.teacher_forward - base.distill_ledger.teacher_forward, E * B);
    CHECK_EQ(res.distill_ledger.candidate_forward - base.distill_ledger.candidate_forward,
             E * B);
    const nlohmann::json report =
        nlohmann::json::parse(read_file(weighted.out_dir + "/" + kReportJson));
    CHECK_EQ(report.at("kd_student_accuracy").get<double>(), *res.kd_student_accuracy);
  }

  SUBCASE("zero-epoch runs only shuffle weights around") {
    testutil::TempDir tmp("zero");
    RunConfig cfg = pipe_config(tmp.file("ta"), 3);
    cfg.distill.epochs = 0;
    cfg.distill.warmup_epochs = 0.0;
    const PipelineResult res = run_pipeline(cfg);
    CHECK_EQ(res.distill_ledger.candidate_forward, 0);
    CHECK_EQ(res.distill_ledger.candidate_backward, 0);
    CHECK_EQ(res.distill_ledger.teacher_forward, 0);
    CHECK_GT(res.distill_ledger.eval_forward, 0);

    // With no training, every candidate accuracy is the teacher evaluated
    // under that candidate's mask.
    const Split split = load_run_data(cfg);
    const MiniViT teacher = load_model(cfg.out_dir + "/" + kTeacherCkpt);
    const Checkpoint joint = load_checkpoint(cfg.out_dir + "/" + kJointCkpt);
    for (std::size_t k = 0; k < res.candidate_accuracy.size(); ++k) {
      const StructuralMask* mask = joint.find_mask("candidate." + std::to_string(k));
      REQUIRE(mask != nullptr);
      CHECK_EQ(res.candidate_accuracy[k],
               evaluate_accuracy(teacher, split.val, cfg.distill.batch_size, nullptr, mask));
    }

    // Both student initializations collapse to the same weights at depth
    // one, so their untouched evaluations coincide.
    RunConfig from_joint = cfg;
    from_joint.out_dir = tmp.file("joint");
    from_joint.student_init = "joint";
    const PipelineResult res2 = run_pipeline(from_joint);
    CHECK_EQ(res2.student_accuracy, res.student_accuracy);
  }

  SUBCASE("a nine-cell grid exposes eight assistants above a 0.1 student") {
    testutil::TempDir tmp("nine");
    RunConfig cfg = pipe_config(tmp.file("out"), 3);
    cfg.student_scale = 0.1;
    cfg.grid_steps = 9;
    cfg.distill.epochs = 1;
    cfg.distill.warmup_epochs = 0.25;
    const PipelineResult res = run_pipeline(cfg);
    REQUIRE_EQ(res.candidate_scales.size(), 9);
    CHECK_EQ(res.npsd_table.size(), 8);  // the student-scale cell is not an assistant
    for (const auto& row : res.npsd_table) CHECK_GT(row.scale, 0.1);
  }

  SUBCASE("a sweep with one eligible candidate reports no rank correlation") {
    testutil::TempDir tmp("sweep1");
    RunConfig cfg = pipe_config(tmp.file("out"), 3);
    cfg.student_scale = 0.6;
    cfg.grid_steps = 2;  // cells at 0.6 and 0.8; only 0.8 is eligible
    const SweepResult res = run_sweep(cfg);
    REQUIRE_EQ(res.rows.size(), 1);
    CHECK_FALSE(res.npsd_student_spearman.has_value());
    CHECK_GT(res.pretrain_ledger.candidate_forward, 0);  // fresh directory, fresh teacher
    const nlohmann::json report =
        nlohmann::json::parse(read_file(cfg.out_dir + "/" + kReportJson));
    CHECK(report.at("spearman_npsd_student").is_null());
    CHECK(read_file(cfg.out_dir + "/" + kMetricsCsv).find("spearman") == std::string::npos);
  }

  SUBCASE("stage failures carry the stage name") {
    testutil::TempDir tmp("fail");
    RunConfig cfg = pipe_config(tmp.file("out"), 3);
    cfg.data = "cifar10:" + tmp.file("missing-data");
    const std::string msg =
        thrown_message<IoError>([&] { run_pipeline(cfg); });
    CHECK(msg.find("pretrain-teacher") != std::string::npos);
  }

  SUBCASE("standalone selection refuses a zero-length chain") {
    testutil::TempDir tmp("sel0");
    RunConfig cfg = pipe_config(tmp.file("out"), 3);
    cfg.chain_steps = 0;
    CHECK_THROWS_AS(stage_select(cfg), ContractError);
  }
}
