// SPDX-License-Identifier: Apache-2.0
//
// Hot-path benchmarks: raw GEMM, tape-backed training steps, and the gated
// versus materialized forward paths that dominate pipeline runtime.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "amd/dataset.hpp"
#include "amd/distill.hpp"
#include "amd/model.hpp"
#include "amd/ops.hpp"
#include "amd/pruning.hpp"
#include "amd/runtime.hpp"
#include "amd/tensor.hpp"

namespace {

using namespace amd;

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, bool grad) {
  std::vector<double> v(rows * cols);
  for (double& e : v) e = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({rows, cols}, std::move(v), grad);
}

void bench_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_matrix(rng, n, n, false);
  const Tensor b = random_matrix(rng, n, n, false);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(bench_matmul)->Arg(64)->Arg(128)->Arg(256);

void bench_matmul_backward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor a = random_matrix(rng, n, n, true);
  Tensor b = random_matrix(rng, n, n, true);
  const Tensor ones_l = Tensor::full({1, n}, 1.0);
  const Tensor ones_r = Tensor::full({n, 1}, 1.0);
  for (auto _ : state) {
    TapeScope scope;
    Tensor loss = matmul(matmul(ones_l, matmul(a, b)), ones_r);
    scope.tape().backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * 6 * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(bench_matmul_backward)->Arg(64)->Arg(128);

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 64;
  cfg.num_layers = 4;
  cfg.num_heads = 8;
  cfg.mlp_hidden = 128;
  cfg.num_classes = 10;
  return cfg;
}

Batch bench_batch(const ModelConfig& cfg, std::size_t batch_size) {
  SynthConfig sc;
  sc.num_samples = batch_size;
  sc.num_classes = cfg.num_classes;
  sc.image_size = cfg.image_size;
  sc.channels = cfg.channels;
  const Dataset data = gen_synth(7, sc);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return take_batch(data, order, 0, batch_size);
}

StructuralMask half_mask(const ModelConfig& cfg) {
  ImportanceScores scores;
  scores.head_params = head_param_count(cfg);
  scores.unit_params = unit_param_count(cfg);
  Rng rng(11);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    scores.heads.emplace_back();
    scores.units.emplace_back();
    for (std::size_t h = 0; h < cfg.num_heads; ++h) scores.heads.back().push_back(rng.uniform());
    for (std::size_t u = 0; u < cfg.mlp_hidden; ++u) scores.units.back().push_back(rng.uniform());
  }
  return prune_to_scale(cfg, scores, 0.5, 0.02);
}

void bench_forward_full(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(3);
  const MiniViT model(cfg, rng);
  const Batch batch = bench_batch(cfg, 32);
  for (auto _ : state) {
    MiniViT::Output out = model.forward(batch.images);
    benchmark::DoNotOptimize(out.logits.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(bench_forward_full);

// Same submodel expressed two ways: gate columns inside the shared weights,
// or slice the weights into a dense standalone student.
void bench_forward_gated_half(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(4);
  const MiniViT model(cfg, rng);
  const StructuralMask mask = half_mask(cfg);
  const Batch batch = bench_batch(cfg, 32);
  for (auto _ : state) {
    MiniViT::Output out = model.forward(batch.images, &mask);
    benchmark::DoNotOptimize(out.logits.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(bench_forward_gated_half);

void bench_forward_materialized_half(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(5);
  const MiniViT model(cfg, rng);
  const MiniViT student = model.materialize(half_mask(cfg));
  const Batch batch = bench_batch(cfg, 32);
  for (auto _ : state) {
    MiniViT::Output out = student.forward(batch.images);
    benchmark::DoNotOptimize(out.logits.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(bench_forward_materialized_half);

void bench_joint_step(benchmark::State& state) {
  const auto candidates = static_cast<std::size_t>(state.range(0));
  const ModelConfig cfg = bench_config();
  Rng rng(6);
  Rng tr = rng.fork(1), sr = rng.fork(2);
  const MiniViT teacher(cfg, tr);
  MiniViT shared(cfg, sr);

  ImportanceScores scores;
  scores.head_params = head_param_count(cfg);
  scores.unit_params = unit_param_count(cfg);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    scores.heads.emplace_back();
    scores.units.emplace_back();
    for (std::size_t h = 0; h < cfg.num_heads; ++h) scores.heads.back().push_back(rng.uniform());
    for (std::size_t u = 0; u < cfg.mlp_hidden; ++u) scores.units.back().push_back(rng.uniform());
  }
  const CandidateFamily family =
      prune_to_grid(cfg, scores, build_grid(1.0, 0.1, candidates), 0.02);
  const Batch batch = bench_batch(cfg, 32);
  DistillConfig dcfg;

  for (auto _ : state) {
    const double loss = joint_step(teacher, shared, family, batch, dcfg);
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(candidates));
}
BENCHMARK(bench_joint_step)->Arg(3)->Arg(9);

void bench_importance(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(8);
  const MiniViT model(cfg, rng);
  SynthConfig sc;
  sc.num_samples = 128;
  sc.num_classes = cfg.num_classes;
  sc.image_size = cfg.image_size;
  sc.channels = cfg.channels;
  const Dataset data = gen_synth(9, sc);
  for (auto _ : state) {
    ImportanceScores scores = compute_importance(model, data, 32, 4);
    benchmark::DoNotOptimize(scores.heads.data());
  }
}
BENCHMARK(bench_importance);

}  // namespace

BENCHMARK_MAIN();
