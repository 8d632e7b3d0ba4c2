// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "amd/optim.hpp"
#include "amd/runtime.hpp"
#include "amd/tensor.hpp"

namespace amd {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 8;
  std::size_t mlp_hidden = 128;
  std::size_t num_classes = 10;

  void validate() const;  // ConfigError on inconsistent settings

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t seq_len() const { return num_patches() + 1; }  // + class token
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }

  bool operator==(const ModelConfig&) const = default;
};

// Keep/remove decision for every attention head and MLP hidden unit of the
// full architecture. true = kept.
struct StructuralMask {
  std::vector<std::vector<bool>> heads;
  std::vector<std::vector<bool>> units;

  static StructuralMask full(const ModelConfig& cfg);

  // MaskError unless sizes match cfg and every layer keeps at least one head
  // and one unit.
  void validate(const ModelConfig& cfg) const;

  // True when everything kept here is also kept in other (same sizes
  // required).
  bool subset_of(const StructuralMask& other) const;

  std::size_t kept_heads(std::size_t layer) const;
  std::size_t kept_units(std::size_t layer) const;
  std::size_t total_kept_heads() const;
  std::size_t total_kept_units() const;

  bool operator==(const StructuralMask&) const = default;
};

// Parameters removed per pruned attention head (its query/key/value columns
// and output rows) and per pruned MLP hidden unit (one column of the first
// map, one row of the second). Attention and MLP maps carry no biases, so
// these counts are exact.
std::size_t head_param_count(const ModelConfig& cfg);
std::size_t unit_param_count(const ModelConfig& cfg);

// Whole-model parameter counts, including the never-pruned embeddings,
// norms, and classifier (reporting only).
std::size_t full_param_count(const ModelConfig& cfg);
std::size_t masked_param_count(const ModelConfig& cfg, const StructuralMask& mask);

struct ParamCounts {
  std::size_t active_prunable;
  std::size_t total_prunable;
};

// Prunable-pool accounting: heads and MLP units are the only prunable
// structures. Scale S is defined as active_prunable / total_prunable.
ParamCounts param_counts(const ModelConfig& cfg, const StructuralMask& mask);
double masked_scale(const ModelConfig& cfg, const StructuralMask& mask);

// Re-index `inner` (a mask over the full architecture) relative to the
// structures `outer` keeps, for materializing a small model from an already
// materialized larger one. inner must be nested inside outer.
StructuralMask restrict_mask(const StructuralMask& inner, const StructuralMask& outer);

// Pre-norm vision transformer over square images flattened channel-major to
// [batch, channels * image * image]. Class-token pooling feeds the
// classifier head. After structural pruning the per-layer head and unit
// counts may differ from the nominal config; head width never changes.
class MiniViT {
 public:
  MiniViT(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::size_t>& layer_heads() const { return layer_heads_; }
  const std::vector<std::size_t>& layer_units() const { return layer_units_; }

  // Stable name -> tensor view of every parameter (order is fixed).
  std::vector<NamedTensor> named_parameters() const;
  std::size_t parameter_count() const;

  struct Output {
    Tensor logits;  // [batch, classes]
    Tensor hidden;  // [batch * seq, embed], after the final normalization
  };

  // mask == nullptr runs the model as built; otherwise masked heads and
  // units are silenced in place (their parameters receive no gradient).
  Output forward(const Tensor& images, const StructuralMask* mask = nullptr) const;

  // Forward with caller-owned multiplicative gate tensors, one per layer
  // ([heads] and [units]); gradients w.r.t. the gates measure how much each
  // structure matters to the loss.
  Output forward_with_gates(const Tensor& images, const std::vector<Tensor>& head_gates,
                            const std::vector<Tensor>& unit_gates) const;

  // Deep copy with masked heads/units physically removed. Logits agree with
  // the masked forward of the source model to rounding error.
  MiniViT materialize(const StructuralMask& mask) const;

  // Deep copy (parameters are otherwise shared between copies).
  MiniViT clone() const;

  // Rebuild from stored tensors; per-layer sizes come from the shapes.
  static MiniViT from_parameters(const ModelConfig& cfg,
                                 const std::vector<NamedTensor>& params);

  // [batch, channels * image * image] -> [batch * patches, patch_dim].
  Tensor patchify(const Tensor& images) const;

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, w2;
  };

  MiniViT() = default;

  void check_mask_fits(const StructuralMask& mask) const;
  Output forward_impl(const Tensor& images, const std::vector<Tensor>& head_gates,
                      const std::vector<Tensor>& unit_gates, bool gate_units) const;

  ModelConfig cfg_;
  std::vector<std::size_t> layer_heads_;
  std::vector<std::size_t> layer_units_;
  Tensor patch_weight_, patch_bias_;
  Tensor cls_token_, pos_embed_;
  std::vector<Block> blocks_;
  Tensor final_gain_, final_bias_;
  Tensor head_weight_, head_bias_;
};

}  // namespace amd
