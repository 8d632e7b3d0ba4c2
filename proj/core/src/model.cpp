// SPDX-License-Identifier: Apache-2.0
#include "amd/model.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "amd/errors.hpp"
#include "amd/ops.hpp"

namespace amd {

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 ||
      num_layers == 0 || num_heads == 0 || mlp_hidden == 0) {
    throw ConfigError("model config: every extent must be positive");
  }
  if (num_classes < 2) throw ConfigError("model config: need at least two classes");
  if (patch_size > image_size || image_size % patch_size != 0) {
    throw ConfigError("model config: patch size " + std::to_string(patch_size) +
                      " does not tile image size " + std::to_string(image_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
}

StructuralMask StructuralMask::full(const ModelConfig& cfg) {
  StructuralMask m;
  m.heads.assign(cfg.num_layers, std::vector<bool>(cfg.num_heads, true));
  m.units.assign(cfg.num_layers, std::vector<bool>(cfg.mlp_hidden, true));
  return m;
}

void StructuralMask::validate(const ModelConfig& cfg) const {
  if (heads.size() != cfg.num_layers || units.size() != cfg.num_layers) {
    throw MaskError("mask covers " + std::to_string(heads.size()) + "/" +
                    std::to_string(units.size()) + " layers, model has " +
                    std::to_string(cfg.num_layers));
  }
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (heads[l].size() != cfg.num_heads) {
      throw MaskError("mask layer " + std::to_string(l) + " lists " +
                      std::to_string(heads[l].size()) + " heads, model has " +
                      std::to_string(cfg.num_heads));
    }
    if (units[l].size() != cfg.mlp_hidden) {
      throw MaskError("mask layer " + std::to_string(l) + " lists " +
                      std::to_string(units[l].size()) + " units, model has " +
                      std::to_string(cfg.mlp_hidden));
    }
    if (kept_heads(l) == 0) {
      throw MaskError("mask removes every head of layer " + std::to_string(l));
    }
    if (kept_units(l) == 0) {
      throw MaskError("mask removes every unit of layer " + std::to_string(l));
    }
  }
}

bool StructuralMask::subset_of(const StructuralMask& other) const {
  if (heads.size() != other.heads.size() || units.size() != other.units.size()) {
    throw MaskError("subset check across masks of different depth");
  }
  for (std::size_t l = 0; l < heads.size(); ++l) {
    if (heads[l].size() != other.heads[l].size() ||
        units[l].size() != other.units[l].size()) {
      throw MaskError("subset check across masks of different layer widths");
    }
    for (std::size_t h = 0; h < heads[l].size(); ++h) {
      if (heads[l][h] && !other.heads[l][h]) return false;
    }
    for (std::size_t u = 0; u < units[l].size(); ++u) {
      if (units[l][u] && !other.units[l][u]) return false;
    }
  }
  return true;
}

std::size_t StructuralMask::kept_heads(std::size_t layer) const {
  return static_cast<std::size_t>(
      std::count(heads.at(layer).begin(), heads.at(layer).end(), true));
}

std::size_t StructuralMask::kept_units(std::size_t layer) const {
  return static_cast<std::size_t>(
      std::count(units.at(layer).begin(), units.at(layer).end(), true));
}

std::size_t StructuralMask::total_kept_heads() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < heads.size(); ++l) n += kept_heads(l);
  return n;
}

std::size_t StructuralMask::total_kept_units() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < units.size(); ++l) n += kept_units(l);
  return n;
}

std::size_t head_param_count(const ModelConfig& cfg) {
  // Query, key, value columns plus output-projection rows.
  return 4 * cfg.embed_dim * cfg.head_dim();
}

std::size_t unit_param_count(const ModelConfig& cfg) {
  // One column into the unit, one row out of it.
  return 2 * cfg.embed_dim;
}

std::size_t full_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  std::size_t n = cfg.patch_dim() * d + d;  // patch embedding
  n += d;                                   // class token
  n += cfg.seq_len() * d;                   // positions
  n += cfg.num_layers *
       (4 * d +                                        // two norms, gain + bias
        cfg.num_heads * head_param_count(cfg) +        // attention maps
        cfg.mlp_hidden * unit_param_count(cfg));       // mlp maps
  n += 2 * d;                               // final norm
  n += d * cfg.num_classes + cfg.num_classes;  // classifier
  return n;
}

std::size_t masked_param_count(const ModelConfig& cfg, const StructuralMask& mask) {
  mask.validate(cfg);
  const std::size_t removed_heads = cfg.num_layers * cfg.num_heads - mask.total_kept_heads();
  const std::size_t removed_units = cfg.num_layers * cfg.mlp_hidden - mask.total_kept_units();
  return full_param_count(cfg) - removed_heads * head_param_count(cfg) -
         removed_units * unit_param_count(cfg);
}

ParamCounts param_counts(const ModelConfig& cfg, const StructuralMask& mask) {
  mask.validate(cfg);
  ParamCounts counts;
  counts.total_prunable = cfg.num_layers * (cfg.num_heads * head_param_count(cfg) +
                                            cfg.mlp_hidden * unit_param_count(cfg));
  counts.active_prunable = mask.total_kept_heads() * head_param_count(cfg) +
                           mask.total_kept_units() * unit_param_count(cfg);
  return counts;
}

double masked_scale(const ModelConfig& cfg, const StructuralMask& mask) {
  const ParamCounts counts = param_counts(cfg, mask);
  return static_cast<double>(counts.active_prunable) /
         static_cast<double>(counts.total_prunable);
}

StructuralMask restrict_mask(const StructuralMask& inner, const StructuralMask& outer) {
  if (!inner.subset_of(outer)) {
    throw MaskError("restrict_mask: inner mask is not nested inside outer");
  }
  StructuralMask out;
  out.heads.resize(inner.heads.size());
  out.units.resize(inner.units.size());
  for (std::size_t l = 0; l < inner.heads.size(); ++l) {
    for (std::size_t h = 0; h < inner.heads[l].size(); ++h) {
      if (outer.heads[l][h]) out.heads[l].push_back(inner.heads[l][h]);
    }
    for (std::size_t u = 0; u < inner.units[l].size(); ++u) {
      if (outer.units[l][u]) out.units[l].push_back(inner.units[l][u]);
    }
  }
  return out;
}

namespace {

Tensor gaussian_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) p[i] = rng.gaussian(0.0, stddev);
  return t;
}

Tensor param_zeros(std::vector<std::size_t> shape) {
  return Tensor::zeros(std::move(shape), true);
}

Tensor param_ones(std::vector<std::size_t> shape) {
  return Tensor::full(std::move(shape), 1.0, true);
}

Tensor const_ones(std::size_t n) { return Tensor::full({n}, 1.0, false); }

}  // namespace

MiniViT::MiniViT(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.embed_dim;
  constexpr double init_std = 0.02;
  layer_heads_.assign(cfg_.num_layers, cfg_.num_heads);
  layer_units_.assign(cfg_.num_layers, cfg_.mlp_hidden);
  patch_weight_ = gaussian_tensor({cfg_.patch_dim(), d}, init_std, rng);
  patch_bias_ = param_zeros({d});
  cls_token_ = gaussian_tensor({d}, init_std, rng);
  pos_embed_ = gaussian_tensor({cfg_.seq_len(), d}, init_std, rng);
  blocks_.resize(cfg_.num_layers);
  for (auto& b : blocks_) {
    b.ln1_gain = param_ones({d});
    b.ln1_bias = param_zeros({d});
    b.wq = gaussian_tensor({d, d}, init_std, rng);
    b.wk = gaussian_tensor({d, d}, init_std, rng);
    b.wv = gaussian_tensor({d, d}, init_std, rng);
    b.wo = gaussian_tensor({d, d}, init_std, rng);
    b.ln2_gain = param_ones({d});
    b.ln2_bias = param_zeros({d});
    b.w1 = gaussian_tensor({d, cfg_.mlp_hidden}, init_std, rng);
    b.w2 = gaussian_tensor({cfg_.mlp_hidden, d}, init_std, rng);
  }
  final_gain_ = param_ones({d});
  final_bias_ = param_zeros({d});
  head_weight_ = gaussian_tensor({d, cfg_.num_classes}, init_std, rng);
  head_bias_ = param_zeros({cfg_.num_classes});
}

std::vector<NamedTensor> MiniViT::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"patch_embed.weight", patch_weight_});
  out.push_back({"patch_embed.bias", patch_bias_});
  out.push_back({"cls_token", cls_token_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const Block& b = blocks_[l];
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "mlp.w1", b.w1});
    out.push_back({p + "mlp.w2", b.w2});
  }
  out.push_back({"final_norm.gain", final_gain_});
  out.push_back({"final_norm.bias", final_bias_});
  out.push_back({"classifier.weight", head_weight_});
  out.push_back({"classifier.bias", head_bias_});
  return out;
}

std::size_t MiniViT::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.size();
  return n;
}

Tensor MiniViT::patchify(const Tensor& images) const {
  if (!images.defined() || images.shape().size() != 2 ||
      images.cols() != cfg_.channels * cfg_.image_size * cfg_.image_size) {
    throw DimensionError("patchify: expected [batch, " +
                         std::to_string(cfg_.channels * cfg_.image_size * cfg_.image_size) +
                         "] images");
  }
  const std::size_t batch = images.rows();
  const std::size_t side = cfg_.patches_per_side();
  const std::size_t p = cfg_.patch_size;
  const std::size_t img = cfg_.image_size;
  const std::size_t pd = cfg_.patch_dim();
  Tensor out = Tensor::zeros({batch * cfg_.num_patches(), pd}, false);
  const double* src = images.data();
  double* dst = out.data();
  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const double* im = src + b * cfg_.channels * img * img;
      for (std::size_t pr = 0; pr < side; ++pr) {
        for (std::size_t pc = 0; pc < side; ++pc) {
          double* patch = dst + (b * side * side + pr * side + pc) * pd;
          for (std::size_t c = 0; c < cfg_.channels; ++c) {
            for (std::size_t y = 0; y < p; ++y) {
              for (std::size_t x = 0; x < p; ++x) {
                patch[c * p * p + y * p + x] =
                    im[c * img * img + (pr * p + y) * img + (pc * p + x)];
              }
            }
          }
        }
      }
    }
  });
  return out;
}

MiniViT::Output MiniViT::forward_impl(const Tensor& images,
                                      const std::vector<Tensor>& head_gates,
                                      const std::vector<Tensor>& unit_gates,
                                      bool gate_units) const {
  const std::size_t batch = images.rows();
  const std::size_t seq = cfg_.seq_len();
  Tensor x = linear(patchify(images), patch_weight_, patch_bias_);
  x = prepend_token(x, cls_token_, batch);
  x = add_position(x, pos_embed_, batch);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    Tensor y = layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor q = matmul(y, b.wq);
    Tensor k = matmul(y, b.wk);
    Tensor v = matmul(y, b.wv);
    Tensor mixed = attention_mix(q, k, v, head_gates[l], batch, seq);
    x = add(x, matmul(mixed, b.wo));
    Tensor z = layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor a = gelu(matmul(z, b.w1));
    if (gate_units) a = scale_cols(a, unit_gates[l]);
    x = add(x, matmul(a, b.w2));
  }
  Tensor hidden = layer_norm(x, final_gain_, final_bias_);
  Tensor pooled = select_token(hidden, batch, 0);
  Tensor logits = linear(pooled, head_weight_, head_bias_);
  return {logits, hidden};
}

void MiniViT::check_mask_fits(const StructuralMask& mask) const {
  if (mask.heads.size() != blocks_.size() || mask.units.size() != blocks_.size()) {
    throw MaskError("mask covers " + std::to_string(mask.heads.size()) +
                    " layers, model has " + std::to_string(blocks_.size()));
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    if (mask.heads[l].size() != layer_heads_[l] ||
        mask.units[l].size() != layer_units_[l]) {
      throw MaskError("mask does not match the head/unit counts of layer " +
                      std::to_string(l));
    }
    if (mask.kept_heads(l) == 0) {
      throw MaskError("mask removes every head of layer " + std::to_string(l));
    }
    if (mask.kept_units(l) == 0) {
      throw MaskError("mask removes every unit of layer " + std::to_string(l));
    }
  }
}

MiniViT::Output MiniViT::forward(const Tensor& images, const StructuralMask* mask) const {
  if (mask == nullptr) {
    std::vector<Tensor> head_gates;
    head_gates.reserve(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      head_gates.push_back(const_ones(layer_heads_[l]));
    }
    return forward_impl(images, head_gates, {}, false);
  }
  check_mask_fits(*mask);
  std::vector<Tensor> head_gates;
  std::vector<Tensor> unit_gates;
  head_gates.reserve(blocks_.size());
  unit_gates.reserve(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Tensor hg = Tensor::zeros({layer_heads_[l]}, false);
    for (std::size_t h = 0; h < layer_heads_[l]; ++h) {
      hg.data()[h] = mask->heads[l][h] ? 1.0 : 0.0;
    }
    Tensor ug = Tensor::zeros({layer_units_[l]}, false);
    for (std::size_t u = 0; u < layer_units_[l]; ++u) {
      ug.data()[u] = mask->units[l][u] ? 1.0 : 0.0;
    }
    head_gates.push_back(hg);
    unit_gates.push_back(ug);
  }
  return forward_impl(images, head_gates, unit_gates, true);
}

MiniViT::Output MiniViT::forward_with_gates(const Tensor& images,
                                            const std::vector<Tensor>& head_gates,
                                            const std::vector<Tensor>& unit_gates) const {
  if (head_gates.size() != blocks_.size() || unit_gates.size() != blocks_.size()) {
    throw ContractError("forward_with_gates: need one gate tensor per layer");
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    if (head_gates[l].size() != layer_heads_[l] ||
        unit_gates[l].size() != layer_units_[l]) {
      throw DimensionError("forward_with_gates: gate sizes do not match layer " +
                           std::to_string(l));
    }
  }
  return forward_impl(images, head_gates, unit_gates, true);
}

MiniViT MiniViT::materialize(const StructuralMask& mask) const {
  check_mask_fits(mask);
  const std::size_t d = cfg_.embed_dim;
  const std::size_t dh = cfg_.head_dim();
  MiniViT out;
  out.cfg_ = cfg_;
  out.patch_weight_ = patch_weight_.clone();
  out.patch_bias_ = patch_bias_.clone();
  out.cls_token_ = cls_token_.clone();
  out.pos_embed_ = pos_embed_.clone();
  out.final_gain_ = final_gain_.clone();
  out.final_bias_ = final_bias_.clone();
  out.head_weight_ = head_weight_.clone();
  out.head_bias_ = head_bias_.clone();
  out.blocks_.resize(blocks_.size());
  out.layer_heads_.resize(blocks_.size());
  out.layer_units_.resize(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& src = blocks_[l];
    Block& dst = out.blocks_[l];
    dst.ln1_gain = src.ln1_gain.clone();
    dst.ln1_bias = src.ln1_bias.clone();
    dst.ln2_gain = src.ln2_gain.clone();
    dst.ln2_bias = src.ln2_bias.clone();
    const std::size_t kept_h = mask.kept_heads(l);
    const std::size_t kept_u = mask.kept_units(l);
    out.layer_heads_[l] = kept_h;
    out.layer_units_[l] = kept_u;
    dst.wq = Tensor::zeros({d, kept_h * dh}, true);
    dst.wk = Tensor::zeros({d, kept_h * dh}, true);
    dst.wv = Tensor::zeros({d, kept_h * dh}, true);
    dst.wo = Tensor::zeros({kept_h * dh, d}, true);
    // The source may itself be a materialized model, so its q/k/v column
    // count comes from its own per-layer head count, not from the config.
    const std::size_t src_cols = layer_heads_[l] * dh;
    std::size_t slot = 0;
    for (std::size_t h = 0; h < layer_heads_[l]; ++h) {
      if (!mask.heads[l][h]) continue;
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < dh; ++c) {
          const std::size_t src_col = h * dh + c;
          const std::size_t dst_col = slot * dh + c;
          dst.wq.data()[r * kept_h * dh + dst_col] = src.wq.data()[r * src_cols + src_col];
          dst.wk.data()[r * kept_h * dh + dst_col] = src.wk.data()[r * src_cols + src_col];
          dst.wv.data()[r * kept_h * dh + dst_col] = src.wv.data()[r * src_cols + src_col];
        }
      }
      for (std::size_t c = 0; c < dh; ++c) {
        const double* src_row = src.wo.data() + (h * dh + c) * d;
        double* dst_row = dst.wo.data() + (slot * dh + c) * d;
        std::copy(src_row, src_row + d, dst_row);
      }
      ++slot;
    }
    dst.w1 = Tensor::zeros({d, kept_u}, true);
    dst.w2 = Tensor::zeros({kept_u, d}, true);
    slot = 0;
    for (std::size_t u = 0; u < layer_units_[l]; ++u) {
      if (!mask.units[l][u]) continue;
      for (std::size_t r = 0; r < d; ++r) {
        dst.w1.data()[r * kept_u + slot] = src.w1.data()[r * layer_units_[l] + u];
      }
      std::copy(src.w2.data() + u * d, src.w2.data() + (u + 1) * d,
                dst.w2.data() + slot * d);
      ++slot;
    }
  }
  return out;
}

MiniViT MiniViT::clone() const {
  // Round-trips through the parameter list so reduced models copy cleanly.
  return from_parameters(cfg_, named_parameters());
}

MiniViT MiniViT::from_parameters(const ModelConfig& cfg,
                                 const std::vector<NamedTensor>& params) {
  cfg.validate();
  std::map<std::string, Tensor> by_name;
  for (const auto& p : params) by_name[p.name] = p.tensor;
  const auto take = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("missing parameter tensor " + name);
    Tensor t = it->second.clone();
    t.set_requires_grad(true);
    return t;
  };
  const auto expect_shape = [](const Tensor& t, std::vector<std::size_t> shape,
                               const std::string& name) {
    if (t.shape() != shape) {
      throw DimensionError("parameter " + name + " has an unexpected shape");
    }
  };
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.head_dim();
  MiniViT out;
  out.cfg_ = cfg;
  out.patch_weight_ = take("patch_embed.weight");
  expect_shape(out.patch_weight_, {cfg.patch_dim(), d}, "patch_embed.weight");
  out.patch_bias_ = take("patch_embed.bias");
  expect_shape(out.patch_bias_, {d}, "patch_embed.bias");
  out.cls_token_ = take("cls_token");
  expect_shape(out.cls_token_, {d}, "cls_token");
  out.pos_embed_ = take("pos_embed");
  expect_shape(out.pos_embed_, {cfg.seq_len(), d}, "pos_embed");
  out.blocks_.resize(cfg.num_layers);
  out.layer_heads_.resize(cfg.num_layers);
  out.layer_units_.resize(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block& b = out.blocks_[l];
    b.ln1_gain = take(p + "ln1.gain");
    b.ln1_bias = take(p + "ln1.bias");
    b.ln2_gain = take(p + "ln2.gain");
    b.ln2_bias = take(p + "ln2.bias");
    expect_shape(b.ln1_gain, {d}, p + "ln1.gain");
    expect_shape(b.ln1_bias, {d}, p + "ln1.bias");
    expect_shape(b.ln2_gain, {d}, p + "ln2.gain");
    expect_shape(b.ln2_bias, {d}, p + "ln2.bias");
    b.wq = take(p + "attn.wq");
    b.wk = take(p + "attn.wk");
    b.wv = take(p + "attn.wv");
    b.wo = take(p + "attn.wo");
    if (b.wq.shape().size() != 2 || b.wq.rows() != d || b.wq.cols() == 0 ||
        b.wq.cols() % dh != 0 || b.wq.cols() > d) {
      throw DimensionError("parameter " + p + "attn.wq has an unexpected shape");
    }
    const std::size_t kept_h = b.wq.cols() / dh;
    expect_shape(b.wk, {d, kept_h * dh}, p + "attn.wk");
    expect_shape(b.wv, {d, kept_h * dh}, p + "attn.wv");
    expect_shape(b.wo, {kept_h * dh, d}, p + "attn.wo");
    b.w1 = take(p + "mlp.w1");
    if (b.w1.shape().size() != 2 || b.w1.rows() != d || b.w1.cols() == 0 ||
        b.w1.cols() > cfg.mlp_hidden) {
      throw DimensionError("parameter " + p + "mlp.w1 has an unexpected shape");
    }
    const std::size_t kept_u = b.w1.cols();
    b.w2 = take(p + "mlp.w2");
    expect_shape(b.w2, {kept_u, d}, p + "mlp.w2");
    out.layer_heads_[l] = kept_h;
    out.layer_units_[l] = kept_u;
  }
  out.final_gain_ = take("final_norm.gain");
  out.final_bias_ = take("final_norm.bias");
  expect_shape(out.final_gain_, {d}, "final_norm.gain");
  expect_shape(out.final_bias_, {d}, "final_norm.bias");
  out.head_weight_ = take("classifier.weight");
  expect_shape(out.head_weight_, {d, cfg.num_classes}, "classifier.weight");
  out.head_bias_ = take("classifier.bias");
  expect_shape(out.head_bias_, {cfg.num_classes}, "classifier.bias");
  return out;
}

}  // namespace amd
