// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "amd/tensor.hpp"

namespace amd {

// Differentiable primitives. Every op records its backward closure on the
// active tape when one is live and some input requires a gradient; without a
// live tape they are plain numeric kernels. All matrices are rank 2 and
// row-major.

// [m, k] x [k, n] -> [m, n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x [n, in] * w [in, out] + bias [out] broadcast over rows. Pass an undefined
// bias tensor to skip the bias term.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Elementwise sum of two tensors with identical shape.
Tensor add(const Tensor& a, const Tensor& b);

// Multiply every element by a constant.
Tensor scale(const Tensor& a, double c);

// Row-wise normalization: gain * (x - mean) / sqrt(var + eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Exact Gaussian error-linear unit: 0.5 * x * (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& x);

// Multiply column j of x by gates[j]. Columns gated by exactly zero neither
// contribute forward nor receive gradient; the gate itself still collects
// d(loss)/d(gate) when it requires one.
Tensor scale_cols(const Tensor& x, const Tensor& gates);

// Row-wise softmax of logits / gamma. gamma must be positive.
Tensor softmax_temperature(const Tensor& logits, double gamma);

// Mean cross-entropy of logits [n, c] against integer labels in [0, c).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean KL divergence KL(softmax(t/gamma) || softmax(s/gamma)) over rows.
// The teacher side is treated as a constant; no temperature-squared rescale
// is applied.
Tensor kl_soft_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                      double gamma);

// Mean squared error between prediction and a constant target, averaged over
// every element.
Tensor mse_hidden(const Tensor& target, const Tensor& pred);

// Multi-head scaled dot-product attention over q, k, v of shape
// [batch * seq, heads * head_dim]. Head h of every sequence attends within
// that sequence only, its output is multiplied by head_gates[h], and heads
// are re-concatenated. Attention probabilities are recomputed during the
// backward pass instead of being stored.
Tensor attention_mix(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& head_gates, std::size_t batch, std::size_t seq);

// Insert a learned token as row 0 of each sequence:
// [batch * seq, dim] -> [batch * (seq + 1), dim].
Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t batch);

// Add pos [seq, dim] to every sequence of x [batch * seq, dim].
Tensor add_position(const Tensor& x, const Tensor& pos, std::size_t batch);

// Extract row `index` of every sequence: [batch * seq, dim] -> [batch, dim].
Tensor select_token(const Tensor& x, std::size_t batch, std::size_t index);

}  // namespace amd
