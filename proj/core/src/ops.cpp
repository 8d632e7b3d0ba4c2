// SPDX-License-Identifier: Apache-2.0
#include "amd/ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "amd/errors.hpp"
#include "amd/runtime.hpp"

namespace amd {
namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

CMatMap cmat(const Tensor& t) { return CMatMap(t.data(), t.rows(), t.cols()); }
MatMap mat(Tensor& t) { return MatMap(t.data(), t.rows(), t.cols()); }
MatMap gmat(Tensor& t) { return MatMap(t.grad_data(), t.rows(), t.cols()); }

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  const auto& sh = t.shape();
  for (std::size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(sh[i]);
  }
  return s + "]";
}

void require_rank2(const Tensor& t, const char* op) {
  if (!t.defined() || t.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                         (t.defined() ? shape_str(t) : std::string("undefined")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                         shape_str(b) + " differ");
  }
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

// Rows of a [batch * seq, dim] tensor must split evenly into sequences.
std::size_t sequence_length(const Tensor& x, std::size_t batch, const char* op) {
  require_rank2(x, op);
  if (batch == 0 || x.rows() % batch != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) +
                         " rows do not split into " + std::to_string(batch) +
                         " sequences");
  }
  return x.rows() / batch;
}

// Row-wise softmax of src/gamma into dst (both n doubles).
void softmax_row(const double* src, double* dst, std::size_t n, double gamma) {
  double mx = src[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] = std::exp((src[i] - mx) / gamma);
    sum += dst[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < n; ++i) dst[i] *= inv;
}

double log_sum_exp(const double* src, std::size_t n, double gamma) {
  double mx = src[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp((src[i] - mx) / gamma);
  return mx / gamma + std::log(sum);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents of " + shape_str(a) + " and " +
                         shape_str(b) + " differ");
  }
  Tensor out = Tensor::zeros({a.rows(), b.cols()}, wants_grad(a) || wants_grad(b));
  mat(out) = cmat(a) * cmat(b);
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([a = a, b = b, out = out]() mutable {
      CMatMap go(out.grad_data(), out.rows(), out.cols());
      if (a.requires_grad()) gmat(a) += go * cmat(b).transpose();
      if (b.requires_grad()) gmat(b) += cmat(a).transpose() * go;
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: inner extents of " + shape_str(x) + " and " +
                         shape_str(w) + " differ");
  }
  if (bias.defined() && bias.size() != w.cols()) {
    throw DimensionError("linear: bias " + shape_str(bias) + " does not match " +
                         std::to_string(w.cols()) + " outputs");
  }
  const bool grad = wants_grad(x) || wants_grad(w) || wants_grad(bias);
  Tensor out = Tensor::zeros({x.rows(), w.cols()}, grad);
  mat(out) = cmat(x) * cmat(w);
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data(), bias.size());
    mat(out).rowwise() += bv;
  }
  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([x = x, w = w, bias = bias, out = out]() mutable {
      CMatMap go(out.grad_data(), out.rows(), out.cols());
      if (x.requires_grad()) gmat(x) += go * cmat(w).transpose();
      if (w.requires_grad()) gmat(w) += cmat(x).transpose() * go;
      if (bias.defined() && bias.requires_grad()) {
        Eigen::Map<Eigen::RowVectorXd> gb(bias.grad_data(), bias.size());
        gb += go.colwise().sum();
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a) || wants_grad(b));
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  parallel_for(out.size(), [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) po[i] = pa[i] + pb[i];
  });
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([a = a, b = b, out = out]() mutable {
      const double* go = out.grad_data();
      const std::size_t n = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad_data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad_data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  if (!a.defined()) throw ContractError("scale: tensor is undefined");
  Tensor out = Tensor::zeros(a.shape(), wants_grad(a));
  const double* pa = a.data();
  double* po = out.data();
  parallel_for(out.size(), [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) po[i] = c * pa[i];
  });
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([a = a, out = out, c = c]() mutable {
      const double* go = out.grad_data();
      double* ga = a.grad_data();
      for (std::size_t i = 0; i < out.size(); ++i) ga[i] += c * go[i];
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layer_norm");
  if (eps <= 0.0) throw DomainError("layer_norm: eps must be positive");
  const std::size_t d = x.cols();
  if (!gain.defined() || gain.size() != d || !bias.defined() || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias do not match " + std::to_string(d) +
                         " features");
  }
  const bool grad = wants_grad(x) || wants_grad(gain) || wants_grad(bias);
  Tensor out = Tensor::zeros(x.shape(), grad);
  const std::size_t n = x.rows();
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  parallel_for(n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const double* row = px + r * d;
      double* orow = po + r * d;
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) {
        orow[j] = pg[j] * ((row[j] - mu) * inv) + pb[j];
      }
    }
  });
  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([x = x, gain = gain, bias = bias, out = out, eps = eps]() mutable {
      const std::size_t rows = x.rows();
      const std::size_t d = x.cols();
      const double* px = x.data();
      const double* pg = gain.data();
      const double* go = out.grad_data();
      double* gx = x.requires_grad() ? x.grad_data() : nullptr;
      double* gg = gain.requires_grad() ? gain.grad_data() : nullptr;
      double* gb = bias.requires_grad() ? bias.grad_data() : nullptr;
      // Serial over rows: gain/bias gradients accumulate across every row.
      std::vector<double> xhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        const double* grow = go + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double c = row[j] - mu;
          var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0;
        double m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (row[j] - mu) * inv;
          const double dxh = grow[j] * pg[j];
          m1 += dxh;
          m2 += dxh * xhat[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          if (gx) gx[r * d + j] += inv * (grow[j] * pg[j] - m1 - xhat[j] * m2);
          if (gg) gg[j] += grow[j] * xhat[j];
          if (gb) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  if (!x.defined()) throw ContractError("gelu: tensor is undefined");
  Tensor out = Tensor::zeros(x.shape(), wants_grad(x));
  const double* px = x.data();
  double* po = out.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  parallel_for(out.size(), [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
    }
  });
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([x = x, out = out]() mutable {
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt_2pi = 0.3989422804014326779;
      const double* px = x.data();
      const double* go = out.grad_data();
      double* gx = x.grad_data();
      parallel_for(x.size(), [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
          const double v = px[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          gx[i] += go[i] * (cdf + v * pdf);
        }
      });
    });
  }
  return out;
}

Tensor scale_cols(const Tensor& x, const Tensor& gates) {
  require_rank2(x, "scale_cols");
  if (!gates.defined() || gates.shape().size() != 1 || gates.size() != x.cols()) {
    throw DimensionError("scale_cols: gates " +
                         (gates.defined() ? shape_str(gates) : std::string("undefined")) +
                         " do not match " + std::to_string(x.cols()) + " columns");
  }
  const bool grad = wants_grad(x) || wants_grad(gates);
  Tensor out = Tensor::zeros(x.shape(), grad);
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const double* px = x.data();
  const double* pgate = gates.data();
  double* po = out.data();
  parallel_for(n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const double g = pgate[j];
        po[r * d + j] = (g == 0.0) ? 0.0 : g * px[r * d + j];
      }
    }
  });
  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([x = x, gates = gates, out = out]() mutable {
      const std::size_t n = x.rows();
      const std::size_t d = x.cols();
      const double* px = x.data();
      const double* pgate = gates.data();
      const double* go = out.grad_data();
      if (x.requires_grad()) {
        double* gx = x.grad_data();
        parallel_for(n, [&](std::size_t r0, std::size_t r1) {
          for (std::size_t r = r0; r < r1; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              const double g = pgate[j];
              if (g != 0.0) gx[r * d + j] += g * go[r * d + j];
            }
          }
        });
      }
      if (gates.requires_grad()) {
        double* gg = gates.grad_data();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < d; ++j) {
            gg[j] += go[r * d + j] * px[r * d + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_temperature(const Tensor& logits, double gamma) {
  require_rank2(logits, "softmax_temperature");
  if (!(gamma > 0.0)) throw DomainError("softmax_temperature: gamma must be positive");
  Tensor out = Tensor::zeros(logits.shape(), wants_grad(logits));
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  const double* pl = logits.data();
  double* po = out.data();
  parallel_for(n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) softmax_row(pl + r * c, po + r * c, c, gamma);
  });
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([logits = logits, out = out, gamma = gamma]() mutable {
      const std::size_t n = logits.rows();
      const std::size_t c = logits.cols();
      const double* p = out.data();
      const double* go = out.grad_data();
      double* gl = logits.grad_data();
      parallel_for(n, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += go[r * c + j] * p[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            gl[r * c + j] += p[r * c + j] * (go[r * c + j] - dot) / gamma;
          }
        }
      });
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (n == 0) throw DomainError("cross_entropy: empty batch");
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[i]) +
                        " at row " + std::to_string(i) + " outside [0, " +
                        std::to_string(c) + ")");
    }
  }
  const double* pl = logits.data();
  std::vector<double> per_row(n);
  parallel_for(n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      per_row[r] = log_sum_exp(pl + r * c, c, 1.0) - pl[r * c + labels[r]];
    }
  });
  double total = 0.0;
  for (double v : per_row) total += v;
  Tensor out = Tensor::scalar(total / static_cast<double>(n), wants_grad(logits));
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([logits = logits, labels = labels, out = out]() mutable {
      const std::size_t n = logits.rows();
      const std::size_t c = logits.cols();
      const double g = out.grad_data()[0] / static_cast<double>(n);
      const double* pl = logits.data();
      double* gl = logits.grad_data();
      parallel_for(n, [&](std::size_t r0, std::size_t r1) {
        std::vector<double> p(c);
        for (std::size_t r = r0; r < r1; ++r) {
          softmax_row(pl + r * c, p.data(), c, 1.0);
          for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * p[j];
          gl[r * c + labels[r]] -= g;
        }
      });
    });
  }
  return out;
}

Tensor kl_soft_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                      double gamma) {
  require_same_shape(teacher_logits, student_logits, "kl_soft_logits");
  require_rank2(student_logits, "kl_soft_logits");
  if (!(gamma > 0.0)) throw DomainError("kl_soft_logits: gamma must be positive");
  const std::size_t n = student_logits.rows();
  const std::size_t c = student_logits.cols();
  if (n == 0) throw DomainError("kl_soft_logits: empty batch");
  const double* pt = teacher_logits.data();
  const double* ps = student_logits.data();
  std::vector<double> per_row(n);
  parallel_for(n, [&](std::size_t r0, std::size_t r1) {
    std::vector<double> p(c);
    for (std::size_t r = r0; r < r1; ++r) {
      softmax_row(pt + r * c, p.data(), c, gamma);
      const double lse_t = log_sum_exp(pt + r * c, c, gamma);
      const double lse_s = log_sum_exp(ps + r * c, c, gamma);
      double kl = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (p[j] > 0.0) {
          const double log_pt = pt[r * c + j] / gamma - lse_t;
          const double log_ps = ps[r * c + j] / gamma - lse_s;
          kl += p[j] * (log_pt - log_ps);
        }
      }
      per_row[r] = kl;
    }
  });
  double total = 0.0;
  for (double v : per_row) total += v;
  // The teacher side is a constant by contract, so only the student records.
  Tensor out = Tensor::scalar(total / static_cast<double>(n), wants_grad(student_logits));
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([teacher_logits = teacher_logits, student_logits = student_logits, out = out, gamma = gamma]() mutable {
      const std::size_t n = student_logits.rows();
      const std::size_t c = student_logits.cols();
      const double g = out.grad_data()[0] / (gamma * static_cast<double>(n));
      const double* pt = teacher_logits.data();
      const double* ps = student_logits.data();
      double* gs = student_logits.grad_data();
      parallel_for(n, [&](std::size_t r0, std::size_t r1) {
        std::vector<double> prob_t(c);
        std::vector<double> prob_s(c);
        for (std::size_t r = r0; r < r1; ++r) {
          softmax_row(pt + r * c, prob_t.data(), c, gamma);
          softmax_row(ps + r * c, prob_s.data(), c, gamma);
          for (std::size_t j = 0; j < c; ++j) {
            gs[r * c + j] += g * (prob_s[j] - prob_t[j]);
          }
        }
      });
    });
  }
  return out;
}

Tensor mse_hidden(const Tensor& target, const Tensor& pred) {
  require_same_shape(target, pred, "mse_hidden");
  const std::size_t n = pred.size();
  if (n == 0) throw DomainError("mse_hidden: empty tensors");
  const double* pt = target.data();
  const double* pp = pred.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pp[i] - pt[i];
    total += d * d;
  }
  // The target side is a constant by contract.
  Tensor out = Tensor::scalar(total / static_cast<double>(n), wants_grad(pred));
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([target = target, pred = pred, out = out]() mutable {
      const std::size_t n = pred.size();
      const double g = 2.0 * out.grad_data()[0] / static_cast<double>(n);
      const double* pt = target.data();
      const double* pp = pred.data();
      double* gp = pred.grad_data();
      parallel_for(n, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) gp[i] += g * (pp[i] - pt[i]);
      });
    });
  }
  return out;
}

Tensor attention_mix(const Tensor& q, const Tensor& k, const Tensor& v,
                     const Tensor& head_gates, std::size_t batch, std::size_t seq) {
  require_same_shape(q, k, "attention_mix");
  require_same_shape(q, v, "attention_mix");
  require_rank2(q, "attention_mix");
  if (!head_gates.defined() || head_gates.shape().size() != 1) {
    throw DimensionError("attention_mix: head_gates must be rank 1");
  }
  const std::size_t heads = head_gates.size();
  if (heads == 0 || q.cols() % heads != 0) {
    throw DimensionError("attention_mix: " + std::to_string(q.cols()) +
                         " columns do not split into " + std::to_string(heads) +
                         " heads");
  }
  if (q.rows() != batch * seq) {
    throw DimensionError("attention_mix: " + std::to_string(q.rows()) +
                         " rows, expected batch " + std::to_string(batch) + " x seq " +
                         std::to_string(seq));
  }
  const std::size_t dh = q.cols() / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool grad = wants_grad(q) || wants_grad(k) || wants_grad(v) || wants_grad(head_gates);
  Tensor out = Tensor::zeros(q.shape(), grad);

  const auto run_head = [&](Tensor& dst, const Tensor& qs, const Tensor& ks,
                            const Tensor& vs, std::size_t b, std::size_t h, double gate) {
    CMatMap qm = cmat(qs);
    CMatMap km = cmat(ks);
    CMatMap vm = cmat(vs);
    MatMap om = mat(dst);
    const auto qb = qm.block(b * seq, h * dh, seq, dh);
    const auto kb = km.block(b * seq, h * dh, seq, dh);
    const auto vb = vm.block(b * seq, h * dh, seq, dh);
    Mat scores = (qb * kb.transpose()) * inv_scale;
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      softmax_row(scores.data() + r * scores.cols(), scores.data() + r * scores.cols(),
                  seq, 1.0);
    }
    om.block(b * seq, h * dh, seq, dh) = gate * (scores * vb);
  };

  const double* gates = head_gates.data();
  parallel_for(batch * heads, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) {
      const std::size_t b = i / heads;
      const std::size_t h = i % heads;
      if (gates[h] == 0.0) continue;  // block stays exactly zero
      run_head(out, q, k, v, b, h, gates[h]);
    }
  });

  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([q = q, k = k, v = v, head_gates = head_gates, out = out, batch = batch, seq = seq, heads = heads, dh = dh, inv_scale = inv_scale]() mutable {
      const double* gates = head_gates.data();
      const bool need_qkv = q.requires_grad() || k.requires_grad() || v.requires_grad();
      const bool need_gates = head_gates.requires_grad();
      CMatMap qm = cmat(q);
      CMatMap km = cmat(k);
      CMatMap vm = cmat(v);
      CMatMap go(out.grad_data(), out.rows(), out.cols());
      double* gq = q.requires_grad() ? q.grad_data() : nullptr;
      double* gk = k.requires_grad() ? k.grad_data() : nullptr;
      double* gv = v.requires_grad() ? v.grad_data() : nullptr;
      // Per-(batch, head) gate contributions; reduced serially afterwards.
      std::vector<double> gate_partials(need_gates ? batch * heads : 0, 0.0);
      parallel_for(batch * heads, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
          const std::size_t b = i / heads;
          const std::size_t h = i % heads;
          const double gate = gates[h];
          if (gate == 0.0 && !need_gates) continue;
          const auto qb = qm.block(b * seq, h * dh, seq, dh);
          const auto kb = km.block(b * seq, h * dh, seq, dh);
          const auto vb = vm.block(b * seq, h * dh, seq, dh);
          const auto gob = go.block(b * seq, h * dh, seq, dh);
          // Recompute the attention probabilities for this block.
          Mat probs = (qb * kb.transpose()) * inv_scale;
          for (Eigen::Index r = 0; r < probs.rows(); ++r) {
            softmax_row(probs.data() + r * probs.cols(),
                        probs.data() + r * probs.cols(), seq, 1.0);
          }
          if (need_gates) {
            Mat head_out = probs * vb;
            gate_partials[i] = (gob.array() * head_out.array()).sum();
          }
          // A zero gate blocks every path through this head.
          if (gate == 0.0 || !need_qkv) continue;
          Mat dout = gate * gob;
          if (gv) {
            MatMap gvm(gv, v.rows(), v.cols());
            gvm.block(b * seq, h * dh, seq, dh) += probs.transpose() * dout;
          }
          Mat dprobs = dout * vb.transpose();
          Mat dscores(seq, seq);
          for (std::size_t r = 0; r < seq; ++r) {
            const double dot = dprobs.row(r).dot(probs.row(r));
            dscores.row(r) =
                (probs.row(r).array() * (dprobs.row(r).array() - dot)).matrix() *
                inv_scale;
          }
          if (gq) {
            MatMap gqm(gq, q.rows(), q.cols());
            gqm.block(b * seq, h * dh, seq, dh) += dscores * kb;
          }
          if (gk) {
            MatMap gkm(gk, k.rows(), k.cols());
            gkm.block(b * seq, h * dh, seq, dh) += dscores.transpose() * qb;
          }
        }
      });
      if (need_gates) {
        double* gg = head_gates.grad_data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) gg[h] += gate_partials[b * heads + h];
        }
      }
    });
  }
  return out;
}

Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t batch) {
  const std::size_t seq = sequence_length(x, batch, "prepend_token");
  const std::size_t d = x.cols();
  if (!token.defined() || token.size() != d) {
    throw DimensionError("prepend_token: token does not match " + std::to_string(d) +
                         " features");
  }
  const bool grad = wants_grad(x) || wants_grad(token);
  Tensor out = Tensor::zeros({batch * (seq + 1), d}, grad);
  const double* px = x.data();
  const double* ptok = token.data();
  double* po = out.data();
  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      double* dst = po + b * (seq + 1) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = ptok[j];
      std::copy(px + b * seq * d, px + (b + 1) * seq * d, dst + d);
    }
  });
  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([x = x, token = token, out = out, batch = batch, seq = seq]() mutable {
      const std::size_t d = x.cols();
      const double* go = out.grad_data();
      if (x.requires_grad()) {
        double* gx = x.grad_data();
        parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
          for (std::size_t b = b0; b < b1; ++b) {
            const double* src = go + (b * (seq + 1) + 1) * d;
            double* dst = gx + b * seq * d;
            for (std::size_t i = 0; i < seq * d; ++i) dst[i] += src[i];
          }
        });
      }
      if (token.requires_grad()) {
        double* gt = token.grad_data();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = go + b * (seq + 1) * d;
          for (std::size_t j = 0; j < d; ++j) gt[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor add_position(const Tensor& x, const Tensor& pos, std::size_t batch) {
  const std::size_t seq = sequence_length(x, batch, "add_position");
  require_rank2(pos, "add_position");
  if (pos.rows() != seq || pos.cols() != x.cols()) {
    throw DimensionError("add_position: positions " + shape_str(pos) +
                         " do not match sequences of " + shape_str(x));
  }
  const std::size_t d = x.cols();
  const bool grad = wants_grad(x) || wants_grad(pos);
  Tensor out = Tensor::zeros(x.shape(), grad);
  const double* px = x.data();
  const double* pp = pos.data();
  double* po = out.data();
  parallel_for(x.rows(), [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const double* prow = pp + (r % seq) * d;
      for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + prow[j];
    }
  });
  if (Tape* tape = active_tape(); tape && grad) {
    tape->record([x = x, pos = pos, out = out, batch = batch, seq = seq]() mutable {
      const std::size_t d = x.cols();
      const double* go = out.grad_data();
      if (x.requires_grad()) {
        double* gx = x.grad_data();
        parallel_for(x.size(), [&](std::size_t i0, std::size_t i1) {
          for (std::size_t i = i0; i < i1; ++i) gx[i] += go[i];
        });
      }
      if (pos.requires_grad()) {
        double* gp = pos.grad_data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t s = 0; s < seq; ++s) {
            const double* src = go + (b * seq + s) * d;
            for (std::size_t j = 0; j < d; ++j) gp[s * d + j] += src[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor select_token(const Tensor& x, std::size_t batch, std::size_t index) {
  const std::size_t seq = sequence_length(x, batch, "select_token");
  if (index >= seq) {
    throw DimensionError("select_token: index " + std::to_string(index) +
                         " outside sequences of length " + std::to_string(seq));
  }
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros({batch, d}, wants_grad(x));
  const double* px = x.data();
  double* po = out.data();
  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const double* src = px + (b * seq + index) * d;
      std::copy(src, src + d, po + b * d);
    }
  });
  if (Tape* tape = active_tape(); tape && out.requires_grad()) {
    tape->record([x = x, out = out, batch = batch, seq = seq, index = index]() mutable {
      const std::size_t d = x.cols();
      const double* go = out.grad_data();
      double* gx = x.grad_data();
      parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
          double* dst = gx + (b * seq + index) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += go[b * d + j];
        }
      });
    });
  }
  return out;
}

}  // namespace amd
