// SPDX-License-Identifier: Apache-2.0
#include "amd/optim.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "amd/errors.hpp"

namespace amd {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr >= 0.0) || !(cfg_.eps > 0.0) || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 ||
      cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0 || cfg_.weight_decay < 0.0) {
    throw DomainError("AdamW: hyperparameters outside their valid ranges");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.tensor.defined()) throw ContractError("AdamW: undefined parameter " + p.name);
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void AdamW::set_lr(double lr) {
  if (!(lr >= 0.0)) throw DomainError("AdamW: learning rate must be non-negative");
  cfg_.lr = lr;
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    const double* g = p.grad_data();
    double* w = p.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const std::size_t n = p.size();
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(g[j])) {
        throw TrainingError("AdamW: non-finite gradient in " + params_[i].name);
      }
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double cosine_warmup_lr(double epoch, double total_epochs, double warmup_epochs,
                        double base_lr) {
  if (!(base_lr >= 0.0)) throw ContractError("cosine_warmup_lr: base_lr must be >= 0");
  if (!(total_epochs > 0.0) || warmup_epochs < 0.0 || warmup_epochs >= total_epochs) {
    throw ContractError("cosine_warmup_lr: need 0 <= warmup_epochs < total_epochs");
  }
  if (epoch < 0.0 || epoch >= total_epochs) {
    throw ContractError("cosine_warmup_lr: epoch outside [0, total_epochs)");
  }
  if (epoch < warmup_epochs) return base_lr * epoch / warmup_epochs;
  const double progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace amd
