// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "amd/tensor.hpp"

namespace amd {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWConfig cfg);

  void set_lr(double lr);
  double lr() const { return cfg_.lr; }

  // Applies one update from accumulated gradients. A non-finite gradient
  // aborts with TrainingError naming the offending parameter.
  void step();
  void zero_grad();
  std::size_t step_count() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
};

// Linear warmup to base_lr over warmup_epochs, then cosine decay to zero at
// total_epochs. epoch is real-valued so mid-epoch progress shifts the rate;
// it must lie in [0, total_epochs).
double cosine_warmup_lr(double epoch, double total_epochs, double warmup_epochs,
                        double base_lr);

}  // namespace amd
