// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace amd {

// Dense row-major tensor of doubles with shared storage. Copies are shallow;
// use clone() for a deep copy. Gradients live beside the data and are
// allocated on first touch.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  // Leading/trailing extent of a rank-2 tensor; ContractError otherwise.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data();
  const double* data() const;
  double at(std::size_t i) const;
  // Value of a one-element tensor; ContractError otherwise.
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  // Gradient buffer, zero-initialized on first access.
  double* grad_data();
  const double* grad_data() const;  // nullptr until allocated
  bool has_grad() const;
  void zero_grad();

  // Same storage, detached from gradient tracking.
  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& checked() const;
};

// Records the backward closures of one forward pass, in execution order.
// backward() plays them in reverse exactly once; a Tape cannot be reused.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> pull);
  // Seeds d(root)/d(root) = 1 and propagates. Root must be one element and
  // the tape must not have been consumed already.
  void backward(const Tensor& root);

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// Innermost live recording tape for this thread, or nullptr when gradient
// recording is off.
Tape* active_tape();

// RAII guard that makes a fresh Tape the active one for the current thread
// and restores the previous tape on destruction.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

}  // namespace amd
