// SPDX-License-Identifier: Apache-2.0
#include "amd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <utility>

#include "amd/errors.hpp"

namespace amd {

struct Tensor::Impl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touch
  bool requires_grad = false;
};

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Impl& Tensor::checked() const {
  if (!impl_) throw ContractError("tensor is undefined");
  return *impl_;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("from_data: shape holds " + std::to_string(shape_numel(shape)) +
                         " elements but " + std::to_string(data.size()) + " were given");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::size() const { return checked().data.size(); }

std::size_t Tensor::rows() const {
  auto& impl = checked();
  if (impl.shape.size() != 2) throw ContractError("rows: tensor is not rank 2");
  return impl.shape[0];
}

std::size_t Tensor::cols() const {
  auto& impl = checked();
  if (impl.shape.size() != 2) throw ContractError("cols: tensor is not rank 2");
  return impl.shape[1];
}

double* Tensor::data() { return checked().data.data(); }

const double* Tensor::data() const { return checked().data.data(); }

double Tensor::at(std::size_t i) const {
  auto& impl = checked();
  if (i >= impl.data.size()) throw ContractError("at: index out of range");
  return impl.data[i];
}

double Tensor::item() const {
  auto& impl = checked();
  if (impl.data.size() != 1) {
    throw ContractError("item: tensor holds " + std::to_string(impl.data.size()) +
                        " elements, expected exactly one");
  }
  return impl.data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool v) { checked().requires_grad = v; }

double* Tensor::grad_data() {
  auto& impl = checked();
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad.data();
}

const double* Tensor::grad_data() const {
  auto& impl = checked();
  return impl.grad.empty() ? nullptr : impl.grad.data();
}

bool Tensor::has_grad() const { return !checked().grad.empty(); }

void Tensor::zero_grad() {
  auto& impl = checked();
  if (!impl.grad.empty()) std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto& impl = checked();
  auto copy = std::make_shared<Impl>();
  copy->shape = impl.shape;
  copy->data = impl.data;  // value copy keeps detached reads stable
  copy->requires_grad = false;
  return Tensor(std::move(copy));
}

Tensor Tensor::clone() const {
  auto& impl = checked();
  auto copy = std::make_shared<Impl>(impl);
  copy->grad.clear();
  return Tensor(std::move(copy));
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

void Tape::record(std::function<void()> pull) {
  if (consumed_) throw StateError("tape already consumed by backward");
  nodes_.push_back(std::move(pull));
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw StateError("tape already consumed by backward");
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward: root must be a one-element tensor");
  }
  consumed_ = true;
  Tensor seed = root;
  seed.grad_data()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape_; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

}  // namespace amd
