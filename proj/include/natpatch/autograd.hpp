// Copyright 2026 The natpatch Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Small reverse-mode automatic differentiation over dense row-major tensors of
// doubles. Graphs are built eagerly by the free functions below and released
// when the last Tensor handle referring to them goes away. No global state:
// independent graphs may be built and differentiated on different threads as
// long as they do not share leaves that require gradients.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace natpatch::ad {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor constant(Shape shape, double fill);
  static Tensor scalar(double value);
  // Leaf that accumulates gradients on backward().
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t dim(int64_t axis) const;
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<const double> values() const;
  // Only meaningful on leaves; mutating an interior node does not re-run the graph.
  std::span<double> mutable_values();
  double item() const;
  double at(int64_t flat_index) const { return node_->value[flat_index]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag);
  // Gradient accumulated by the last backward(); zeros if none was propagated.
  std::vector<double> grad() const;
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and propagates through the graph. Requires a
  // single-element tensor.
  void backward() const;

  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise binary ops. Shapes must be equal or one must be a trailing
// suffix of the other (the shorter operand is repeated over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

Tensor square(const Tensor& x);
// Gradient at exactly zero is taken as zero.
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduces the last axis.
Tensor sum_last(const Tensor& x);

Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
// Normalizes over the last axis without affine parameters.
Tensor layer_norm_last(const Tensor& x, double eps = 1e-5);

// a: [M,K] or [B,M,K]; b: [K,N] or [B,K,N] ([N,K] / [B,N,K] when transpose_b).
// A batch of one on either side broadcasts.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor reshape(const Tensor& x, Shape shape);
// out[i] = x[index[i]], or 0 where index[i] < 0.
Tensor gather(const Tensor& x, std::vector<int64_t> index, Shape out_shape);
Tensor pick(const Tensor& x, int64_t flat_index);
// out[i] = mask[i] ? a[i] : b[i]
Tensor where(const std::vector<uint8_t>& mask, const Tensor& a, const Tensor& b);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
// Swaps the last two axes.
Tensor transpose_last(const Tensor& x);

// Same-padded, stride-1 2-D convolution in NHWC layout.
// x: [N,H,W,Cin], weight: [k,k,Cin,Cout] with k odd, bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Adam over a fixed set of leaves.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void zero_grad();
  void step();
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace natpatch::ad
