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

#include "natpatch/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace natpatch::ad {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor shape " + shape_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

// Creates an interior node; the backward closure is only attached when some
// input needs a gradient.
Tensor make_op(Shape shape, std::vector<double> values, std::vector<NodePtr> inputs,
               std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in->requires_grad;
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out;
  int64_t n_out, n_a, n_b;
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Broadcast bc;
  if (sa == sb || is_suffix(sb, sa)) {
    bc.out = sa;
  } else if (is_suffix(sa, sb)) {
    bc.out = sb;
  } else {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(sa) +
                                " and " + shape_string(sb));
  }
  bc.n_out = numel(bc.out);
  bc.n_a = a.size();
  bc.n_b = b.size();
  return bc;
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, GradA ga, GradB gb) {
  Broadcast bc = broadcast_shapes(a, b, name);
  std::vector<double> out(bc.n_out);
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  for (int64_t i = 0; i < bc.n_out; ++i) out[i] = fwd(va[i % bc.n_a], vb[i % bc.n_b]);
  NodePtr na = a.node(), nb = b.node();
  return make_op(bc.out, std::move(out), {na, nb}, [na, nb, bc, ga, gb](Node& self) {
    if (na->requires_grad) na->ensure_grad();
    if (nb->requires_grad) nb->ensure_grad();
    for (int64_t i = 0; i < bc.n_out; ++i) {
      const double g = self.grad[i];
      const double x = na->value[i % bc.n_a];
      const double y = nb->value[i % bc.n_b];
      if (na->requires_grad) na->grad[i % bc.n_a] += g * ga(x, y);
      if (nb->requires_grad) nb->grad[i % bc.n_b] += g * gb(x, y);
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& vx = x.node()->value;
  std::vector<double> out(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out[i] = fwd(vx[i]);
  NodePtr nx = x.node();
  return make_op(x.shape(), std::move(out), {nx}, [nx, deriv](Node& self) {
    nx->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      nx->grad[i] += self.grad[i] * deriv(nx->value[i], self.value[i]);
    }
  });
}

int64_t last_dim(const Tensor& x) {
  require(x.rank() >= 1, "operation needs rank >= 1");
  return x.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::constant(Shape shape, double fill) {
  const int64_t n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, fill), false));
}

Tensor Tensor::scalar(double value) { return Tensor(make_leaf({}, {value}, false)); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

const Shape& Tensor::shape() const { return node_->shape; }

int64_t Tensor::dim(int64_t axis) const {
  const int64_t r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range");
  return node_->shape[axis];
}

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  require(size() == 1, "item() on tensor with " + std::to_string(size()) + " elements");
  return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
  require(node_->inputs.empty(), "set_requires_grad on non-leaf tensor");
  node_->requires_grad = flag;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.size() != node_->value.size()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

void Tensor::backward() const {
  require(size() == 1, "backward() needs a single-element tensor");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are recomputed per call; leaves accumulate.
  for (Node* n : order) {
    if (!n->inputs.empty()) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor square(const Tensor& x) {
  return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return unary_op(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kC * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = kC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  NodePtr nx = x.node();
  return make_op({}, {s}, {nx}, [nx](Node& self) {
    nx->ensure_grad();
    for (double& g : nx->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.size() > 0, "mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_last(const Tensor& x) {
  const int64_t n = last_dim(x);
  const int64_t rows = x.size() / std::max<int64_t>(n, 1);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  const auto& v = x.node()->value;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += v[r * n + j];
    out[r] = s;
  }
  NodePtr nx = x.node();
  return make_op(out_shape, std::move(out), {nx}, [nx, n, rows](Node& self) {
    nx->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < n; ++j) nx->grad[r * n + j] += self.grad[r];
  });
}

Tensor softmax_last(const Tensor& x) {
  const int64_t n = last_dim(x);
  require(n > 0, "softmax over empty axis");
  const int64_t rows = x.size() / n;
  const auto& v = x.node()->value;
  std::vector<double> out(v.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (int64_t j = 0; j < n; ++j) o[j] /= z;
  }
  NodePtr nx = x.node();
  return make_op(x.shape(), std::move(out), {nx}, [nx, n, rows](Node& self) {
    nx->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (int64_t j = 0; j < n; ++j) nx->grad[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax_last(const Tensor& x) {
  const int64_t n = last_dim(x);
  require(n > 0, "log_softmax over empty axis");
  const int64_t rows = x.size() / n;
  const auto& v = x.node()->value;
  std::vector<double> out(v.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  NodePtr nx = x.node();
  return make_op(x.shape(), std::move(out), {nx}, [nx, n, rows](Node& self) {
    nx->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (int64_t j = 0; j < n; ++j) gsum += self.grad[r * n + j];
      for (int64_t j = 0; j < n; ++j) {
        const double p = std::exp(self.value[r * n + j]);
        nx->grad[r * n + j] += self.grad[r * n + j] - p * gsum;
      }
    }
  });
}

Tensor layer_norm_last(const Tensor& x, double eps) {
  const int64_t n = last_dim(x);
  require(n > 0, "layer_norm over empty axis");
  const int64_t rows = x.size() / n;
  const auto& v = x.node()->value;
  std::vector<double> out(v.size());
  std::vector<double> inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = (in[j] - mu) * inv_std[r];
  }
  NodePtr nx = x.node();
  return make_op(x.shape(), std::move(out), {nx}, [nx, n, rows, inv_std](Node& self) {
    nx->ensure_grad();
    const double dn = static_cast<double>(n);
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        mean_dy += dy[j];
        mean_dyy += dy[j] * y[j];
      }
      mean_dy /= dn;
      mean_dyy /= dn;
      for (int64_t j = 0; j < n; ++j) {
        nx->grad[r * n + j] += inv_std[r] * (dy[j] - mean_dy - y[j] * mean_dyy);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (int64_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require(a.rank() == 2 || a.rank() == 3, "matmul: lhs must be rank 2 or 3");
  require(b.rank() == 2 || b.rank() == 3, "matmul: rhs must be rank 2 or 3");
  const int64_t ba = a.rank() == 3 ? a.dim(0) : 1;
  const int64_t bb = b.rank() == 3 ? b.dim(0) : 1;
  require(ba == bb || ba == 1 || bb == 1,
          "matmul: batch mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const int64_t batch = std::max(ba, bb);
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  require(k == kb, "matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                       shape_string(b.shape()));

  Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const double* va = a.node()->value.data();
  const double* vb = b.node()->value.data();
  const int64_t sa = ba == 1 ? 0 : m * k;
  const int64_t sb = bb == 1 ? 0 : k * n;
  for (int64_t t = 0; t < batch; ++t) {
    if (transpose_b) {
      gemm_nt(va + t * sa, vb + t * sb, out.data() + t * m * n, m, k, n);
    } else {
      gemm_nn(va + t * sa, vb + t * sb, out.data() + t * m * n, m, k, n);
    }
  }

  NodePtr na = a.node(), nb = b.node();
  return make_op(out_shape, std::move(out), {na, nb},
                 [na, nb, batch, m, k, n, sa, sb, transpose_b](Node& self) {
                   const double* dc = self.grad.data();
                   if (na->requires_grad) {
                     na->ensure_grad();
                     for (int64_t t = 0; t < batch; ++t) {
                       double* da = na->grad.data() + t * sa;
                       const double* bt = nb->value.data() + t * sb;
                       // dA = dC * B^T  (or dC * B when B was given transposed)
                       if (transpose_b) {
                         gemm_nn(dc + t * m * n, bt, da, m, n, k);
                       } else {
                         gemm_nt(dc + t * m * n, bt, da, m, n, k);
                       }
                     }
                   }
                   if (nb->requires_grad) {
                     nb->ensure_grad();
                     for (int64_t t = 0; t < batch; ++t) {
                       double* db = nb->grad.data() + t * sb;
                       const double* at = na->value.data() + t * sa;
                       if (transpose_b) {
                         // dB[N,K] = dC^T * A
                         gemm_tn(dc + t * m * n, at, db, m, n, k);
                       } else {
                         // dB[K,N] = A^T * dC
                         gemm_tn(at, dc + t * m * n, db, m, k, n);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_string(x.shape()) + " -> " +
                                        shape_string(shape) + " changes element count");
  NodePtr nx = x.node();
  return make_op(std::move(shape), nx->value, {nx}, [nx](Node& self) {
    nx->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) nx->grad[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& x, std::vector<int64_t> index, Shape out_shape) {
  require(numel(out_shape) == static_cast<int64_t>(index.size()), "gather: index/shape mismatch");
  const auto& v = x.node()->value;
  std::vector<double> out(index.size());
  for (size_t i = 0; i < index.size(); ++i) {
    require(index[i] < x.size(), "gather: index out of range");
    out[i] = index[i] < 0 ? 0.0 : v[index[i]];
  }
  NodePtr nx = x.node();
  return make_op(std::move(out_shape), std::move(out), {nx},
                 [nx, index = std::move(index)](Node& self) {
                   nx->ensure_grad();
                   for (size_t i = 0; i < index.size(); ++i) {
                     if (index[i] >= 0) nx->grad[index[i]] += self.grad[i];
                   }
                 });
}

Tensor pick(const Tensor& x, int64_t flat_index) {
  require(flat_index >= 0 && flat_index < x.size(), "pick: index out of range");
  return gather(x, {flat_index}, {});
}

Tensor where(const std::vector<uint8_t>& mask, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "where: operand shapes differ");
  require(static_cast<int64_t>(mask.size()) == a.size(), "where: mask size mismatch");
  std::vector<double> out(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? a.at(i) : b.at(i);
  NodePtr na = a.node(), nb = b.node();
  return make_op(a.shape(), std::move(out), {na, nb}, [na, nb, mask](Node& self) {
    if (na->requires_grad) na->ensure_grad();
    if (nb->requires_grad) nb->ensure_grad();
    for (size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) {
        if (na->requires_grad) na->grad[i] += self.grad[i];
      } else if (nb->requires_grad) {
        nb->grad[i] += self.grad[i];
      }
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "stack: no inputs");
  const Shape& inner = parts.front().shape();
  const int64_t n = parts.front().size();
  std::vector<double> out;
  out.reserve(n * parts.size());
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    require(p.shape() == inner, "stack: shape mismatch");
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
  }
  Shape shape{static_cast<int64_t>(parts.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return make_op(std::move(shape), std::move(out), nodes, [nodes, n](Node& self) {
    for (size_t p = 0; p < nodes.size(); ++p) {
      if (!nodes[p]->requires_grad) continue;
      nodes[p]->ensure_grad();
      for (int64_t i = 0; i < n; ++i) nodes[p]->grad[i] += self.grad[p * n + i];
    }
  });
}

Tensor transpose_last(const Tensor& x) {
  require(x.rank() >= 2, "transpose_last needs rank >= 2");
  const int64_t r = x.dim(-2), c = x.dim(-1);
  const int64_t batch = x.size() / std::max<int64_t>(r * c, 1);
  std::vector<int64_t> index(x.size());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < c; ++i)
      for (int64_t j = 0; j < r; ++j) index[b * r * c + i * r + j] = b * r * c + j * c + i;
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return gather(x, std::move(index), std::move(shape));
}

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 4, "conv2d: input must be [N,H,W,C]");
  require(weight.rank() == 4 && weight.dim(0) == weight.dim(1) && weight.dim(0) % 2 == 1,
          "conv2d: weight must be [k,k,Cin,Cout] with odd k");
  const int64_t nb = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const int64_t k = weight.dim(0), cout = weight.dim(3);
  require(weight.dim(2) == cin, "conv2d: channel mismatch");
  require(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias must be [Cout]");
  const int64_t pad = k / 2;

  const double* vx = x.node()->value.data();
  const double* vw = weight.node()->value.data();
  const double* vbias = bias.node()->value.data();
  std::vector<double> out(nb * h * w * cout);
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        double* o = out.data() + ((b * h + i) * w + j) * cout;
        for (int64_t co = 0; co < cout; ++co) o[co] = vbias[co];
        for (int64_t di = 0; di < k; ++di) {
          const int64_t ii = i + di - pad;
          if (ii < 0 || ii >= h) continue;
          for (int64_t dj = 0; dj < k; ++dj) {
            const int64_t jj = j + dj - pad;
            if (jj < 0 || jj >= w) continue;
            const double* xin = vx + ((b * h + ii) * w + jj) * cin;
            const double* wk = vw + (di * k + dj) * cin * cout;
            for (int64_t ci = 0; ci < cin; ++ci) {
              const double xv = xin[ci];
              const double* wrow = wk + ci * cout;
              for (int64_t co = 0; co < cout; ++co) o[co] += xv * wrow[co];
            }
          }
        }
      }

  NodePtr nx = x.node(), nw = weight.node(), nbias = bias.node();
  return make_op({nb, h, w, cout}, std::move(out), {nx, nw, nbias},
                 [nx, nw, nbias, nb, h, w, cin, cout, k, pad](Node& self) {
                   if (nx->requires_grad) nx->ensure_grad();
                   if (nw->requires_grad) nw->ensure_grad();
                   if (nbias->requires_grad) nbias->ensure_grad();
                   for (int64_t b = 0; b < nb; ++b)
                     for (int64_t i = 0; i < h; ++i)
                       for (int64_t j = 0; j < w; ++j) {
                         const double* go = self.grad.data() + ((b * h + i) * w + j) * cout;
                         if (nbias->requires_grad)
                           for (int64_t co = 0; co < cout; ++co) nbias->grad[co] += go[co];
                         for (int64_t di = 0; di < k; ++di) {
                           const int64_t ii = i + di - pad;
                           if (ii < 0 || ii >= h) continue;
                           for (int64_t dj = 0; dj < k; ++dj) {
                             const int64_t jj = j + dj - pad;
                             if (jj < 0 || jj >= w) continue;
                             const int64_t xoff = ((b * h + ii) * w + jj) * cin;
                             const int64_t woff = (di * k + dj) * cin * cout;
                             for (int64_t ci = 0; ci < cin; ++ci) {
                               const double* wrow = nw->value.data() + woff + ci * cout;
                               double gx = 0.0;
                               for (int64_t co = 0; co < cout; ++co) gx += go[co] * wrow[co];
                               if (nx->requires_grad) nx->grad[xoff + ci] += gx;
                               if (nw->requires_grad) {
                                 const double xv = nx->value[xoff + ci];
                                 double* gw = nw->grad.data() + woff + ci * cout;
                                 for (int64_t co = 0; co < cout; ++co) gw[co] += xv * go[co];
                               }
                             }
                           }
                         }
                       }
                 });
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor> params, double learning_rate, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    require(p.requires_grad() && p.node()->inputs.empty(), "Adam: parameters must be leaves");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto values = params_[i].mutable_values();
    const auto& g = params_[i].node()->grad;
    if (g.size() != values.size()) continue;
    for (size_t j = 0; j < values.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
      values[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
    }
  }
}

}  // namespace natpatch::ad
