#pragma once

// Reverse-mode differentiable tensor engine. The tape is a DAG of Node
// records built dynamically during the forward pass; backward() walks it
// in reverse post-order and accumulates gradients into every node that
// requires them. Scalar type is a template parameter: float is the
// training default, double is used by the finite-difference gradient
// suite. Ops that see no grad-requiring input build no tape at all, so
// momentum-twin and evaluation forwards stay plain data flow.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdml/common.hpp"
#include "sdml/errors.hpp"
#include "sdml/kernels.hpp"

namespace sdml {

template <class T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::string name;  // nonempty for parameters
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  std::span<T> grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor full(std::vector<int> shape, T v) {
    auto t = zeros(std::move(shape));
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw ShapeError("from_data: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  std::span<const T> data() const { return node_->value; }
  // Leaf initialization / optimizer updates only; never call on an op
  // output that is still part of a live tape.
  std::span<T> mutable_data() { return node_->value; }

  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " values");
    return node_->value[0];
  }

  T at(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t i = 0;
    for (int v : idx) {
      off = off * static_cast<std::size_t>(node_->shape[i]) + static_cast<std::size_t>(v);
      ++i;
    }
    return node_->value[off];
  }

  // Value copy with no tape participation.
  Tensor detached() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(n);
  }

  std::shared_ptr<Node<T>> node() const { return node_; }
  Node<T>* raw() const { return node_.get(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// ------------------------------------------------------------------------
// op plumbing

namespace detail {

template <class T>
Tensor<T> make_op(std::vector<int> shape, std::vector<std::shared_ptr<Node<T>>> parents,
                  bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel(shape), T(0));
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  if (requires_grad) n->parents = std::move(parents);
  return Tensor<T>(n);
}

template <class T>
bool wants_grad(const Tensor<T>& a) {
  return a.requires_grad();
}

template <class T, class... Ts>
bool wants_grad(const Tensor<T>& a, const Ts&... rest) {
  return a.requires_grad() || wants_grad(rest...);
}

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                               const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace detail

// ------------------------------------------------------------------------
// backward

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: root must be scalar");
  if (!loss.requires_grad()) return;

  // Post-order DFS over grad-requiring nodes; purely structural, so the
  // visit order (and thus float accumulation order) is deterministic.
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.raw(), 0});
  seen.insert(loss.raw());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.raw()->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, detail::wants_grad(a, b));
  auto* y = out.raw();
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), bn = b.node()](Node<T>& self) {
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, detail::wants_grad(a, b));
  auto* y = out.raw();
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), bn = b.node()](Node<T>& self) {
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return out;
}

// Hadamard product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, detail::wants_grad(a, b));
  auto* y = out.raw();
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), bn = b.node()](Node<T>& self) {
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] * c;
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), c](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    };
  }
  return out;
}

template <class T>
Tensor<T> shift(const Tensor<T>& a, T c) {
  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] + c;
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node()](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

// x * s with s a 1-element tensor (learnable scalar).
template <class T>
Tensor<T> mul_by(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("mul_by: scalar operand has shape " + shape_str(s.shape()));
  auto out = detail::make_op<T>(a.shape(), {a.node(), s.node()}, detail::wants_grad(a, s));
  auto* y = out.raw();
  const auto av = a.data();
  const T sv = s.data()[0];
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] * sv;
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), sn = s.node()](Node<T>& self) {
      const T sval = sn->value[0];
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sval;
      }
      if (sn->requires_grad) {
        T acc = T(0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
        sn->grad_buf()[0] += acc;
      }
    };
  }
  return out;
}

// x / s with s a 1-element tensor (temperature division).
template <class T>
Tensor<T> div_by(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("div_by: scalar operand has shape " + shape_str(s.shape()));
  auto out = detail::make_op<T>(a.shape(), {a.node(), s.node()}, detail::wants_grad(a, s));
  auto* y = out.raw();
  const auto av = a.data();
  const T sv = s.data()[0];
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i] / sv;
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), sn = s.node()](Node<T>& self) {
      const T sval = sn->value[0];
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / sval;
      }
      if (sn->requires_grad) {
        T acc = T(0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
        sn->grad_buf()[0] -= acc / (sval * sval);
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  constexpr T kInvSqrt2 = T(0.70710678118654752440084436210485L);
  for (std::size_t i = 0; i < av.size(); ++i) {
    y->value[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * kInvSqrt2));
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node()](Node<T>& self) {
      constexpr T inv_sqrt2 = T(0.70710678118654752440084436210485L);
      constexpr T inv_sqrt2pi = T(0.39894228040143267793994605993438L);
      auto g = an->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = an->value[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av[i];
    if (x >= T(0)) {
      y->value[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      y->value[i] = e / (T(1) + e);
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node()](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T(1) - s);
      }
    };
  }
  return out;
}

// ------------------------------------------------------------------------
// matmul family

namespace detail {

template <class T>
void matmul_dims(const Tensor<T>& a, const Tensor<T>& b, int& batch, int& m, int& k, int& n,
                 bool& b_batched) {
  const int ra = a.rank();
  const int rb = b.rank();
  if (ra == 2 && rb == 2) {
    batch = 1;
    b_batched = false;
  } else if (ra == 3 && rb == 3) {
    if (a.dim(0) != b.dim(0)) {
      throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    batch = a.dim(0);
    b_batched = true;
  } else if (ra == 3 && rb == 2) {
    batch = a.dim(0);
    b_batched = false;
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  m = a.dim(ra - 2);
  k = a.dim(ra - 1);
  if (b.dim(rb - 2) != k) {
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  n = b.dim(rb - 1);
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  int batch = 0, m = 0, k = 0, n = 0;
  bool b_batched = false;
  detail::matmul_dims(a, b, batch, m, k, n, b_batched);
  std::vector<int> oshape = a.rank() == 3 ? std::vector<int>{batch, m, n} : std::vector<int>{m, n};
  auto out = detail::make_op<T>(oshape, {a.node(), b.node()}, detail::wants_grad(a, b));
  auto* y = out.raw();
  const std::size_t a_sz = std::size_t(m) * k, b_sz = std::size_t(k) * n,
                    y_sz = std::size_t(m) * n;
  for (int s = 0; s < batch; ++s) {
    kernels::gemm_nn(a.data().data() + s * a_sz, b.data().data() + (b_batched ? s * b_sz : 0),
                     y->value.data() + s * y_sz, m, k, n);
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), bn = b.node(), batch, m, k, n, b_batched, a_sz, b_sz,
                      y_sz](Node<T>& self) {
      std::vector<T> tmp;
      if (an->requires_grad) {
        auto g = an->grad_buf();
        tmp.assign(a_sz, T(0));
        for (int s = 0; s < batch; ++s) {
          kernels::gemm_nt(self.grad.data() + s * y_sz,
                           bn->value.data() + (b_batched ? s * b_sz : 0), tmp.data(), m, n, k);
          for (std::size_t i = 0; i < a_sz; ++i) g[s * a_sz + i] += tmp[i];
        }
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        tmp.assign(b_sz, T(0));
        for (int s = 0; s < batch; ++s) {
          kernels::gemm_tn(an->value.data() + s * a_sz, self.grad.data() + s * y_sz, tmp.data(), m,
                           k, n);
          const std::size_t off = b_batched ? s * b_sz : 0;
          for (std::size_t i = 0; i < b_sz; ++i) g[off + i] += tmp[i];
        }
      }
    };
  }
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]; rank-2 only (attention scores).
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: incompatible " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = detail::make_op<T>({m, n}, {a.node(), b.node()}, detail::wants_grad(a, b));
  kernels::gemm_nt(a.data().data(), b.data().data(), out.raw()->value.data(), m, k, n);
  if (out.requires_grad()) {
    out.raw()->backward_fn = [an = a.node(), bn = b.node(), m, k, n](Node<T>& self) {
      std::vector<T> tmp;
      if (an->requires_grad) {
        auto g = an->grad_buf();
        tmp.assign(std::size_t(m) * k, T(0));
        kernels::gemm_nn(self.grad.data(), bn->value.data(), tmp.data(), m, n, k);
        for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        tmp.assign(std::size_t(n) * k, T(0));
        kernels::gemm_tn(self.grad.data(), an->value.data(), tmp.data(), m, n, k);
        for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> transpose_2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose_2d: rank != 2, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  auto out = detail::make_op<T>({c, r}, {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) y->value[std::size_t(j) * r + i] = av[std::size_t(i) * c + j];
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), r, c](Node<T>& self) {
      auto g = an->grad_buf();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) g[std::size_t(i) * c + j] += self.grad[std::size_t(j) * r + i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  auto out = detail::make_op<T>(shape, {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) y->value[i] = av[i];
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node()](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

// ------------------------------------------------------------------------
// shape surgery

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis " + std::to_string(axis));
  std::vector<int> oshape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const auto& s = parts[p].shape();
    if (static_cast<int>(s.size()) != rank) {
      throw ShapeError("concat: rank mismatch " + shape_str(oshape) + " vs " + shape_str(s));
    }
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[d] != oshape[d]) {
        throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(s));
      }
    }
    oshape[axis] += s[axis];
  }
  bool needs = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) {
    needs = needs || p.requires_grad();
    parents.push_back(p.node());
  }
  auto out = detail::make_op<T>(oshape, std::move(parents), needs);
  auto* y = out.raw();

  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(oshape[d]);
  std::size_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(oshape[d]);
  const std::size_t out_block = static_cast<std::size_t>(oshape[axis]) * inner;

  std::size_t off = 0;
  std::vector<std::size_t> part_off(parts.size());
  std::vector<std::size_t> part_block(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    part_off[p] = off;
    part_block[p] = static_cast<std::size_t>(parts[p].shape()[axis]) * inner;
    off += part_block[p];
    const auto pv = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < part_block[p]; ++i) {
        y->value[o * out_block + part_off[p] + i] = pv[o * part_block[p] + i];
      }
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [outer, out_block, part_off, part_block](Node<T>& self) {
      for (std::size_t p = 0; p < self.parents.size(); ++p) {
        auto& parent = *self.parents[p];
        if (!parent.requires_grad) continue;
        auto g = parent.grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < part_block[p]; ++i) {
            g[o * part_block[p] + i] += self.grad[o * out_block + part_off[p] + i];
          }
        }
      }
    };
  }
  return out;
}

// Contiguous slice [start, start+len) along one axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& a, int axis, int start, int len) {
  const int rank = a.rank();
  if (axis < 0 || axis >= rank) throw ShapeError("narrow: bad axis " + std::to_string(axis));
  if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
    throw ShapeError("narrow: window [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds axis of " + shape_str(a.shape()));
  }
  std::vector<int> oshape = a.shape();
  oshape[axis] = len;
  auto out = detail::make_op<T>(oshape, {a.node()}, a.requires_grad());
  auto* y = out.raw();

  std::size_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(oshape[d]);
  std::size_t inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(oshape[d]);
  const std::size_t in_block = static_cast<std::size_t>(a.dim(axis)) * inner;
  const std::size_t out_block = static_cast<std::size_t>(len) * inner;
  const std::size_t skip = static_cast<std::size_t>(start) * inner;

  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < out_block; ++i) {
      y->value[o * out_block + i] = av[o * in_block + skip + i];
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), outer, in_block, out_block, skip](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < out_block; ++i) {
          g[o * in_block + skip + i] += self.grad[o * out_block + i];
        }
      }
    };
  }
  return out;
}

// Row gather; grads scatter-add back (also the embedding lookup backbone).
template <class T>
Tensor<T> take_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw ShapeError("take_rows: rank != 2, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= rows) {
      throw LabelError("take_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(rows) + ")");
    }
  }
  auto out =
      detail::make_op<T>({static_cast<int>(idx.size()), cols}, {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (int c = 0; c < cols; ++c) {
      y->value[r * cols + c] = av[std::size_t(idx[r]) * cols + c];
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), idx, cols](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int c = 0; c < cols; ++c) {
          g[std::size_t(idx[r]) * cols + c] += self.grad[r * cols + c];
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  for (int id : ids) {
    if (id < 0 || id >= table.dim(0)) {
      throw LabelError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(table.dim(0)));
    }
  }
  return take_rows(table, ids);
}

// ------------------------------------------------------------------------
// reductions / broadcasts

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  auto out = detail::make_op<T>({1}, {a.node()}, a.requires_grad());
  const auto av = a.data();
  T acc = T(0);
  for (T v : av) acc += v;
  out.raw()->value[0] = acc / static_cast<T>(av.size());
  if (out.requires_grad()) {
    out.raw()->backward_fn = [an = a.node()](Node<T>& self) {
      auto g = an->grad_buf();
      const T s = self.grad[0] / static_cast<T>(g.size());
      for (auto& v : g) v += s;
    };
  }
  return out;
}

// Column means of a [r,c] matrix -> [1,c] (token pooling).
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("mean_rows: rank != 2, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  auto out = detail::make_op<T>({1, c}, {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (int j = 0; j < c; ++j) {
    T acc = T(0);
    for (int i = 0; i < r; ++i) acc += av[std::size_t(i) * c + j];
    y->value[j] = acc / static_cast<T>(r);
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), r, c](Node<T>& self) {
      auto g = an->grad_buf();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) g[std::size_t(i) * c + j] += self.grad[j] / static_cast<T>(r);
      }
    };
  }
  return out;
}

// x[r,c] + b[c] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 1 || b.dim(0) != a.dim(1)) {
    throw ShapeError("add_bias: incompatible " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int r = a.dim(0), c = a.dim(1);
  auto out = detail::make_op<T>(a.shape(), {a.node(), b.node()}, detail::wants_grad(a, b));
  auto* y = out.raw();
  const auto av = a.data();
  const auto bv = b.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) y->value[std::size_t(i) * c + j] = av[std::size_t(i) * c + j] + bv[j];
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), bn = b.node(), r, c](Node<T>& self) {
      if (an->requires_grad) {
        auto g = an->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        auto g = bn->grad_buf();
        for (int j = 0; j < c; ++j) {
          T acc = T(0);
          for (int i = 0; i < r; ++i) acc += self.grad[std::size_t(i) * c + j];
          g[j] += acc;
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ------------------------------------------------------------------------
// normalizations

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int rank = a.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: bad axis for " + shape_str(a.shape()));
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[d]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(shape[d]);
  const int len = shape[axis];

  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  if (inner == 1) {
    kernels::softmax_rows(av.data(), y->value.data(), static_cast<int>(outer), len);
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T mx = av[base];
        for (int j = 1; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
        T sum = T(0);
        for (int j = 0; j < len; ++j) {
          const T e = std::exp(av[base + j * inner] - mx);
          y->value[base + j * inner] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < len; ++j) y->value[base + j * inner] *= inv;
      }
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), outer, inner, len](Node<T>& self) {
      auto g = an->grad_buf();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          T dot = T(0);
          for (int j = 0; j < len; ++j) {
            dot += self.grad[base + j * inner] * self.value[base + j * inner];
          }
          for (int j = 0; j < len; ++j) {
            const std::size_t p = base + j * inner;
            g[p] += self.value[p] * (self.grad[p] - dot);
          }
        }
      }
    };
  }
  return out;
}

inline constexpr double kRmsEps = 1e-6;

// x / rms(x, last axis) * gain.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& a, const Tensor<T>& gain) {
  const int rank = a.rank();
  const int len = a.dim(rank - 1);
  if (gain.rank() != 1 || gain.dim(0) != len) {
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match last axis of " +
                     shape_str(a.shape()));
  }
  const std::size_t rows = a.size() / static_cast<std::size_t>(len);
  auto out = detail::make_op<T>(a.shape(), {a.node(), gain.node()}, detail::wants_grad(a, gain));
  auto* y = out.raw();
  const auto av = a.data();
  const auto gv = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    T ms = T(0);
    for (int j = 0; j < len; ++j) ms += av[base + j] * av[base + j];
    ms /= static_cast<T>(len);
    const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
    for (int j = 0; j < len; ++j) y->value[base + j] = av[base + j] * inv * gv[j];
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), gn = gain.node(), rows, len](Node<T>& self) {
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * len;
        T ms = T(0);
        for (int j = 0; j < len; ++j) ms += an->value[base + j] * an->value[base + j];
        ms /= static_cast<T>(len);
        const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
        if (an->requires_grad) {
          auto g = an->grad_buf();
          T dot = T(0);
          for (int j = 0; j < len; ++j) {
            dot += self.grad[base + j] * gn->value[j] * an->value[base + j];
          }
          const T c = inv * inv * inv / static_cast<T>(len);
          for (int j = 0; j < len; ++j) {
            g[base + j] +=
                self.grad[base + j] * gn->value[j] * inv - c * an->value[base + j] * dot;
          }
        }
        if (gn->requires_grad) {
          auto g = gn->grad_buf();
          for (int j = 0; j < len; ++j) g[j] += self.grad[base + j] * an->value[base + j] * inv;
        }
      }
    };
  }
  return out;
}

// Row L2 normalization (contrastive embeddings).
template <class T>
Tensor<T> unit_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("unit_rows: rank != 2, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  auto out = detail::make_op<T>(a.shape(), {a.node()}, a.requires_grad());
  auto* y = out.raw();
  const auto av = a.data();
  for (int i = 0; i < r; ++i) {
    const std::size_t base = std::size_t(i) * c;
    T sq = T(0);
    for (int j = 0; j < c; ++j) sq += av[base + j] * av[base + j];
    const T nrm = std::sqrt(sq + T(1e-12));
    for (int j = 0; j < c; ++j) y->value[base + j] = av[base + j] / nrm;
  }
  if (out.requires_grad()) {
    y->backward_fn = [an = a.node(), r, c](Node<T>& self) {
      auto g = an->grad_buf();
      for (int i = 0; i < r; ++i) {
        const std::size_t base = std::size_t(i) * c;
        T sq = T(0);
        for (int j = 0; j < c; ++j) sq += an->value[base + j] * an->value[base + j];
        const T nrm = std::sqrt(sq + T(1e-12));
        T dot = T(0);
        for (int j = 0; j < c; ++j) dot += self.grad[base + j] * an->value[base + j];
        dot /= nrm;
        for (int j = 0; j < c; ++j) {
          g[base + j] += (self.grad[base + j] - self.value[base + j] * dot) / nrm;
        }
      }
    };
  }
  return out;
}

// ------------------------------------------------------------------------
// losses

namespace detail {

template <class T>
void log_sum_exp_rows(std::span<const T> x, int rows, int cols, std::vector<T>& lse) {
  lse.resize(rows);
  for (int i = 0; i < rows; ++i) {
    const std::size_t base = std::size_t(i) * cols;
    T mx = x[base];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[base + j]);
    T sum = T(0);
    for (int j = 0; j < cols; ++j) sum += std::exp(x[base + j] - mx);
    lse[i] = mx + std::log(sum);
  }
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits rank != 2, got " + shape_str(logits.shape()));
  }
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= c) {
      throw LabelError("cross_entropy: class index " + std::to_string(t) + " outside [0," +
                       std::to_string(c) + ")");
    }
  }
  auto out = detail::make_op<T>({1}, {logits.node()}, logits.requires_grad());
  std::vector<T> lse;
  detail::log_sum_exp_rows<T>(logits.data(), n, c, lse);
  T acc = T(0);
  for (int i = 0; i < n; ++i) acc += lse[i] - logits.data()[std::size_t(i) * c + targets[i]];
  out.raw()->value[0] = acc / static_cast<T>(n);
  if (out.requires_grad()) {
    out.raw()->backward_fn = [ln = logits.node(), targets, n, c](Node<T>& self) {
      auto g = ln->grad_buf();
      const T s = self.grad[0] / static_cast<T>(n);
      std::vector<T> prob(std::size_t(n) * c);
      kernels::softmax_rows(ln->value.data(), prob.data(), n, c);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) {
          const std::size_t p = std::size_t(i) * c + j;
          g[p] += s * (prob[p] - (j == targets[i] ? T(1) : T(0)));
        }
      }
    };
  }
  return out;
}

// Soft-target form: mean over rows of sum_j y_ij * (lse_i - x_ij).
template <class T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& soft) {
  detail::require_same_shape(logits.shape(), soft.shape(), "cross_entropy_soft");
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy_soft: rank != 2, got " + shape_str(logits.shape()));
  }
  const int n = logits.dim(0), c = logits.dim(1);
  auto out =
      detail::make_op<T>({1}, {logits.node(), soft.node()}, detail::wants_grad(logits, soft));
  std::vector<T> lse;
  detail::log_sum_exp_rows<T>(logits.data(), n, c, lse);
  T acc = T(0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::size_t p = std::size_t(i) * c + j;
      acc += soft.data()[p] * (lse[i] - logits.data()[p]);
    }
  }
  out.raw()->value[0] = acc / static_cast<T>(n);
  if (out.requires_grad()) {
    out.raw()->backward_fn = [ln = logits.node(), sn = soft.node(), n, c](Node<T>& self) {
      const T s = self.grad[0] / static_cast<T>(n);
      std::vector<T> lse2;
      detail::log_sum_exp_rows<T>(std::span<const T>(ln->value), n, c, lse2);
      if (ln->requires_grad) {
        auto g = ln->grad_buf();
        std::vector<T> prob(std::size_t(n) * c);
        kernels::softmax_rows(ln->value.data(), prob.data(), n, c);
        for (int i = 0; i < n; ++i) {
          T rowsum = T(0);
          for (int j = 0; j < c; ++j) rowsum += sn->value[std::size_t(i) * c + j];
          for (int j = 0; j < c; ++j) {
            const std::size_t p = std::size_t(i) * c + j;
            g[p] += s * (rowsum * prob[p] - sn->value[p]);
          }
        }
      }
      if (sn->requires_grad) {
        auto g = sn->grad_buf();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < c; ++j) {
            const std::size_t p = std::size_t(i) * c + j;
            g[p] += s * (lse2[i] - ln->value[p]);
          }
        }
      }
    };
  }
  return out;
}

// Mean-reduced smooth L1 (Huber with quadratic zone |d| < beta).
template <class T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta) {
  detail::require_same_shape(pred.shape(), target.shape(), "smooth_l1");
  if (!(beta > T(0))) throw ConfigError("smooth_l1: beta must be > 0");
  auto out =
      detail::make_op<T>({1}, {pred.node(), target.node()}, detail::wants_grad(pred, target));
  const auto pv = pred.data();
  const auto tv = target.data();
  T acc = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - tv[i];
    const T ad = std::abs(d);
    acc += ad < beta ? T(0.5) * d * d / beta : ad - T(0.5) * beta;
  }
  out.raw()->value[0] = acc / static_cast<T>(pv.size());
  if (out.requires_grad()) {
    out.raw()->backward_fn = [pn = pred.node(), tn = target.node(), beta](Node<T>& self) {
      const T s = self.grad[0] / static_cast<T>(pn->value.size());
      for (std::size_t i = 0; i < pn->value.size(); ++i) {
        const T d = pn->value[i] - tn->value[i];
        const T dd = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
        if (pn->requires_grad) pn->grad_buf()[i] += s * dd;
        if (tn->requires_grad) tn->grad_buf()[i] -= s * dd;
      }
    };
  }
  return out;
}

// ------------------------------------------------------------------------
// convolution / pooling

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: incompatible " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const int ic = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for " + shape_str(x.shape()));
  auto out = detail::make_op<T>({oc, ho, wo}, {x.node(), w.node()}, detail::wants_grad(x, w));
  kernels::conv2d(x.data().data(), w.data().data(), out.raw()->value.data(), ic, h, wd, oc, kh, kw,
                  stride, pad, ho, wo);
  if (out.requires_grad()) {
    out.raw()->backward_fn = [xn = x.node(), wn = w.node(), ic, h, wd, oc, kh, kw, stride, pad, ho,
                              wo](Node<T>& self) {
      if (xn->requires_grad) {
        kernels::conv2d_dx(self.grad.data(), wn->value.data(), xn->grad_buf().data(), ic, h, wd, oc,
                           kh, kw, stride, pad, ho, wo);
      }
      if (wn->requires_grad) {
        kernels::conv2d_dw(xn->value.data(), self.grad.data(), wn->grad_buf().data(), ic, h, wd, oc,
                           kh, kw, stride, pad, ho, wo);
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int factor) {
  if (x.rank() != 3) throw ShapeError("avg_pool2d: rank != 3, got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw ShapeError("avg_pool2d: factor " + std::to_string(factor) + " does not divide " +
                     shape_str(x.shape()));
  }
  const int ho = h / factor, wo = w / factor;
  auto out = detail::make_op<T>({c, ho, wo}, {x.node()}, x.requires_grad());
  auto* y = out.raw();
  const auto xv = x.data();
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) {
            acc += xv[(std::size_t(ch) * h + oy * factor + dy) * w + ox * factor + dx];
          }
        }
        y->value[(std::size_t(ch) * ho + oy) * wo + ox] = acc * inv;
      }
    }
  }
  if (out.requires_grad()) {
    y->backward_fn = [xn = x.node(), c, h, w, ho, wo, factor, inv](Node<T>& self) {
      auto g = xn->grad_buf();
      for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const T s = self.grad[(std::size_t(ch) * ho + oy) * wo + ox] * inv;
            for (int dy = 0; dy < factor; ++dy) {
              for (int dx = 0; dx < factor; ++dx) {
                g[(std::size_t(ch) * h + oy * factor + dy) * w + ox * factor + dx] += s;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// ------------------------------------------------------------------------
// in-place data helpers (never on tape)

// target <- m * target + (1 - m) * source, elementwise.
template <class T>
void ema_update(Tensor<T>& target, const Tensor<T>& source, T m) {
  detail::require_same_shape(target.shape(), source.shape(), "ema_update");
  auto t = target.mutable_data();
  const auto s = source.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = m * t[i] + (T(1) - m) * s[i];
}

}  // namespace sdml
