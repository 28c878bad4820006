#pragma once

// Reverse-mode autodiff over dense row-major Eigen matrices, templated on the
// scalar so the same graph code runs in float (training) or double (gradient
// checking). A tensor of shape [d0, ..., dk] is stored as a
// (d0*...*d(k-1)) x dk matrix; most operations act on the trailing feature
// dimension, which keeps everything an ordinary Eigen expression.
//
// Graphs are implicit: each op node keeps shared_ptr links to its parents and
// a closure that pushes its gradient one step backward. backward() walks that
// DAG once in reverse topological order. Tapes are rebuilt every forward
// pass; parameters are the only long-lived nodes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maple/errors.hpp"
#include "maple/rng.hpp"

namespace maple {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<Eigen::Index>;

inline Eigen::Index numel(const Shape& s) {
  Eigen::Index n = 1;
  for (Eigen::Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

template <class S>
struct Node {
  Shape shape;
  Mat<S> value;  // (numel/shape.back(), shape.back())
  Mat<S> grad;   // same geometry as value; allocated during backward
  bool requires_grad = false;
  bool grad_ready = false;
  std::string name;  // parameters only
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, feeds parents
};

}  // namespace detail

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, Mat<S> value) {
    return make(std::move(shape), std::move(value), false, "");
  }

  static Tensor param(Shape shape, Mat<S> value, std::string name) {
    return make(std::move(shape), std::move(value), true, std::move(name));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  Eigen::Index size() const { return numel(n_->shape); }
  Eigen::Index rows() const { return n_->value.rows(); }
  Eigen::Index cols() const { return n_->value.cols(); }
  const Mat<S>& value() const { return n_->value; }
  const std::string& name() const { return n_->name; }
  bool requires_grad() const { return n_->requires_grad; }

  // In-place access for the optimizer and checkpoint loading. Only sensible
  // on leaves; interior nodes are rebuilt each forward pass anyway.
  Mat<S>& raw_value() { return n_->value; }

  const Mat<S>& grad() const {
    if (!n_->grad_ready) {
      throw ValueError("gradient not populated; call backward() first");
    }
    return n_->grad;
  }

  Mat<S>& raw_grad() {
    if (!n_->grad_ready) {
      throw ValueError("gradient not populated; call backward() first");
    }
    return n_->grad;
  }

  void zero_grad() {
    n_->grad.setZero(n_->value.rows(), n_->value.cols());
    n_->grad_ready = true;
  }

  S scalar() const {
    if (size() != 1) {
      throw ShapeError("scalar() on tensor of shape " + shape_str(shape()));
    }
    return n_->value(0, 0);
  }

  // Reverse pass from a scalar loss. Gradients of every reachable node that
  // requires them are zeroed first, so repeated calls are idempotent.
  void backward() const {
    if (size() != 1) {
      throw ValueError("backward() needs a scalar loss, got shape " +
                       shape_str(shape()));
    }
    // Iterative post-order DFS; reversed, it yields every node before any of
    // its parents, i.e. after all of its consumers.
    std::vector<detail::Node<S>*> topo;
    std::unordered_set<detail::Node<S>*> seen;
    std::vector<std::pair<detail::Node<S>*, size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node<S>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }

    bool any_leaf = false;
    for (auto* node : topo) {
      node->grad.setZero(node->value.rows(), node->value.cols());
      node->grad_ready = true;
      if (!node->backprop && node->requires_grad) any_leaf = true;
    }
    if (!any_leaf) {
      throw ValueError("backward() found no trainable leaves");
    }

    n_->grad(0, 0) = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

  static Tensor from_node(std::shared_ptr<detail::Node<S>> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  static Tensor make(Shape shape, Mat<S> value, bool requires_grad,
                     std::string name) {
    Eigen::Index last = shape.empty() ? 1 : shape.back();
    Eigen::Index lead = shape.empty() ? 1 : numel(shape) / last;
    if (value.rows() != lead || value.cols() != last) {
      throw ShapeError("tensor storage " + std::to_string(value.rows()) + "x" +
                       std::to_string(value.cols()) +
                       " does not match shape " + shape_str(shape));
    }
    if (!value.allFinite()) {
      throw NumericError("tensor '" + name + "' holds non-finite values");
    }
    auto n = std::make_shared<detail::Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

  std::shared_ptr<detail::Node<S>> n_;
};

// Builds an op node. Extension point for ops defined outside this header
// (graph aggregation defines one); `backprop` must guard each parent with
// requires_grad before accumulating into its grad.
template <class S>
Tensor<S> make_op(const char* op, Shape shape, Mat<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(detail::Node<S>&)> backprop) {
  if (!value.allFinite()) {
    throw NumericError(std::string(op) + " produced non-finite values");
  }
  Eigen::Index last = shape.empty() ? 1 : shape.back();
  if (value.cols() != last || value.rows() * value.cols() != numel(shape)) {
    throw ShapeError(std::string(op) + ": storage does not match shape " +
                     shape_str(shape));
  }
  auto n = std::make_shared<detail::Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Tensor<S>::from_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Shape helpers

template <class S>
Tensor<S> zeros(Shape shape) {
  Eigen::Index last = shape.empty() ? 1 : shape.back();
  Eigen::Index lead = numel(shape) / std::max<Eigen::Index>(last, 1);
  return Tensor<S>::constant(std::move(shape), Mat<S>::Zero(lead, last));
}

template <class S>
Tensor<S> full(Shape shape, S v) {
  Eigen::Index last = shape.empty() ? 1 : shape.back();
  Eigen::Index lead = numel(shape) / std::max<Eigen::Index>(last, 1);
  return Tensor<S>::constant(std::move(shape),
                             Mat<S>::Constant(lead, last, v));
}

template <class S>
Tensor<S> scalar_tensor(S v) {
  return full<S>({1}, v);
}

// Same data, new shape. The flat row-major layout is shared, so this is a
// relayout of the storage matrix only.
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  Eigen::Index last = shape.empty() ? 1 : shape.back();
  Eigen::Index lead = numel(shape) / last;
  Mat<S> v(lead, last);
  Eigen::Map<Mat<S>>(v.data(), lead, last) =
      Eigen::Map<const Mat<S>>(x.value().data(), lead, last);
  auto xn = x.node();
  return make_op<S>(
      "reshape", std::move(shape), std::move(v), {x},
      [xn](detail::Node<S>& out) {
        Eigen::Map<Mat<S>> flat(xn->grad.data(), out.grad.rows(),
                                out.grad.cols());
        flat += out.grad;
      });
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic.
//
// Allowed: identical shapes, a scalar on either side, or one operand whose
// shape is a trailing suffix of the other's (leading-dimension expansion,
// e.g. [d] against [B,T,d] or [N,d] against [B,N,d]).

namespace detail {

enum class Bcast { none, left_scalar, right_scalar, left_suffix, right_suffix };

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() >= big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Bcast bcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::none;
  if (numel(b) == 1) return Bcast::right_scalar;
  if (numel(a) == 1) return Bcast::left_scalar;
  if (is_suffix(b, a)) return Bcast::right_suffix;
  if (is_suffix(a, b)) return Bcast::left_suffix;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                   " with " + shape_str(b));
}

// Sums `big`-shaped gradient blocks back down to `small` geometry.
template <class S>
Mat<S> reduce_to(const Mat<S>& big, Eigen::Index small_rows,
                 Eigen::Index small_cols) {
  if (small_rows == 1 && small_cols == 1) {
    Mat<S> r(1, 1);
    r(0, 0) = big.sum();
    return r;
  }
  Mat<S> r = Mat<S>::Zero(small_rows, small_cols);
  Eigen::Index reps = big.rows() / small_rows;
  for (Eigen::Index i = 0; i < reps; ++i) {
    r += big.middleRows(i * small_rows, small_rows);
  }
  return r;
}

template <class S, class F, class DfA, class DfB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    F&& f, DfA&& dfa, DfB&& dfb) {
  Bcast k = bcast_kind(a.shape(), b.shape(), name);
  const Mat<S>& av = a.value();
  const Mat<S>& bv = b.value();
  Mat<S> out;
  switch (k) {
    case Bcast::none:
      out = f(av, bv);
      break;
    case Bcast::right_scalar:
      out = f(av, Mat<S>::Constant(av.rows(), av.cols(), bv(0, 0)));
      break;
    case Bcast::left_scalar:
      out = f(Mat<S>::Constant(bv.rows(), bv.cols(), av(0, 0)), bv);
      break;
    case Bcast::right_suffix: {
      out.resize(av.rows(), av.cols());
      Eigen::Index reps = av.rows() / bv.rows();
      for (Eigen::Index i = 0; i < reps; ++i) {
        out.middleRows(i * bv.rows(), bv.rows()) =
            f(av.middleRows(i * bv.rows(), bv.rows()), bv);
      }
      break;
    }
    case Bcast::left_suffix: {
      out.resize(bv.rows(), bv.cols());
      Eigen::Index reps = bv.rows() / av.rows();
      for (Eigen::Index i = 0; i < reps; ++i) {
        out.middleRows(i * av.rows(), av.rows()) =
            f(av, bv.middleRows(i * av.rows(), av.rows()));
      }
      break;
    }
  }
  Shape shape = numel(a.shape()) >= numel(b.shape()) ? a.shape() : b.shape();
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(
      name, std::move(shape), std::move(out), {a, b},
      [an, bn, dfa, dfb, k](detail::Node<S>& o) {
        if (an->requires_grad) {
          Mat<S> da = dfa(o, an->value, bn->value, k);
          if (da.rows() != an->grad.rows()) {
            da = reduce_to<S>(da, an->grad.rows(), an->grad.cols());
          }
          an->grad += da;
        }
        if (bn->requires_grad) {
          Mat<S> db = dfb(o, an->value, bn->value, k);
          if (db.rows() != bn->grad.rows()) {
            db = reduce_to<S>(db, bn->grad.rows(), bn->grad.cols());
          }
          bn->grad += db;
        }
      });
}

// Expands a possibly-broadcast operand to the geometry of `like`.
template <class S>
Mat<S> expand_like(const Mat<S>& v, const Mat<S>& like) {
  if (v.rows() == like.rows() && v.cols() == like.cols()) return v;
  if (v.size() == 1) {
    return Mat<S>::Constant(like.rows(), like.cols(), v(0, 0));
  }
  Mat<S> out(like.rows(), like.cols());
  Eigen::Index reps = like.rows() / v.rows();
  for (Eigen::Index i = 0; i < reps; ++i) {
    out.middleRows(i * v.rows(), v.rows()) = v;
  }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "add", a, b, [](const auto& x, const auto& y) -> Mat<S> { return x + y; },
      [](detail::Node<S>& o, const Mat<S>&, const Mat<S>&,
         detail::Bcast) -> Mat<S> { return o.grad; },
      [](detail::Node<S>& o, const Mat<S>&, const Mat<S>&,
         detail::Bcast) -> Mat<S> { return o.grad; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "sub", a, b, [](const auto& x, const auto& y) -> Mat<S> { return x - y; },
      [](detail::Node<S>& o, const Mat<S>&, const Mat<S>&,
         detail::Bcast) -> Mat<S> { return o.grad; },
      [](detail::Node<S>& o, const Mat<S>&, const Mat<S>&,
         detail::Bcast) -> Mat<S> { return -o.grad; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      "mul", a, b,
      [](const auto& x, const auto& y) -> Mat<S> {
        return x.cwiseProduct(y);
      },
      [](detail::Node<S>& o, const Mat<S>&, const Mat<S>& bv,
         detail::Bcast) -> Mat<S> {
        return o.grad.cwiseProduct(detail::expand_like<S>(bv, o.grad));
      },
      [](detail::Node<S>& o, const Mat<S>& av, const Mat<S>&,
         detail::Bcast) -> Mat<S> {
        return o.grad.cwiseProduct(detail::expand_like<S>(av, o.grad));
      });
}

// Multiplication by a plain constant (not a graph node).
template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  auto xn = x.node();
  return make_op<S>(
      "scale", x.shape(), Mat<S>(x.value() * c), {x},
      [xn, c](detail::Node<S>& o) { xn->grad += o.grad * c; });
}

// ---------------------------------------------------------------------------
// matmul: [..., m, k] x [k, n] -> [..., m, n]. The left operand's leading
// dims are flattened into rows, so one GEMM covers the whole batch.

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().empty() || b.shape().size() != 2) {
    throw ShapeError("matmul expects [..,m,k] x [k,n], got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  if (a.shape().back() != b.shape()[0]) {
    throw ShapeError("matmul inner dims disagree: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape.back() = b.shape()[1];
  Mat<S> out = a.value() * b.value();
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(
      "matmul", std::move(shape), std::move(out), {a, b},
      [an, bn](detail::Node<S>& o) {
        if (an->requires_grad) an->grad.noalias() += o.grad * bn->value.transpose();
        if (bn->requires_grad) bn->grad.noalias() += an->value.transpose() * o.grad;
      });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  // 0.5*(1+tanh(x/2)) is the numerically stable logistic.
  Mat<S> s =
      ((x.value() * S(0.5)).array().tanh() * S(0.5) + S(0.5)).matrix();
  auto xn = x.node();
  auto sn = std::make_shared<Mat<S>>(s);
  return make_op<S>(
      "sigmoid", x.shape(), std::move(s), {x},
      [xn, sn](detail::Node<S>& o) {
        xn->grad.array() +=
            o.grad.array() * sn->array() * (S(1) - sn->array());
      });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Mat<S> v = x.value().cwiseMax(S(0));
  auto xn = x.node();
  return make_op<S>(
      "relu", x.shape(), std::move(v), {x},
      [xn](detail::Node<S>& o) {
        xn->grad.array() +=
            o.grad.array() * (xn->value.array() > S(0)).template cast<S>();
      });
}

// tanh-approximated GELU: 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3))).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S c = S(0.7978845608028654);  // sqrt(2/pi)
  const S k = S(0.044715);
  auto xa = x.value().array();
  Mat<S> t = (c * (xa + k * xa.cube())).tanh().matrix();
  Mat<S> v = (S(0.5) * xa * (S(1) + t.array())).matrix();
  auto xn = x.node();
  auto tn = std::make_shared<Mat<S>>(std::move(t));
  return make_op<S>(
      "gelu", x.shape(), std::move(v), {x},
      [xn, tn, c, k](detail::Node<S>& o) {
        auto xv = xn->value.array();
        auto th = tn->array();
        auto inner = c * (S(1) + S(3) * k * xv.square());
        auto d = S(0.5) * (S(1) + th) + S(0.5) * xv * (S(1) - th.square()) * inner;
        xn->grad.array() += o.grad.array() * d;
      });
}

// ---------------------------------------------------------------------------
// Normalization and reductions

// LayerNorm over the trailing dimension with learnable gain/bias (shape [d]).
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5)) {
  Eigen::Index d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm gain/bias must have " + std::to_string(d) +
                     " elements");
  }
  const Mat<S>& xv = x.value();
  Mat<S> xhat(xv.rows(), d);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    S mean = xv.row(r).mean();
    S var = (xv.row(r).array() - mean).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((xv.row(r).array() - mean) * is).matrix();
  }
  Mat<S> out(xv.rows(), d);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    out.row(r) = xhat.row(r).cwiseProduct(gain.value().reshaped(1, d)) +
                 bias.value().reshaped(1, d);
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  auto xh = std::make_shared<Mat<S>>(std::move(xhat));
  auto istd = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(
      std::move(inv_std));
  return make_op<S>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, xh, istd, d](detail::Node<S>& o) {
        auto g = gn->value.reshaped(1, d);
        for (Eigen::Index r = 0; r < o.grad.rows(); ++r) {
          auto dy = o.grad.row(r).array();
          auto xr = xh->row(r).array();
          if (gn->requires_grad) {
            gn->grad.reshaped(1, d).array() += dy * xr;
          }
          if (bn->requires_grad) {
            bn->grad.reshaped(1, d).array() += dy;
          }
          if (xn->requires_grad) {
            auto gdy = dy * g.array();
            S m1 = gdy.mean();
            S m2 = (gdy * xr).mean();
            xn->grad.row(r).array() += (gdy - m1 - xr * m2) * (*istd)(r);
          }
        }
      });
}

// Mean over one axis: [.., n, ..] -> the same shape with that axis removed.
template <class S>
Tensor<S> mean_over_axis(const Tensor<S>& x, int axis) {
  const Shape& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank) {
    throw ShapeError("mean_over_axis: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(s));
  }
  Eigen::Index lead = 1, trail = 1;
  for (int i = 0; i < axis; ++i) lead *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) trail *= s[static_cast<size_t>(i)];
  Eigen::Index n = s[static_cast<size_t>(axis)];

  // Viewed as (lead*n, trail), the reduction is a strided row sum.
  Eigen::Map<const Mat<S>> in(x.value().data(), lead * n, trail);
  Mat<S> acc = Mat<S>::Zero(lead, trail);
  for (Eigen::Index l = 0; l < lead; ++l) {
    for (Eigen::Index i = 0; i < n; ++i) acc.row(l) += in.row(l * n + i);
  }
  acc /= static_cast<S>(n);

  Shape out_shape;
  for (int i = 0; i < rank; ++i) {
    if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
  }
  Eigen::Index out_last = out_shape.empty() ? 1 : out_shape.back();
  Mat<S> out(numel(out_shape) / std::max<Eigen::Index>(out_last, 1), out_last);
  Eigen::Map<Mat<S>>(out.data(), out.rows(), out.cols()) =
      Eigen::Map<Mat<S>>(acc.data(), out.rows(), out.cols());

  auto xn = x.node();
  return make_op<S>(
      "mean_over_axis", std::move(out_shape), std::move(out), {x},
      [xn, lead, n, trail](detail::Node<S>& o) {
        Eigen::Map<Mat<S>> gx(xn->grad.data(), lead * n, trail);
        Eigen::Map<const Mat<S>> go(o.grad.data(), lead, trail);
        S inv = S(1) / static_cast<S>(n);
        for (Eigen::Index l = 0; l < lead; ++l) {
          for (Eigen::Index i = 0; i < n; ++i) {
            gx.row(l * n + i) += go.row(l) * inv;
          }
        }
      });
}

// Full reduction to a scalar of shape [1].
template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  Mat<S> v(1, 1);
  v(0, 0) = x.value().sum();
  auto xn = x.node();
  return make_op<S>(
      "sum", {1}, std::move(v), {x},
      [xn](detail::Node<S>& o) {
        xn->grad.array() += o.grad(0, 0);
      });
}

// Concatenation along the trailing dimension.
template <class S>
Tensor<S> concat_last_dim(const Tensor<S>& a, const Tensor<S>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || sa.empty()) {
    throw ShapeError("concat_last_dim rank mismatch: " + shape_str(sa) +
                     " vs " + shape_str(sb));
  }
  for (size_t i = 0; i + 1 < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw ShapeError("concat_last_dim leading dims disagree: " +
                       shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  Eigen::Index ca = sa.back(), cb = sb.back();
  Mat<S> v(a.rows(), ca + cb);
  v.leftCols(ca) = a.value();
  v.rightCols(cb) = b.value();
  Shape shape = sa;
  shape.back() = ca + cb;
  auto an = a.node();
  auto bn = b.node();
  return make_op<S>(
      "concat_last_dim", std::move(shape), std::move(v), {a, b},
      [an, bn, ca, cb](detail::Node<S>& o) {
        if (an->requires_grad) an->grad += o.grad.leftCols(ca);
        if (bn->requires_grad) bn->grad += o.grad.rightCols(cb);
      });
}

// Row-wise L2 normalization with an epsilon floor on the norm.
template <class S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x, S eps = S(1e-12)) {
  const Mat<S>& xv = x.value();
  Mat<S> out(xv.rows(), xv.cols());
  Eigen::Matrix<S, Eigen::Dynamic, 1> r(xv.rows());
  Eigen::Matrix<bool, Eigen::Dynamic, 1> clamped(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    S nrm = xv.row(i).norm();
    clamped(i) = nrm < eps;
    r(i) = clamped(i) ? eps : nrm;
    out.row(i) = xv.row(i) / r(i);
  }
  auto xn = x.node();
  auto rp = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(std::move(r));
  auto cp = std::make_shared<Eigen::Matrix<bool, Eigen::Dynamic, 1>>(
      std::move(clamped));
  return make_op<S>(
      "l2_normalize_rows", x.shape(), std::move(out), {x},
      [xn, rp, cp](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < o.grad.rows(); ++i) {
          S ri = (*rp)(i);
          if ((*cp)(i)) {
            // Below the floor the map is x/eps, which is linear.
            xn->grad.row(i) += o.grad.row(i) / ri;
          } else {
            S dot = xn->value.row(i).dot(o.grad.row(i));
            xn->grad.row(i) +=
                o.grad.row(i) / ri - xn->value.row(i) * (dot / (ri * ri * ri));
          }
        }
      });
}

// Row-stable softmax over the trailing dimension.
template <class S>
Tensor<S> softmax_last_dim(const Tensor<S>& x) {
  const Mat<S>& xv = x.value();
  Mat<S> p(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    auto row = xv.row(i).array();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  auto xn = x.node();
  auto pn = std::make_shared<Mat<S>>(p);
  return make_op<S>(
      "softmax_last_dim", x.shape(), std::move(p), {x},
      [xn, pn](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < o.grad.rows(); ++i) {
          S dot = o.grad.row(i).dot(pn->row(i));
          xn->grad.row(i).array() +=
              pn->row(i).array() * (o.grad.row(i).array() - dot);
        }
      });
}

// Inverted dropout. Identity when not training or when rate is zero; the
// mask is drawn element by element in row-major order from `rng`, so a fixed
// seed fixes the mask.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ValueError("dropout rate must lie in [0,1), got " +
                     std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  S keep_scale = S(1.0 / (1.0 - rate));
  Mat<S> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      mask(i, j) = rng.uniform() >= rate ? keep_scale : S(0);
    }
  }
  auto xn = x.node();
  auto mp = std::make_shared<Mat<S>>(std::move(mask));
  return make_op<S>(
      "dropout", x.shape(), Mat<S>(x.value().cwiseProduct(*mp)), {x},
      [xn, mp](detail::Node<S>& o) {
        xn->grad += o.grad.cwiseProduct(*mp);
      });
}

// ---------------------------------------------------------------------------
// Structural ops for token sequences ([B, T, d] tensors)

// [shape] -> [reps, shape]; gradient sums over the new leading axis.
template <class S>
Tensor<S> tile_leading(const Tensor<S>& x, Eigen::Index reps) {
  if (reps < 1) throw ShapeError("tile_leading needs reps >= 1");
  Eigen::Index r = x.rows();
  Mat<S> v(r * reps, x.cols());
  for (Eigen::Index i = 0; i < reps; ++i) v.middleRows(i * r, r) = x.value();
  Shape shape;
  shape.push_back(reps);
  for (Eigen::Index d : x.shape()) shape.push_back(d);
  auto xn = x.node();
  return make_op<S>(
      "tile_leading", std::move(shape), std::move(v), {x},
      [xn, r, reps](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < reps; ++i) {
          xn->grad += o.grad.middleRows(i * r, r);
        }
      });
}

// [B, d] -> [B, M, d], every row repeated M times in place.
template <class S>
Tensor<S> expand_mid(const Tensor<S>& z, Eigen::Index m) {
  if (z.shape().size() != 2) {
    throw ShapeError("expand_mid expects [B,d], got " + shape_str(z.shape()));
  }
  Eigen::Index b = z.shape()[0], d = z.shape()[1];
  Mat<S> v(b * m, d);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) v.row(i * m + j) = z.value().row(i);
  }
  auto zn = z.node();
  return make_op<S>(
      "expand_mid", {b, m, d}, std::move(v), {z},
      [zn, b, m](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < b; ++i) {
          for (Eigen::Index j = 0; j < m; ++j) {
            zn->grad.row(i) += o.grad.row(i * m + j);
          }
        }
      });
}

// Token-axis slice: [B, T, d] -> [B, len, d] keeping tokens [start, start+len).
template <class S>
Tensor<S> token_slice(const Tensor<S>& x, Eigen::Index start,
                      Eigen::Index len) {
  if (x.shape().size() != 3) {
    throw ShapeError("token_slice expects [B,T,d], got " +
                     shape_str(x.shape()));
  }
  Eigen::Index b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  if (start < 0 || len < 1 || start + len > t) {
    throw ShapeError("token_slice [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") outside sequence of " +
                     std::to_string(t));
  }
  Mat<S> v(b * len, d);
  for (Eigen::Index i = 0; i < b; ++i) {
    v.middleRows(i * len, len) = x.value().middleRows(i * t + start, len);
  }
  auto xn = x.node();
  return make_op<S>(
      "token_slice", {b, len, d}, std::move(v), {x},
      [xn, b, t, len, start](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < b; ++i) {
          xn->grad.middleRows(i * t + start, len) +=
              o.grad.middleRows(i * len, len);
        }
      });
}

// Token-axis concatenation of [B, Ti, d] parts into [B, sum Ti, d].
template <class S>
Tensor<S> token_concat(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("token_concat of nothing");
  Eigen::Index b = parts[0].shape()[0], d = 0, total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 3 || p.shape()[0] != b) {
      throw ShapeError("token_concat parts must share [B,*,d] geometry");
    }
    if (d == 0) d = p.shape()[2];
    if (p.shape()[2] != d) {
      throw ShapeError("token_concat feature dims disagree");
    }
    total += p.shape()[1];
  }
  Mat<S> v(b * total, d);
  std::vector<Eigen::Index> lens;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    Eigen::Index ti = p.shape()[1];
    lens.push_back(ti);
    for (Eigen::Index i = 0; i < b; ++i) {
      v.middleRows(i * total + off, ti) = p.value().middleRows(i * ti, ti);
    }
    off += ti;
  }
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<S>(
      "token_concat", {b, total, d}, std::move(v), parts,
      [nodes, lens, b, total](detail::Node<S>& o) {
        Eigen::Index off = 0;
        for (size_t k = 0; k < nodes.size(); ++k) {
          Eigen::Index ti = lens[k];
          if (nodes[k]->requires_grad) {
            for (Eigen::Index i = 0; i < b; ++i) {
              nodes[k]->grad.middleRows(i * ti, ti) +=
                  o.grad.middleRows(i * total + off, ti);
            }
          }
          off += ti;
        }
      });
}

// Column gather (also used for contiguous column slices).
template <class S>
Tensor<S> gather_cols(const Tensor<S>& x, std::vector<Eigen::Index> ids) {
  Eigen::Index c = x.cols();
  for (Eigen::Index id : ids) {
    if (id < 0 || id >= c) {
      throw ShapeError("gather_cols: column " + std::to_string(id) +
                       " outside 0.." + std::to_string(c - 1));
    }
  }
  Mat<S> v(x.rows(), static_cast<Eigen::Index>(ids.size()));
  for (size_t j = 0; j < ids.size(); ++j) v.col(static_cast<Eigen::Index>(j)) = x.value().col(ids[j]);
  Shape shape = x.shape();
  shape.back() = static_cast<Eigen::Index>(ids.size());
  auto xn = x.node();
  auto idp = std::make_shared<std::vector<Eigen::Index>>(std::move(ids));
  return make_op<S>(
      "gather_cols", std::move(shape), std::move(v), {x},
      [xn, idp](detail::Node<S>& o) {
        for (size_t j = 0; j < idp->size(); ++j) {
          xn->grad.col((*idp)[j]) += o.grad.col(static_cast<Eigen::Index>(j));
        }
      });
}

// Row gather on rank-2 tensors.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<Eigen::Index> ids) {
  if (x.shape().size() != 2) {
    throw ShapeError("gather_rows expects rank-2, got " +
                     shape_str(x.shape()));
  }
  for (Eigen::Index id : ids) {
    if (id < 0 || id >= x.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(id) +
                       " outside 0.." + std::to_string(x.rows() - 1));
    }
  }
  Mat<S> v(static_cast<Eigen::Index>(ids.size()), x.cols());
  for (size_t i = 0; i < ids.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = x.value().row(ids[i]);
  auto xn = x.node();
  auto idp = std::make_shared<std::vector<Eigen::Index>>(std::move(ids));
  return make_op<S>(
      "gather_rows", {static_cast<Eigen::Index>(idp->size()), x.cols()},
      std::move(v), {x},
      [xn, idp](detail::Node<S>& o) {
        for (size_t i = 0; i < idp->size(); ++i) {
          xn->grad.row((*idp)[i]) += o.grad.row(static_cast<Eigen::Index>(i));
        }
      });
}

// ---------------------------------------------------------------------------
// Scaled dot-product self-attention over [B, T, d] with h heads. Forward and
// backward are written out per (batch, head); the softmax rows are cached
// for the reverse pass.

template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    int heads) {
  const Shape& s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s) {
    throw ShapeError("attention expects three [B,T,d] tensors");
  }
  Eigen::Index b = s[0], t = s[1], d = s[2];
  if (heads < 1 || d % heads != 0) {
    throw ShapeError("attention: feature dim " + std::to_string(d) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  Eigen::Index dh = d / heads;
  S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  Mat<S> out(b * t, d);
  auto probs = std::make_shared<Mat<S>>(b * heads * t, t);
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      auto qb = q.value().block(bi * t, h * dh, t, dh);
      auto kb = k.value().block(bi * t, h * dh, t, dh);
      auto vb = v.value().block(bi * t, h * dh, t, dh);
      Mat<S> logits = (qb * kb.transpose()) * inv_sqrt;
      auto pb = probs->middleRows((bi * heads + h) * t, t);
      for (Eigen::Index r = 0; r < t; ++r) {
        auto row = logits.row(r).array();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
        pb.row(r) = (e / e.sum()).matrix();
      }
      out.block(bi * t, h * dh, t, dh) = pb * vb;
    }
  }

  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  return make_op<S>(
      "attention", s, std::move(out), {q, k, v},
      [qn, kn, vn, probs, b, t, dh, heads, inv_sqrt](detail::Node<S>& o) {
        for (Eigen::Index bi = 0; bi < b; ++bi) {
          for (int h = 0; h < heads; ++h) {
            auto pb = probs->middleRows((bi * heads + h) * t, t);
            auto dob = o.grad.block(bi * t, h * dh, t, dh);
            auto qb = qn->value.block(bi * t, h * dh, t, dh);
            auto kb = kn->value.block(bi * t, h * dh, t, dh);
            auto vb = vn->value.block(bi * t, h * dh, t, dh);
            if (vn->requires_grad) {
              vn->grad.block(bi * t, h * dh, t, dh).noalias() +=
                  pb.transpose() * dob;
            }
            if (!qn->requires_grad && !kn->requires_grad) continue;
            Mat<S> dp = dob * vb.transpose();
            // softmax backward per row
            Mat<S> ds(t, t);
            for (Eigen::Index r = 0; r < t; ++r) {
              S dot = dp.row(r).dot(pb.row(r));
              ds.row(r) =
                  pb.row(r).cwiseProduct(dp.row(r) -
                                         Mat<S>::Constant(1, t, dot));
            }
            if (qn->requires_grad) {
              qn->grad.block(bi * t, h * dh, t, dh).noalias() +=
                  (ds * kb) * inv_sqrt;
            }
            if (kn->requires_grad) {
              kn->grad.block(bi * t, h * dh, t, dh).noalias() +=
                  (ds.transpose() * qb) * inv_sqrt;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification losses (targets are plain data, not graph nodes)

// Per-row softmax cross-entropy against integer class indices: out[i] =
// logsumexp(x_i) - x_i[target_i], shape [R].
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits,
                             std::vector<Eigen::Index> targets) {
  if (logits.shape().size() != 2) {
    throw ShapeError("cross_entropy_rows expects rank-2 logits");
  }
  Eigen::Index r = logits.rows(), c = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != r) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(r) + " rows");
  }
  Mat<S> v(1, r);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (targets[static_cast<size_t>(i)] < 0 ||
        targets[static_cast<size_t>(i)] >= c) {
      throw ValueError("cross_entropy_rows: target index out of range");
    }
    auto row = logits.value().row(i).array();
    S m = row.maxCoeff();
    v(0, i) = m + std::log((row - m).exp().sum()) -
              row(targets[static_cast<size_t>(i)]);
  }
  auto xn = logits.node();
  auto tp = std::make_shared<std::vector<Eigen::Index>>(std::move(targets));
  return make_op<S>(
      "cross_entropy_rows", {r}, std::move(v), {logits},
      [xn, tp](detail::Node<S>& o) {
        for (Eigen::Index i = 0; i < xn->value.rows(); ++i) {
          auto row = xn->value.row(i).array();
          Eigen::Array<S, 1, Eigen::Dynamic> p = (row - row.maxCoeff()).exp();
          p /= p.sum();
          S up = o.grad(0, i);
          xn->grad.row(i).array() += up * p;
          xn->grad(i, (*tp)[static_cast<size_t>(i)]) -= up;
        }
      });
}

// Per-row mean of elementwise binary cross-entropy with logits, in the
// overflow-safe form max(x,0) - x*y + log(1+exp(-|x|)). Shape [R].
template <class S>
Tensor<S> bce_logits_rows(const Tensor<S>& logits, const Mat<S>& targets) {
  if (logits.shape().size() != 2) {
    throw ShapeError("bce_logits_rows expects rank-2 logits");
  }
  Eigen::Index r = logits.rows(), c = logits.cols();
  if (targets.rows() != r || targets.cols() != c) {
    throw ShapeError("bce_logits_rows: target geometry mismatch");
  }
  auto xa = logits.value().array();
  auto ya = targets.array();
  Mat<S> elem =
      (xa.cwiseMax(S(0)) - xa * ya + (S(1) + (-xa.abs()).exp()).log())
          .matrix();
  Mat<S> v(1, r);
  for (Eigen::Index i = 0; i < r; ++i) v(0, i) = elem.row(i).mean();
  auto xn = logits.node();
  auto yp = std::make_shared<Mat<S>>(targets);
  return make_op<S>(
      "bce_logits_rows", {r}, std::move(v), {logits},
      [xn, yp, c](detail::Node<S>& o) {
        auto sig =
            ((xn->value * S(0.5)).array().tanh() * S(0.5) + S(0.5)).matrix();
        S inv = S(1) / static_cast<S>(c);
        for (Eigen::Index i = 0; i < xn->value.rows(); ++i) {
          xn->grad.row(i).array() +=
              o.grad(0, i) * inv * (sig.row(i) - yp->row(i)).array();
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

// Re-evaluates `f` with each parameter coordinate nudged by +/-eps and
// compares the central difference against the analytic gradient of f().
// Returns the worst relative error. f must be deterministic; that is checked
// by evaluating it twice up front.
template <class S>
double grad_check(const std::function<Tensor<S>()>& f,
                  const std::vector<Tensor<S>>& params, double eps) {
  Tensor<S> l1 = f();
  Tensor<S> l2 = f();
  if (l1.scalar() != l2.scalar()) {
    throw ValueError("grad_check: f is not deterministic");
  }
  l1.backward();
  std::vector<Mat<S>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S> p = params[pi];
    Mat<S>& val = p.raw_value();
    for (Eigen::Index i = 0; i < val.rows(); ++i) {
      for (Eigen::Index j = 0; j < val.cols(); ++j) {
        S orig = val(i, j);
        val(i, j) = orig + S(eps);
        double up = static_cast<double>(f().scalar());
        val(i, j) = orig - S(eps);
        double dn = static_cast<double>(f().scalar());
        val(i, j) = orig;
        double fd = (up - dn) / (2.0 * eps);
        double an = static_cast<double>(analytic[pi](i, j));
        double rel =
            std::abs(fd - an) / (std::max(std::abs(fd), std::abs(an)) + 1e-8);
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

}  // namespace maple
