#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ipdr/tensor.hpp"

namespace ipdr::ad {

/// One recorded value in the computation graph.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad.data();
  }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

/// Handle to a graph node. Leaves created with requires_grad = true are the
/// trainable parameters; everything else is produced by the ops below.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = next_seq();
  }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Gradient buffer; zeros of the value's shape if nothing was accumulated.
  const Tensor& grad() const {
    node_->grad_buffer();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size() == node_->value.size())
      std::fill(node_->grad.data().begin(), node_->grad.data().end(), 0.0);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var param(Tensor t) { return Var(std::move(t), true); }

/// Topologically ordered record of the nodes reachable from a scalar root.
/// Built once, replayed once: closures are released after backward().
class Tape {
 public:
  static Tape record(const Var& root) {
    Tape tape;
    tape.root_ = root.node();
    if (!root.requires_grad()) return tape;
    std::vector<std::shared_ptr<Node>> stack{root.node()};
    std::unordered_set<Node*> seen{root.node().get()};
    while (!stack.empty()) {
      std::shared_ptr<Node> n = std::move(stack.back());
      stack.pop_back();
      for (const auto& p : n->parents)
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
      tape.order_.push_back(std::move(n));
    }
    // Creation order is a valid topological order; children run first.
    std::sort(tape.order_.begin(), tape.order_.end(),
              [](const auto& a, const auto& b) { return a->seq > b->seq; });
    tape.view_.reserve(tape.order_.size());
    for (const auto& n : tape.order_) tape.view_.push_back(n.get());
    return tape;
  }

  const std::vector<Node*>& nodes() const { return view_; }
  std::size_t size() const { return order_.size(); }

  void backward() {
    if (!root_ || !root_->requires_grad) return;
    if (root_->value.size() != 1) throw DimensionError("backward: root must be a scalar");
    root_->grad_buffer()[0] += 1.0;
    for (const auto& n : order_) {
      if (n->backward_fn) {
        n->backward_fn(*n);
        n->backward_fn = nullptr;
      }
      if (!n->parents.empty()) {
        n->parents.clear();
        n->grad = Tensor();
      }
    }
    order_.clear();
    view_.clear();
  }

 private:
  std::shared_ptr<Node> root_;
  std::vector<std::shared_ptr<Node>> order_;
  std::vector<Node*> view_;
};

inline void backward(const Var& root) { Tape::record(root).backward(); }

/// Thread-local switch; while a NoGrad guard is alive ops record nothing.
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGrad {
 public:
  NoGrad() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGrad() { grad_enabled() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->seq = next_seq();
  bool any = false;
  if (grad_enabled())
    for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const Var& a, std::size_t r, const char* op) {
  if (a.value().rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) {
        auto g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = detail::map(a.value(), [s](double v) { return v * s; });
  return detail::make_result(std::move(out), {a}, [s](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = detail::map(a.value(), [s](double v) { return v + s; });
  return detail::make_result(std::move(out), {a}, [](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

/// a * s where s is a one-element Var.
inline Var mul_scalar(const Var& a, const Var& s) {
  if (s.size() != 1) throw DimensionError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out = detail::map(a.value(), [sv](double v) { return v * sv; });
  return detail::make_result(std::move(out), {a, s}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& ps = *n.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * ps.value[0];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * pa.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {
// f(x) and df/dx given (x, f(x)).
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Tensor out = map(a.value(), f);
  return make_result(std::move(out), {a}, [df](Node& n) {
    auto& p = *n.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(p.value[i], n.value[i]);
  });
}
}  // namespace detail

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
  return detail::unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); }, [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::make_result(Tensor::scalar(s), {a}, [](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    const double gv = n.grad[0];
    for (auto& v : g) v += gv;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Column sums of an N x C matrix -> [C].
inline Var sum_rows(const Var& x) {
  detail::require_rank(x, 2, "sum_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.value()(i, j);
  return detail::make_result(std::move(out), {x}, [r, c](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j];
  });
}

inline Var mean_rows(const Var& x) {
  if (x.dim(0) == 0) throw DimensionError("mean_rows: no rows");
  return scale(sum_rows(x), 1.0 / static_cast<double>(x.dim(0)));
}

/// X[N x C] + b[C] broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
  detail::require_rank(x, 2, "add_rowvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (b.size() != c) throw DimensionError("add_rowvec: bias " + shape_str(b.shape()) + " vs " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
  return detail::make_result(std::move(out), {x, b}, [r, c](Node& n) {
    auto& px = *n.parents[0];
    auto& pb = *n.parents[1];
    if (px.requires_grad) {
      auto g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
    }
  });
}

/// X[N x C] * v[C] broadcast over rows.
inline Var mul_rowvec(const Var& x, const Var& v) {
  detail::require_rank(x, 2, "mul_rowvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (v.size() != c) throw DimensionError("mul_rowvec: " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= v.value()[j];
  return detail::make_result(std::move(out), {x, v}, [r, c](Node& n) {
    auto& px = *n.parents[0];
    auto& pv = *n.parents[1];
    if (px.requires_grad) {
      auto g = px.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * pv.value[j];
    }
    if (pv.requires_grad) {
      auto g = pv.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j] * px.value[i * c + j];
    }
  });
}

/// X[N x C] * w[N] (or N x 1) broadcast over columns.
inline Var mul_colvec(const Var& x, const Var& w) {
  detail::require_rank(x, 2, "mul_colvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.size() != r) throw DimensionError("mul_colvec: " + shape_str(w.shape()) + " vs " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= w.value()[i];
  return detail::make_result(std::move(out), {x, w}, [r, c](Node& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    if (px.requires_grad) {
      auto g = px.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * c + j] * pw.value[i];
    }
    if (pw.requires_grad) {
      auto g = pw.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += n.grad[i * c + j] * px.value[i * c + j];
        g[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return detail::make_result(std::move(out), {a}, [](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return detail::make_result(kernels::transpose(a.value()), {a}, [r, c](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

/// Concatenate 2-D operands with equal row counts along columns.
inline Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t r = xs[0].dim(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    detail::require_rank(x, 2, "concat_cols");
    if (x.dim(0) != r) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(x.dim(1));
    total += x.dim(1);
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return detail::make_result(std::move(out), xs, [r, total, widths](Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (p.requires_grad) {
        auto g = p.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += n.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Concatenate along axis 0; trailing extents must agree.
inline Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_rows: no operands");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& x : xs) {
    if (x.value().rank() == 0 || Shape(x.shape().begin() + 1, x.shape().end()) != tail)
      throw DimensionError("concat_rows: trailing shape mismatch");
    rows += x.dim(0);
    sizes.push_back(x.size());
  }
  Shape s{rows};
  s.insert(s.end(), tail.begin(), tail.end());
  Tensor out(s);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data().begin(), x.value().data().end(), out.data().begin() + off);
    off += x.size();
  }
  return detail::make_result(std::move(out), xs, [sizes](Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (p.requires_grad) {
        auto g = p.grad_buffer();
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += n.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

inline Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (c0 > c1 || c1 > c) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t w = c1 - c0;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * c + c0 + j];
  return detail::make_result(std::move(out), {x}, [r, c, c0, w](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + c0 + j] += n.grad[i * w + j];
  });
}

/// Rows [r0, r1) along axis 0.
inline Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  if (x.value().rank() == 0 || r0 > r1 || r1 > x.dim(0)) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t stride = x.dim(0) ? x.size() / x.dim(0) : 0;
  Shape s = x.shape();
  s[0] = r1 - r0;
  Tensor out(s);
  std::copy(x.value().data().begin() + r0 * stride, x.value().data().begin() + r1 * stride, out.data().begin());
  return detail::make_result(std::move(out), {x}, [r0, stride](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[r0 * stride + i] += n.grad[i];
  });
}

/// Rows selected by index (repeats allowed) along axis 0.
inline Var gather_rows(const Var& x, std::vector<std::size_t> idx) {
  if (x.value().rank() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t stride = x.dim(0) ? x.size() / x.dim(0) : 0;
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.value().ptr() + idx[k] * stride, stride, out.ptr() + k * stride);
  }
  return detail::make_result(std::move(out), {x}, [idx = std::move(idx), stride](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < stride; ++j) g[idx[k] * stride + j] += n.grad[k * stride + j];
  });
}

inline Var reverse_rows(const Var& x) {
  if (x.value().rank() == 0) throw DimensionError("reverse_rows: scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t stride = rows ? x.size() / rows : 0;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(x.value().ptr() + i * stride, stride, out.ptr() + (rows - 1 - i) * stride);
  return detail::make_result(std::move(out), {x}, [rows, stride](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < stride; ++j) g[i * stride + j] += n.grad[(rows - 1 - i) * stride + j];
  });
}

/// Zero-pad a matrix at the bottom/right to (rows x cols).
inline Var pad_to(const Var& x, std::size_t rows, std::size_t cols) {
  detail::require_rank(x, 2, "pad_to");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (rows < r || cols < c) throw DimensionError("pad_to: target smaller than input");
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * cols + j] = x.value()[i * c + j];
  return detail::make_result(std::move(out), {x}, [r, c, cols](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i * cols + j];
  });
}

/// Nearest-neighbour 2x upsampling of C x H x W.
inline Var upsample2(const Var& x) {
  detail::require_rank(x, 3, "upsample2");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j) out[(c * 2 * H + i) * 2 * W + j] = x.value()[(c * H + i / 2) * W + j / 2];
  return detail::make_result(std::move(out), {x}, [C, H, W](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j) g[(c * H + i / 2) * W + j / 2] += n.grad[(c * 2 * H + i) * 2 * W + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return detail::make_result(std::move(out), {a, b}, [](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) kernels::matmul_nt_acc(n.grad, pb.value, pa.grad_buffer());
    if (pb.requires_grad) kernels::matmul_tn_acc(pa.value, n.grad, pb.grad_buffer());
  });
}

/// Matrix exponential. The adjoint uses the block identity
///   d/dA <G, exp(A)> = upper-right block of exp([[A^T, G], [0, A^T]]).
inline Var matexp(const Var& u) {
  Tensor out = kernels::expm(u.value());
  return detail::make_result(std::move(out), {u}, [](Node& n) {
    auto& p = *n.parents[0];
    const std::size_t m = p.value.dim(0);
    Tensor big({2 * m, 2 * m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double at = p.value(j, i);
        big(i, j) = at;
        big(m + i, m + j) = at;
        big(i, m + j) = n.grad(i, j);
      }
    Tensor e = kernels::expm(big);
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += e(i, m + j);
  });
}

// ---------------------------------------------------------------------------
// Sampling

namespace detail {
// Normalized [-1, 1] coordinate -> pixel coordinate (corners aligned with the
// first/last pixel centers). Values within 1e-9 of an integer are snapped so
// that grid-aligned samples reproduce stored values exactly.
inline double to_pixel(double g, std::size_t extent) {
  double p = extent > 1 ? (g + 1.0) * 0.5 * static_cast<double>(extent - 1) : g;
  const double r = std::round(p);
  if (std::abs(p - r) < 1e-9) p = r;
  return p;
}
inline double pixel_scale(std::size_t extent) { return extent > 1 ? 0.5 * static_cast<double>(extent - 1) : 1.0; }
}  // namespace detail

/// Bilinear sampling of feat[C x H x W] at coords[K x 2] = (x, y) in [-1, 1].
/// Taps outside the map contribute zero. Returns C x K.
inline Var bilinear_sample(const Var& feat, const Var& coords) {
  detail::require_rank(feat, 3, "bilinear_sample");
  detail::require_rank(coords, 2, "bilinear_sample");
  if (coords.dim(1) != 2) throw DimensionError("bilinear_sample: coords must be K x 2");
  const std::size_t C = feat.dim(0), H = feat.dim(1), W = feat.dim(2), K = coords.dim(0);
  const Tensor& f = feat.value();
  const Tensor& g = coords.value();
  if (!g.all_finite()) throw NumericError("bilinear_sample: non-finite coordinates");
  Tensor out({C, K});
  for (std::size_t k = 0; k < K; ++k) {
    const double px = detail::to_pixel(g(k, 0), W), py = detail::to_pixel(g(k, 1), H);
    const double x0f = std::floor(px), y0f = std::floor(py);
    const double fx = px - x0f, fy = py - y0f;
    const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
    const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
    for (int t = 0; t < 4; ++t) {
      if (wts[t] == 0.0 || xs[t] < 0 || ys[t] < 0 || xs[t] >= static_cast<long>(W) || ys[t] >= static_cast<long>(H))
        continue;
      const std::size_t off = static_cast<std::size_t>(ys[t]) * W + static_cast<std::size_t>(xs[t]);
      for (std::size_t c = 0; c < C; ++c) out[c * K + k] += wts[t] * f[c * H * W + off];
    }
  }
  return detail::make_result(std::move(out), {feat, coords}, [C, H, W, K](Node& n) {
    auto& pf = *n.parents[0];
    auto& pc = *n.parents[1];
    const Tensor& f = pf.value;
    const Tensor& g = pc.value;
    std::span<double> gf = pf.requires_grad ? pf.grad_buffer() : std::span<double>{};
    std::span<double> gc = pc.requires_grad ? pc.grad_buffer() : std::span<double>{};
    const double sx = detail::pixel_scale(W), sy = detail::pixel_scale(H);
    for (std::size_t k = 0; k < K; ++k) {
      const double px = detail::to_pixel(g(k, 0), W), py = detail::to_pixel(g(k, 1), H);
      const double x0f = std::floor(px), y0f = std::floor(py);
      const double fx = px - x0f, fy = py - y0f;
      const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      // d weight / d fx, d weight / d fy
      const double dwx[4] = {-(1 - fy), (1 - fy), -fy, fy};
      const double dwy[4] = {-(1 - fx), -fx, (1 - fx), fx};
      const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
      double dx = 0.0, dy = 0.0;
      for (int t = 0; t < 4; ++t) {
        if (xs[t] < 0 || ys[t] < 0 || xs[t] >= static_cast<long>(W) || ys[t] >= static_cast<long>(H)) continue;
        const std::size_t off = static_cast<std::size_t>(ys[t]) * W + static_cast<std::size_t>(xs[t]);
        for (std::size_t c = 0; c < C; ++c) {
          const double go = n.grad[c * K + k];
          if (!gf.empty()) gf[c * H * W + off] += wts[t] * go;
          const double fv = f[c * H * W + off];
          dx += dwx[t] * fv * go;
          dy += dwy[t] * fv * go;
        }
      }
      if (!gc.empty()) {
        gc[2 * k] += dx * sx;
        gc[2 * k + 1] += dy * sy;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Recurrences and convolution

/// Linear recurrence h_t = A h_{t-1} + B x_t with h_{-1} = h0.
/// A: M x M, B: M x C, x: T x C, h0: [M]. Returns all states, T x M.
inline Var scan_linear(const Var& abar, const Var& bbar, const Var& x, const Var& h0) {
  detail::require_rank(abar, 2, "scan_linear");
  detail::require_rank(bbar, 2, "scan_linear");
  detail::require_rank(x, 2, "scan_linear");
  const std::size_t M = abar.dim(0), C = bbar.dim(1), T = x.dim(0);
  if (abar.dim(1) != M || bbar.dim(0) != M || x.dim(1) != C || h0.size() != M)
    throw DimensionError("scan_linear: inconsistent shapes A" + shape_str(abar.shape()) + " B" +
                         shape_str(bbar.shape()) + " x" + shape_str(x.shape()) + " h0" + shape_str(h0.shape()));
  const Tensor& A = abar.value();
  const Tensor& B = bbar.value();
  const Tensor& X = x.value();
  Tensor H({T, M});
  std::vector<double> prev(h0.value().data().begin(), h0.value().data().end());
  for (std::size_t t = 0; t < T; ++t) {
    double* ht = H.ptr() + t * M;
    for (std::size_t i = 0; i < M; ++i) {
      double s = 0.0;
      const double* arow = A.ptr() + i * M;
      for (std::size_t j = 0; j < M; ++j) s += arow[j] * prev[j];
      const double* brow = B.ptr() + i * C;
      const double* xt = X.ptr() + t * C;
      for (std::size_t c = 0; c < C; ++c) s += brow[c] * xt[c];
      ht[i] = s;
    }
    std::copy_n(ht, M, prev.begin());
  }
  return detail::make_result(std::move(H), {abar, bbar, x, h0}, [M, C, T](Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    auto& px = *n.parents[2];
    auto& ph = *n.parents[3];
    const Tensor& A = pa.value;
    const Tensor& B = pb.value;
    const Tensor& X = px.value;
    const Tensor& H = n.value;
    std::span<double> ga = pa.requires_grad ? pa.grad_buffer() : std::span<double>{};
    std::span<double> gb = pb.requires_grad ? pb.grad_buffer() : std::span<double>{};
    std::span<double> gx = px.requires_grad ? px.grad_buffer() : std::span<double>{};
    std::vector<double> lam(M, 0.0), next(M, 0.0);
    for (std::size_t tt = T; tt-- > 0;) {
      // lam_t = G_t + A^T lam_{t+1}
      for (std::size_t j = 0; j < M; ++j) {
        double s = n.grad[tt * M + j];
        for (std::size_t i = 0; i < M; ++i) s += A[i * M + j] * next[i];
        lam[j] = s;
      }
      const double* hprev = tt > 0 ? H.ptr() + (tt - 1) * M : ph.value.ptr();
      const double* xt = X.ptr() + tt * C;
      for (std::size_t i = 0; i < M; ++i) {
        const double li = lam[i];
        if (li == 0.0) continue;
        if (!ga.empty())
          for (std::size_t j = 0; j < M; ++j) ga[i * M + j] += li * hprev[j];
        if (!gb.empty())
          for (std::size_t c = 0; c < C; ++c) gb[i * C + c] += li * xt[c];
      }
      if (!gx.empty())
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < M; ++i) s += B[i * C + c] * lam[i];
          gx[tt * C + c] += s;
        }
      std::swap(lam, next);
    }
    if (ph.requires_grad) {
      auto gh = ph.grad_buffer();
      for (std::size_t j = 0; j < M; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < M; ++i) s += A[i * M + j] * next[i];
        gh[j] += s;
      }
    }
  });
}

/// 2-D convolution: x[C x H x W], w[O x C x k x k], b[O]; zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != k || b.size() != O) throw DimensionError("conv2d: weight/bias shape mismatch");
  if (stride == 0) throw ArgumentError("conv2d: zero stride");
  if (H + 2 * pad < k || W + 2 * pad < k) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({O, Ho, Wo});
  const Tensor& X = x.value();
  const Tensor& Wt = w.value();
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double s = b.value()[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ki = 0; ki < k; ++ki) {
            const long yi = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
            if (yi < 0 || yi >= static_cast<long>(H)) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const long xj = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
              if (xj < 0 || xj >= static_cast<long>(W)) continue;
              s += Wt[((o * C + c) * k + ki) * k + kj] * X[(c * H + static_cast<std::size_t>(yi)) * W + static_cast<std::size_t>(xj)];
            }
          }
        out[(o * Ho + i) * Wo + j] = s;
      }
  return detail::make_result(std::move(out), {x, w, b}, [C, H, W, O, k, Ho, Wo, stride, pad](Node& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    auto& pb = *n.parents[2];
    std::span<double> gx = px.requires_grad ? px.grad_buffer() : std::span<double>{};
    std::span<double> gw = pw.requires_grad ? pw.grad_buffer() : std::span<double>{};
    std::span<double> gb = pb.requires_grad ? pb.grad_buffer() : std::span<double>{};
    const Tensor& X = px.value;
    const Tensor& Wt = pw.value;
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const double go = n.grad[(o * Ho + i) * Wo + j];
          if (go == 0.0) continue;
          if (!gb.empty()) gb[o] += go;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < k; ++ki) {
              const long yi = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
              if (yi < 0 || yi >= static_cast<long>(H)) continue;
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long xj = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (xj < 0 || xj >= static_cast<long>(W)) continue;
                const std::size_t xi = (c * H + static_cast<std::size_t>(yi)) * W + static_cast<std::size_t>(xj);
                const std::size_t wi = ((o * C + c) * k + ki) * k + kj;
                if (!gw.empty()) gw[wi] += go * X[xi];
                if (!gx.empty()) gx[xi] += go * Wt[wi];
              }
            }
        }
  });
}

// ---------------------------------------------------------------------------
// Masked softmax over rows (views along columns)

/// Row-wise softmax restricted to entries with mask != 0; masked entries are 0.
/// Rows with no unmasked entry are all zero.
inline Var masked_softmax_rows(const Var& s, std::vector<std::uint8_t> mask) {
  detail::require_rank(s, 2, "masked_softmax_rows");
  const std::size_t r = s.dim(0), c = s.dim(1);
  if (mask.size() != r * c) throw DimensionError("masked_softmax_rows: mask size mismatch");
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) mx = std::max(mx, s.value()[i * c + j]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) z += (out[i * c + j] = std::exp(s.value()[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return detail::make_result(std::move(out), {s}, [r, c](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += n.value[i * c + j] * n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.value[i * c + j] * (n.grad[i * c + j] - dot);
    }
  });
}

/// Row-wise log-softmax restricted to unmasked entries; masked entries are 0
/// and carry no gradient.
inline Var masked_log_softmax_rows(const Var& s, std::vector<std::uint8_t> mask) {
  detail::require_rank(s, 2, "masked_log_softmax_rows");
  const std::size_t r = s.dim(0), c = s.dim(1);
  if (mask.size() != r * c) throw DimensionError("masked_log_softmax_rows: mask size mismatch");
  Tensor out({r, c});
  std::vector<double> probs(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) mx = std::max(mx, s.value()[i * c + j]);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) z += std::exp(s.value()[i * c + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) {
        out[i * c + j] = s.value()[i * c + j] - lse;
        probs[i * c + j] = std::exp(out[i * c + j]);
      }
  }
  return detail::make_result(std::move(out), {s}, [r, c, mask = std::move(mask), probs = std::move(probs)](Node& n) {
    auto g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        if (mask[i * c + j]) gs += n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        if (mask[i * c + j]) g[i * c + j] += n.grad[i * c + j] - probs[i * c + j] * gs;
    }
  });
}

}  // namespace ipdr::ad
