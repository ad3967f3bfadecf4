#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ipdr {

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Values are always finite when built
/// through the public constructors.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor: shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    for (double v : data_)
      if (!std::isfinite(v)) throw NumericError("tensor: non-finite value rejected");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw DimensionError("tensor: ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double item() const {
    if (data_.size() != 1) throw DimensionError("tensor: item() on " + shape_str(shape_));
    return data_[0];
  }

  /// Same data, new extents.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw DimensionError("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Plain (non-recording) dense kernels used by both the autodiff ops and the
// geometry code.
namespace kernels {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({m, n});
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  double* cp = c.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = cp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// c += a^T b  (a: k x m, b: k x n, c: m x n)
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, std::span<double> c) {
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = ap + p * m;
    const double* brow = bp + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a b^T  (a: m x k, b: n x k, c: m x n)
inline void matmul_nt_acc(const Tensor& a, const Tensor& b, std::span<double> c) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = ap + i * k;
    double* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = bp + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

inline double norm1(const Tensor& a) {
  require_matrix(a, "norm1");
  double best = 0.0;
  for (std::size_t j = 0; j < a.dim(1); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(0); ++i) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

/// Matrix exponential by scaling and squaring around a degree-13 Taylor core.
/// The input is scaled by 2^-s until its 1-norm is at most 0.5.
inline Tensor expm(const Tensor& u) {
  require_matrix(u, "matexp");
  const std::size_t n = u.dim(0);
  if (u.dim(1) != n) throw DimensionError("matexp: non-square input " + shape_str(u.shape()));
  if (!u.all_finite()) throw NumericError("matexp: non-finite input");
  const double nrm = norm1(u);
  int s = 0;
  if (nrm > 0.5) s = static_cast<int>(std::ceil(std::log2(nrm / 0.5)));
  const double scale = std::ldexp(1.0, -s);
  Tensor a = u;
  for (auto& v : a.data()) v *= scale;

  Tensor result = Tensor::eye(n);
  Tensor term = Tensor::eye(n);
  for (int k = 1; k <= 13; ++k) {
    term = matmul(term, a);
    const double inv = 1.0 / k;
    for (auto& v : term.data()) v *= inv;
    for (std::size_t i = 0; i < result.size(); ++i) result[i] += term[i];
  }
  for (int i = 0; i < s; ++i) result = matmul(result, result);
  return result;
}

/// Gauss-Jordan inverse with partial pivoting.
inline Tensor inverse(const Tensor& a) {
  require_matrix(a, "inverse");
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n) throw DimensionError("inverse: non-square input");
  Tensor m = a;
  Tensor inv = Tensor::eye(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m(r, col)) > std::abs(m(piv, col))) piv = r;
    if (std::abs(m(piv, col)) < 1e-300) throw NumericError("inverse: singular matrix");
    if (piv != col)
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(m(piv, j), m(col, j));
        std::swap(inv(piv, j), inv(col, j));
      }
    const double d = 1.0 / m(col, col);
    for (std::size_t j = 0; j < n; ++j) {
      m(col, j) *= d;
      inv(col, j) *= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        m(r, j) -= f * m(col, j);
        inv(r, j) -= f * inv(col, j);
      }
    }
  }
  return inv;
}

}  // namespace kernels
}  // namespace ipdr
