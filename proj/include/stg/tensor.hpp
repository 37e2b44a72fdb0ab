#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "stg/error.hpp"

namespace stg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. Value type: copy freely, share by const ref.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw ValidationError("tensor: shape " + shape_str(shape) + " does not match data length " +
                            std::to_string(data.size()));
  }
  Tensor(Shape s, std::initializer_list<double> d)
      : Tensor(std::move(s), std::vector<double>(d)) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  // 2-D accessors; rows() / cols() assume rank 2.
  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }
  double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b))
    throw ValidationError(std::string(who) + ": shapes " + shape_str(a.shape) + " and " +
                          shape_str(b.shape) + " do not match");
}

inline void check_finite(const Tensor& t, const char* who) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw RuntimeFault(std::string(who) + ": non-finite element");
}

// ---- elementwise helpers ----------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * s;
  return out;
}

// y += s * x
inline void axpy(Tensor& y, double s, const Tensor& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s * x.data[i];
}

inline void add_inplace(Tensor& y, const Tensor& x) { axpy(y, 1.0, x); }

inline void scale_inplace(Tensor& a, double s) {
  for (double& v : a.data) v *= s;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double mean(const Tensor& a) {
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (double v : a.data) s += v;
  return s / static_cast<double>(a.size());
}

// Population standard deviation over all elements.
inline double stddev(const Tensor& a) {
  if (a.size() == 0) return 0.0;
  double m = mean(a);
  double s = 0.0;
  for (double v : a.data) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(a.size()));
}

// ---- linear algebra ---------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    throw ValidationError("matmul: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                          " do not conform");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* orow = out.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a^T * b without materializing the transpose: [k,m]^T x [k,n] -> [m,n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[0] != b.shape[0])
    throw ValidationError("matmul_tn: shapes " + shape_str(a.shape) + " and " +
                          shape_str(b.shape) + " do not conform");
  const std::size_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data.data() + p * m;
    const double* brow = b.data.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* orow = out.data.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a * b^T: [m,k] x [n,k]^T -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
    throw ValidationError("matmul_nt: shapes " + shape_str(a.shape) + " and " +
                          shape_str(b.shape) + " do not conform");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* orow = out.data.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      orow[j] = s;
    }
  }
  return out;
}

// Row-max subtraction keeps exp() in range for logits up to ~1e300.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.shape.size() != 2)
    throw ValidationError("softmax_rows: expected rank-2 tensor, got " + shape_str(a.shape));
  const std::size_t m = a.shape[0], n = a.shape[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data.data() + i * n;
    double* orow = out.data.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw ValidationError("softmax_rows: non-finite row");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last dimension, then applies gain and bias.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  if (a.shape.empty()) throw ValidationError("layer_norm: scalar input");
  const std::size_t d = a.shape.back();
  if (gain.size() != d || bias.size() != d)
    throw ValidationError("layer_norm: gain/bias " + shape_str(gain.shape) + "/" +
                          shape_str(bias.shape) + " do not match feature dim " +
                          std::to_string(d));
  const std::size_t rows = a.size() / d;
  Tensor out(a.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data.data() + r * d;
    double* y = out.data.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += x[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (x[j] - m) * (x[j] - m);
    v /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(v + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) y[j] = gain.data[j] * ((x[j] - m) * inv) + bias.data[j];
  }
  return out;
}

}  // namespace stg
