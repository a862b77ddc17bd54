#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mor1e {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Dense column vector, 64-bit entries.
class Vector {
 public:
  Vector() = default;
  explicit Vector(int dim, double fill = 0.0) : data_(static_cast<size_t>(check_dim(dim)), fill) {}
  Vector(std::initializer_list<double> xs) : data_(xs) {}

  int dim() const { return static_cast<int>(data_.size()); }
  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  bool operator==(const Vector& o) const { return data_ == o.data_; }

 private:
  static int check_dim(int d) {
    require(d >= 1, "Vector: dim must be positive, got " + std::to_string(d));
    return d;
  }
  std::vector<double> data_;
};

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(check_dim(rows, "rows")), cols_(check_dim(cols, "cols")),
        data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  int size() const { return rows_ * cols_; }
  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

 private:
  static int check_dim(int d, const char* what) {
    require(d >= 1, std::string("Matrix: ") + what + " must be positive, got " + std::to_string(d));
    return d;
  }
  int rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline void ensure_finite(const Vector& v, const char* op) {
  for (int i = 0; i < v.dim(); ++i)
    if (!std::isfinite(v[i]))
      throw std::runtime_error(std::string(op) + ": non-finite entry at index " + std::to_string(i));
}

inline void ensure_finite(const Matrix& m, const char* op) {
  const double* p = m.data();
  for (int i = 0; i < m.size(); ++i)
    if (!std::isfinite(p[i]))
      throw std::runtime_error(std::string(op) + ": non-finite entry at flat index " + std::to_string(i));
}

// y = M x
inline Vector matvec(const Matrix& m, const Vector& x) {
  require(m.cols() == x.dim(),
          "matvec: dimension mismatch, matrix is " + std::to_string(m.rows()) + "x" +
              std::to_string(m.cols()) + " but vector dim is " + std::to_string(x.dim()));
  Vector y(m.rows());
  for (int i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < m.cols(); ++j) s += m(i, j) * x[j];
    y[i] = s;
  }
  ensure_finite(y, "matvec");
  return y;
}

// y = M^T x
inline Vector matvec_t(const Matrix& m, const Vector& x) {
  require(m.rows() == x.dim(),
          "matvec_t: dimension mismatch, matrix is " + std::to_string(m.rows()) + "x" +
              std::to_string(m.cols()) + " but vector dim is " + std::to_string(x.dim()));
  Vector y(m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) y[j] += m(i, j) * x[i];
  ensure_finite(y, "matvec_t");
  return y;
}

inline Matrix outer(const Vector& u, const Vector& v) {
  Matrix m(u.dim(), v.dim());
  for (int i = 0; i < u.dim(); ++i)
    for (int j = 0; j < v.dim(); ++j) m(i, j) = u[i] * v[j];
  ensure_finite(m, "outer");
  return m;
}

// M += alpha * u v^T
inline void add_outer(Matrix& m, double alpha, const Vector& u, const Vector& v) {
  require(m.rows() == u.dim() && m.cols() == v.dim(), "add_outer: shape mismatch");
  for (int i = 0; i < u.dim(); ++i)
    for (int j = 0; j < v.dim(); ++j) m(i, j) += alpha * u[i] * v[j];
}

inline double dot(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), "dot: dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vector& a) { return std::sqrt(dot(a, a)); }

inline Vector add(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), "add: dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  Vector c(a.dim());
  for (int i = 0; i < a.dim(); ++i) c[i] = a[i] + b[i];
  return c;
}

inline Vector sub(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), "sub: dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  Vector c(a.dim());
  for (int i = 0; i < a.dim(); ++i) c[i] = a[i] - b[i];
  return c;
}

inline Vector scale(const Vector& a, double s) {
  Vector c(a.dim());
  for (int i = 0; i < a.dim(); ++i) c[i] = a[i] * s;
  return c;
}

// y += alpha * x
inline void axpy(double alpha, const Vector& x, Vector& y) {
  require(x.dim() == y.dim(), "axpy: dims " + std::to_string(x.dim()) + " vs " + std::to_string(y.dim()));
  for (int i = 0; i < x.dim(); ++i) y[i] += alpha * x[i];
}

// Max-subtraction stabilized softmax.
inline Vector softmax(const Vector& z) {
  ensure_finite(z, "softmax input");
  double m = z[0];
  for (int i = 1; i < z.dim(); ++i) m = std::max(m, z[i]);
  Vector p(z.dim());
  double sum = 0.0;
  for (int i = 0; i < z.dim(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (int i = 0; i < p.dim(); ++i) p[i] /= sum;
  return p;
}

// dL/dlogits given softmax probs p and dL/dp.
inline Vector softmax_backward(const Vector& p, const Vector& dp) {
  require(p.dim() == dp.dim(), "softmax_backward: dims mismatch");
  double s = dot(p, dp);
  Vector dz(p.dim());
  for (int i = 0; i < p.dim(); ++i) dz[i] = p[i] * (dp[i] - s);
  return dz;
}

inline double cosine_similarity(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(),
          "cosine_similarity: dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  double na = norm(a), nb = norm(b);
  require(na > 0.0, "cosine_similarity: first argument has zero norm");
  require(nb > 0.0, "cosine_similarity: second argument has zero norm");
  double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// Central-difference gradient, the oracle for every analytic backward in this library.
inline Vector finite_diff_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                                   double h) {
  require(h > 0.0, "finite_diff_gradient: h must be positive");
  Vector g(x.dim());
  Vector xp = x;
  for (int i = 0; i < x.dim(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_gradient: function returned non-finite value at index " +
                               std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Counter-based splitmix64 stream; the integer stream is platform-exact.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // [0, n)
  int below(int n) {
    require(n >= 1, "Rng::below: n must be positive");
    return std::min(n - 1, static_cast<int>(uniform() * n));
  }

  // Box-Muller pair, one value per call.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Labeled sub-seed so that adding a consumer never perturbs existing streams.
inline uint64_t derive_seed(uint64_t master, std::string_view label) {
  uint64_t z = master ^ (fnv1a64(label) + 0x9E3779B97F4A7C15ull + (master << 6) + (master >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Vector gaussian_vector(Rng& rng, int dim, double sigma = 1.0) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = sigma * rng.normal();
  return v;
}

inline Vector uniform_vector(Rng& rng, int dim, double lo, double hi) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

// A named view over one trainable tensor and its gradient accumulator.
struct ParamRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  int size = 0;
};

inline int total_size(const std::vector<ParamRef>& params) {
  int n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

}  // namespace mor1e
