/* Copyright 2026 The moekit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace moekit {

/// Dense row-major 2-D float tensor. Values are immutable once an op has
/// produced them; ops return fresh tensors.
struct Tensor2 {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;  // rows * cols, row-major

  Tensor2() = default;
  Tensor2(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
    if (r < 0 || c < 0) throw std::invalid_argument("Tensor2: negative shape");
  }

  float& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return data.size(); }

  static Tensor2 zeros(int r, int c) { return Tensor2(r, c); }

  static Tensor2 full(int r, int c, float v) {
    Tensor2 t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
};

inline bool same_shape(const Tensor2& a, const Tensor2& b) {
  return a.rows == b.rows && a.cols == b.cols;
}

inline void ensure_finite(const Tensor2& t, const char* what) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + what);
    }
  }
}

/// Deterministic RNG. mt19937 is bit-stable across platforms; the normal
/// sampler is hand-rolled Box-Muller so streams do not depend on the
/// standard library's distribution implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return gen_(); }

  double uniform() {  // [0, 1)
    return (static_cast<double>(gen_()) + 0.5) / 4294967296.0;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-12) u1 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(gen_() % static_cast<uint32_t>(n));
  }

 private:
  std::mt19937 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor2 randn(int r, int c, double stddev, Rng& rng) {
  Tensor2 t(r, c);
  for (auto& v : t.data) v = static_cast<float>(stddev * rng.gaussian());
  return t;
}

/// a[M,K] * b[K,N] -> [M,N]. Accumulates in double.
inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
  Tensor2 y(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) {
        acc += static_cast<double>(a(i, k)) * b(k, j);
      }
      y(i, j) = static_cast<float>(acc);
    }
  }
  ensure_finite(y, "matmul");
  return y;
}

/// a[M,K] * b[N,K]^T -> [M,N]
inline Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Tensor2 y(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    for (int j = 0; j < b.rows; ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k) {
        acc += static_cast<double>(a(i, k)) * b(j, k);
      }
      y(i, j) = static_cast<float>(acc);
    }
  }
  ensure_finite(y, "matmul_nt");
  return y;
}

/// a[K,M]^T * b[K,N] -> [M,N]
inline Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimensions differ");
  Tensor2 y(a.cols, b.cols);
  for (int i = 0; i < a.cols; ++i) {
    for (int j = 0; j < b.cols; ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.rows; ++k) {
        acc += static_cast<double>(a(k, i)) * b(k, j);
      }
      y(i, j) = static_cast<float>(acc);
    }
  }
  ensure_finite(y, "matmul_tn");
  return y;
}

inline Tensor2 add(const Tensor2& a, const Tensor2& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("add: shape mismatch");
  Tensor2 y(a.rows, a.cols);
  for (size_t i = 0; i < y.size(); ++i) y.data[i] = a.data[i] + b.data[i];
  ensure_finite(y, "add");
  return y;
}

inline Tensor2 sub(const Tensor2& a, const Tensor2& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("sub: shape mismatch");
  Tensor2 y(a.rows, a.cols);
  for (size_t i = 0; i < y.size(); ++i) y.data[i] = a.data[i] - b.data[i];
  ensure_finite(y, "sub");
  return y;
}

inline Tensor2 hadamard(const Tensor2& a, const Tensor2& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("hadamard: shape mismatch");
  Tensor2 y(a.rows, a.cols);
  for (size_t i = 0; i < y.size(); ++i) y.data[i] = a.data[i] * b.data[i];
  ensure_finite(y, "hadamard");
  return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Elementwise x * sigmoid(x).
inline Tensor2 swish(const Tensor2& x) {
  Tensor2 y(x.rows, x.cols);
  for (size_t i = 0; i < y.size(); ++i) {
    const double v = x.data[i];
    y.data[i] = static_cast<float>(v * sigmoid(v));
  }
  ensure_finite(y, "swish");
  return y;
}

/// Row-wise softmax with max subtraction.
inline Tensor2 softmax_rows(const Tensor2& x) {
  Tensor2 y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int j = 0; j < x.cols; ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (int j = 0; j < x.cols; ++j) sum += std::exp(static_cast<double>(x(i, j)) - mx);
    for (int j = 0; j < x.cols; ++j) {
      y(i, j) = static_cast<float>(std::exp(static_cast<double>(x(i, j)) - mx) / sum);
    }
  }
  ensure_finite(y, "softmax_rows");
  return y;
}

/// Per-row top-k selection, descending by value, ties broken by lowest index.
struct TopkResult {
  int rows = 0;
  int k = 0;
  std::vector<int> indices;    // rows * k
  std::vector<float> values;   // rows * k

  int index(int r, int s) const { return indices[static_cast<size_t>(r) * k + s]; }
  float value(int r, int s) const { return values[static_cast<size_t>(r) * k + s]; }
};

inline TopkResult topk_rows(const Tensor2& x, int k) {
  if (k < 1 || k > x.cols) throw std::invalid_argument("topk_rows: k out of range");
  TopkResult out;
  out.rows = x.rows;
  out.k = k;
  out.indices.resize(static_cast<size_t>(x.rows) * k);
  out.values.resize(static_cast<size_t>(x.rows) * k);
  std::vector<int> order(x.cols);
  for (int i = 0; i < x.rows; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (x(i, a) != x(i, b)) return x(i, a) > x(i, b);
      return a < b;
    });
    for (int s = 0; s < k; ++s) {
      out.indices[static_cast<size_t>(i) * k + s] = order[s];
      out.values[static_cast<size_t>(i) * k + s] = x(i, order[s]);
    }
  }
  return out;
}

/// Mean over all elements of (a - b)^2, accumulated in double.
inline double mse(const Tensor2& a, const Tensor2& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("mse: shape mismatch");
  if (a.size() == 0) throw std::invalid_argument("mse: empty tensors");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double max_abs_diff(const Tensor2& a, const Tensor2& b) {
  if (!same_shape(a, b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  }
  return m;
}

}  // namespace moekit
