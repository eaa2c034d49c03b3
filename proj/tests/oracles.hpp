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

// Double-precision scalar-loop reference implementations, written
// independently of the library's f32 kernels. Tests use these as oracles for
// value checks and as the smooth functions that central finite differences
// are taken on.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <moekit/moe.hpp>
#include <moekit/tensor.hpp>
#include <moekit/trainer.hpp>

namespace oracles {

struct DMat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  DMat() = default;
  DMat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  static DMat from(const moekit::Tensor2& t) {
    DMat m(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) m.a[i] = t.data[i];
    return m;
  }
};

inline DMat dmatmul(const DMat& x, const DMat& y) {
  DMat z(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i) {
    for (int j = 0; j < y.cols; ++j) {
      double acc = 0.0;
      for (int k = 0; k < x.cols; ++k) acc += x(i, k) * y(k, j);
      z(i, j) = acc;
    }
  }
  return z;
}

inline DMat dhadamard(const DMat& x, const DMat& y) {
  DMat z(x.rows, x.cols);
  for (size_t i = 0; i < z.a.size(); ++i) z.a[i] = x.a[i] * y.a[i];
  return z;
}

inline DMat dswish(const DMat& x) {
  DMat z(x.rows, x.cols);
  for (size_t i = 0; i < z.a.size(); ++i) z.a[i] = x.a[i] / (1.0 + std::exp(-x.a[i]));
  return z;
}

inline DMat dsoftmax_rows(const DMat& x) {
  DMat z(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double mx = x(i, 0);
    for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x(i, j));
    double sum = 0.0;
    for (int j = 0; j < x.cols; ++j) sum += std::exp(x(i, j) - mx);
    for (int j = 0; j < x.cols; ++j) z(i, j) = std::exp(x(i, j) - mx) / sum;
  }
  return z;
}

inline double dmse(const DMat& x, const DMat& y) {
  double acc = 0.0;
  for (size_t i = 0; i < x.a.size(); ++i) {
    const double d = x.a[i] - y.a[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.a.size());
}

inline double dsum(const DMat& x) {
  double acc = 0.0;
  for (double v : x.a) acc += v;
  return acc;
}

inline DMat dnormalize_rows(const DMat& x) {
  DMat z(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < x.cols; ++j) s += x(i, j);
    for (int j = 0; j < x.cols; ++j) z(i, j) = x(i, j) / s;
  }
  return z;
}

inline DMat drow_scale(const DMat& x, const DMat& w) {
  DMat z(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    for (int j = 0; j < x.cols; ++j) z(i, j) = x(i, j) * w(i, 0);
  }
  return z;
}

inline DMat dgather_rows(const DMat& x, const std::vector<int>& idx) {
  DMat z(static_cast<int>(idx.size()), x.cols);
  for (size_t r = 0; r < idx.size(); ++r) {
    for (int j = 0; j < x.cols; ++j) z(static_cast<int>(r), j) = x(idx[r], j);
  }
  return z;
}

inline DMat dscatter_rows(const DMat& x, const std::vector<int>& idx, int out_rows) {
  DMat z(out_rows, x.cols);
  for (size_t r = 0; r < idx.size(); ++r) {
    for (int j = 0; j < x.cols; ++j) z(idx[r], j) += x(static_cast<int>(r), j);
  }
  return z;
}

inline DMat dgather_entries(const DMat& x, const std::vector<std::pair<int, int>>& rc, int out_rows,
                            int out_cols) {
  DMat z(out_rows, out_cols);
  for (size_t p = 0; p < rc.size(); ++p) z.a[p] = x(rc[p].first, rc[p].second);
  return z;
}

/// (x W_u) ⊙ swish(x W_g) W_d in doubles.
inline DMat dffn(const DMat& w_up, const DMat& w_gate, const DMat& w_down, const DMat& x) {
  return dmatmul(dhadamard(dmatmul(x, w_up), dswish(dmatmul(x, w_gate))), w_down);
}

/// Top-k per row, descending, ties to the lowest index — same rule as the
/// library's selection.
inline std::vector<int> dtopk_row(const DMat& routing, int row, int k) {
  std::vector<int> order(routing.cols);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int p, int q) {
    if (routing(row, p) != routing(row, q)) return routing(row, p) > routing(row, q);
    return p < q;
  });
  order.resize(k);
  return order;
}

/// Smallest gap, over rows, between the k-th and (k+1)-th routing weight.
/// Instances below a margin are resampled in gradient tests so the discrete
/// expert selection cannot flip between perturbed evaluations.
inline double topk_margin(const DMat& routing, int k) {
  if (k >= routing.cols) return std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  for (int r = 0; r < routing.rows; ++r) {
    std::vector<double> vals(routing.a.begin() + static_cast<size_t>(r) * routing.cols,
                             routing.a.begin() + static_cast<size_t>(r + 1) * routing.cols);
    std::sort(vals.begin(), vals.end(), std::greater<>());
    margin = std::min(margin, vals[k - 1] - vals[k]);
  }
  return margin;
}

/// Dense-mask mixture reference: every expert runs on every token; a 0/1
/// top-k mask and the (optionally renormalized) routing weights mix them.
struct RefExpert {
  DMat up, gate, down;
};

inline DMat dmoe_forward(const DMat& router, const std::vector<RefExpert>& experts, const DMat& x,
                         const std::vector<int>& k_per_token, bool renormalize) {
  const int n = static_cast<int>(experts.size());
  const DMat routing = dsoftmax_rows(dmatmul(x, router));
  std::vector<DMat> outs;
  outs.reserve(n);
  for (const RefExpert& e : experts) outs.push_back(dffn(e.up, e.gate, e.down, x));

  DMat y(x.rows, x.cols);
  for (int t = 0; t < x.rows; ++t) {
    const std::vector<int> picked = dtopk_row(routing, t, k_per_token[t]);
    double sum = 0.0;
    for (int e : picked) sum += routing(t, e);
    for (int e : picked) {
      const double w = renormalize ? routing(t, e) / sum : routing(t, e);
      for (int j = 0; j < x.cols; ++j) y(t, j) += w * outs[e](t, j);
    }
  }
  return y;
}

/// Per-token accumulation form of the balancing penalty.
inline double daux_loss(const DMat& routing, int k) {
  const int batch = routing.rows;
  const int n = routing.cols;
  std::vector<double> f(n, 0.0), p(n, 0.0);
  for (int t = 0; t < batch; ++t) {
    for (int e : dtopk_row(routing, t, k)) f[e] += 1.0 / (static_cast<double>(batch) * k);
    for (int e = 0; e < n; ++e) p[e] += routing(t, e) / batch;
  }
  double out = 0.0;
  for (int e = 0; e < n; ++e) out += f[e] * p[e];
  return out;
}

/// All trainable tensors of one student block, in doubles.
struct RefBlock {
  DMat router;
  std::vector<RefExpert> experts;

  static RefBlock from(const moekit::MoeBlock& b) {
    RefBlock r;
    r.router = DMat::from(b.router.weight);
    for (const moekit::Expert& e : b.experts) {
      r.experts.push_back({DMat::from(e.w_up), DMat::from(e.w_gate), DMat::from(e.w_down)});
    }
    return r;
  }

  std::vector<DMat*> tensors() {
    std::vector<DMat*> out{&router};
    for (RefExpert& e : experts) {
      out.push_back(&e.up);
      out.push_back(&e.gate);
      out.push_back(&e.down);
    }
    return out;
  }
};

/// Double-precision replica of the taped training objective: sparse student
/// forward with renormalized top-k mixing, MSE against the target, plus the
/// balancing penalty under the fixed or adaptive coefficient.
inline double ref_student_loss(const RefBlock& block, const DMat& x, const DMat& target, int k, double alpha,
                               bool adaptive) {
  const int batch = x.rows;
  const int n = static_cast<int>(block.experts.size());
  const DMat routing = dsoftmax_rows(dmatmul(x, block.router));

  DMat y(batch, x.cols);
  std::vector<double> f(n, 0.0);
  for (int t = 0; t < batch; ++t) {
    const std::vector<int> picked = dtopk_row(routing, t, k);
    double sum = 0.0;
    for (int e : picked) sum += routing(t, e);
    for (int e : picked) {
      f[e] += 1.0 / (static_cast<double>(batch) * k);
      DMat xt(1, x.cols);
      for (int j = 0; j < x.cols; ++j) xt(0, j) = x(t, j);
      const DMat yt = dffn(block.experts[e].up, block.experts[e].gate, block.experts[e].down, xt);
      const double w = routing(t, e) / sum;
      for (int j = 0; j < x.cols; ++j) y(t, j) += w * yt(0, j);
    }
  }

  const double l_mse = dmse(y, target);
  double l_aux = 0.0;
  for (int e = 0; e < n; ++e) {
    double p = 0.0;
    for (int t = 0; t < batch; ++t) p += routing(t, e);
    l_aux += f[e] * (p / batch);
  }
  const double coeff = adaptive ? alpha * std::abs(l_mse) : alpha;
  return l_mse + coeff * l_aux;
}

/// Worst relative error between analytic gradients and central finite
/// differences of `ref_loss` taken entry-by-entry on `base`. `base` is
/// mutated in place during probing and restored afterwards.
inline double max_grad_rel_err(const moekit::Tensor2& analytic, DMat& base,
                               const std::function<double(const DMat&)>& ref_loss, double eps = 1e-4) {
  double worst = 0.0;
  for (size_t i = 0; i < base.a.size(); ++i) {
    const double orig = base.a[i];
    base.a[i] = orig + eps;
    const double lp = ref_loss(base);
    base.a[i] = orig - eps;
    const double lm = ref_loss(base);
    base.a[i] = orig;
    const double fd = (lp - lm) / (2.0 * eps);
    const double an = analytic.data[i];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

}  // namespace oracles
