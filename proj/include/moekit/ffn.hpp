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

#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

/// Gated feed-forward block: (x W_u) ⊙ swish(x W_g) W_d.
struct DenseFfn {
  Tensor2 w_up;    // [d_h, d_i]
  Tensor2 w_gate;  // [d_h, d_i]
  Tensor2 w_down;  // [d_i, d_h]

  int d_h() const { return w_up.rows; }
  int d_i() const { return w_up.cols; }

  void validate() const {
    if (w_gate.rows != d_h() || w_gate.cols != d_i() ||
        w_down.rows != d_i() || w_down.cols != d_h()) {
      throw std::invalid_argument("DenseFfn: inconsistent projection shapes");
    }
  }
};

/// One expert: a narrow FFN over a contiguous slice [begin, end) of the
/// source FFN's intermediate coordinates.
struct Expert {
  Tensor2 w_up;    // [d_h, d_i / N]
  Tensor2 w_gate;  // [d_h, d_i / N]
  Tensor2 w_down;  // [d_i / N, d_h]
  int slice_begin = 0;  // 0-based, inclusive
  int slice_end = 0;    // exclusive

  int d_h() const { return w_up.rows; }
  int d_i_prime() const { return w_up.cols; }
};

inline Tensor2 ffn_forward(const DenseFfn& ffn, const Tensor2& x) {
  if (x.cols != ffn.d_h()) throw std::invalid_argument("ffn_forward: input width != d_h");
  Tensor2 up = matmul(x, ffn.w_up);
  Tensor2 gate = swish(matmul(x, ffn.w_gate));
  return matmul(hadamard(up, gate), ffn.w_down);
}

inline Tensor2 expert_forward(const Expert& e, const Tensor2& x) {
  if (x.cols != e.d_h()) throw std::invalid_argument("expert_forward: input width != d_h");
  Tensor2 up = matmul(x, e.w_up);
  Tensor2 gate = swish(matmul(x, e.w_gate));
  return matmul(hadamard(up, gate), e.w_down);
}

/// Splits an FFN into n contiguous experts: expert i takes columns
/// [i*d', (i+1)*d') of W_u and W_g and the matching rows of W_d. Slices are
/// disjoint and exhaustive, so the unweighted sum of all expert outputs
/// reproduces the source FFN.
inline std::vector<Expert> split_ffn(const DenseFfn& ffn, int n_experts) {
  ffn.validate();
  if (n_experts < 1) throw std::invalid_argument("split_ffn: need at least one expert");
  if (ffn.d_i() % n_experts != 0) {
    throw std::invalid_argument("split_ffn: intermediate size not divisible by expert count");
  }
  const int dh = ffn.d_h();
  const int dp = ffn.d_i() / n_experts;
  std::vector<Expert> experts;
  experts.reserve(n_experts);
  for (int i = 0; i < n_experts; ++i) {
    Expert e;
    e.slice_begin = i * dp;
    e.slice_end = (i + 1) * dp;
    e.w_up = Tensor2(dh, dp);
    e.w_gate = Tensor2(dh, dp);
    e.w_down = Tensor2(dp, dh);
    for (int r = 0; r < dh; ++r) {
      for (int c = 0; c < dp; ++c) {
        e.w_up(r, c) = ffn.w_up(r, e.slice_begin + c);
        e.w_gate(r, c) = ffn.w_gate(r, e.slice_begin + c);
      }
    }
    for (int r = 0; r < dp; ++r) {
      for (int c = 0; c < dh; ++c) {
        e.w_down(r, c) = ffn.w_down(e.slice_begin + r, c);
      }
    }
    experts.push_back(std::move(e));
  }
  return experts;
}

inline DenseFfn random_ffn(int d_h, int d_i, Rng& rng) {
  DenseFfn f;
  const double up_std = 1.0 / std::sqrt(static_cast<double>(d_h));
  const double down_std = 1.0 / std::sqrt(static_cast<double>(d_i));
  f.w_up = randn(d_h, d_i, up_std, rng);
  f.w_gate = randn(d_h, d_i, up_std, rng);
  f.w_down = randn(d_i, d_h, down_std, rng);
  return f;
}

}  // namespace moekit
