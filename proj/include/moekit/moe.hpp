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

#include <span>
#include <vector>

#include "moekit/ffn.hpp"
#include "moekit/routing_policy.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

/// Bias-free linear gate over experts.
struct Router {
  Tensor2 weight;  // [d_h, n_experts]

  int d_h() const { return weight.rows; }
  int n_experts() const { return weight.cols; }
};

inline Router random_router(int d_h, int n_experts, Rng& rng) {
  if (n_experts < 2) throw std::invalid_argument("Router: need at least two experts");
  return Router{randn(d_h, n_experts, 0.02, rng)};
}

/// Routing weights: softmax(x W_r), one probability row per token.
inline Tensor2 route(const Router& router, const Tensor2& x) {
  if (x.cols != router.d_h()) throw std::invalid_argument("route: input width != d_h");
  return softmax_rows(matmul(x, router.weight));
}

/// A gated mixture replacing one dense FFN.
struct MoeBlock {
  Router router;
  std::vector<Expert> experts;
  LayerPolicy policy = StaticPolicy{2};

  int d_h() const { return router.d_h(); }
  int n_experts() const { return static_cast<int>(experts.size()); }
  int d_i_prime() const { return experts.empty() ? 0 : experts.front().d_i_prime(); }

  void validate() const {
    if (n_experts() < 2) throw std::invalid_argument("MoeBlock: need at least two experts");
    if (router.n_experts() != n_experts()) {
      throw std::invalid_argument("MoeBlock: router width != expert count");
    }
    for (const Expert& e : experts) {
      if (e.d_h() != d_h() || e.d_i_prime() != d_i_prime()) {
        throw std::invalid_argument("MoeBlock: experts disagree on shape");
      }
    }
    validate_policy(policy);
  }
};

/// Split-initialized block: experts are the slices of `ffn`, router is
/// small-Gaussian so initial routing starts near uniform.
inline MoeBlock moefy_ffn(const DenseFfn& ffn, int n_experts, Rng& rng, LayerPolicy policy = StaticPolicy{2}) {
  MoeBlock b;
  b.router = random_router(ffn.d_h(), n_experts, rng);
  b.experts = split_ffn(ffn, n_experts);
  b.policy = policy;
  b.validate();
  return b;
}

/// Per-token expert counts for a policy, given routing weights [T, N].
inline std::vector<int> decide_k(const LayerPolicy& policy, const Tensor2& routing) {
  validate_policy(policy);
  std::vector<int> ks(routing.rows);
  if (const auto* s = std::get_if<StaticPolicy>(&policy)) {
    std::fill(ks.begin(), ks.end(), s->k);
    return ks;
  }
  const auto& d = std::get<DynamicPolicy>(policy);
  for (int i = 0; i < routing.rows; ++i) {
    float mx = routing(i, 0);
    for (int j = 1; j < routing.cols; ++j) mx = std::max(mx, routing(i, j));
    ks[i] = dynamic_k(mx, d.alpha_i, d.beta_i);
  }
  return ks;
}

/// Per-token observations from one mixture forward pass.
struct MoeForwardStats {
  std::vector<float> max_weight;  // max routing weight per token
  std::vector<int> k_used;        // experts activated per token
};

/// Sparse mixture forward. Each token is sent to its top-k experts; the
/// selected routing weights are renormalized to sum 1 before mixing unless
/// `renormalize` is false (raw softmax weights).
inline Tensor2 moe_forward(const MoeBlock& block, const Tensor2& x, std::span<const int> k_per_token,
                           bool renormalize = true, MoeForwardStats* stats = nullptr) {
  block.validate();
  const int n = block.n_experts();
  if (x.cols != block.d_h()) throw std::invalid_argument("moe_forward: input width != d_h");
  if (static_cast<int>(k_per_token.size()) != x.rows) {
    throw std::invalid_argument("moe_forward: one k per token required");
  }
  for (int k : k_per_token) {
    if (k < 1 || k > n) throw std::invalid_argument("moe_forward: k out of range");
  }

  const Tensor2 routing = route(block.router, x);

  // Dispatch lists per expert: token row plus its mixture weight.
  std::vector<std::vector<int>> expert_rows(n);
  std::vector<std::vector<float>> expert_weights(n);
  if (stats) {
    stats->max_weight.assign(x.rows, 0.0f);
    stats->k_used.assign(x.rows, 0);
  }
  for (int t = 0; t < x.rows; ++t) {
    const int k = k_per_token[t];
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (routing(t, a) != routing(t, b)) return routing(t, a) > routing(t, b);
      return a < b;
    });
    double sum = 0.0;
    for (int s = 0; s < k; ++s) sum += routing(t, order[s]);
    for (int s = 0; s < k; ++s) {
      const double w = renormalize ? routing(t, order[s]) / sum : routing(t, order[s]);
      expert_rows[order[s]].push_back(t);
      expert_weights[order[s]].push_back(static_cast<float>(w));
    }
    if (stats) {
      float mx = routing(t, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, routing(t, j));
      stats->max_weight[t] = mx;
      stats->k_used[t] = k;
    }
  }

  Tensor2 y(x.rows, x.cols);
  for (int e = 0; e < n; ++e) {
    if (expert_rows[e].empty()) continue;
    Tensor2 xe(static_cast<int>(expert_rows[e].size()), x.cols);
    for (size_t r = 0; r < expert_rows[e].size(); ++r) {
      for (int j = 0; j < x.cols; ++j) xe(static_cast<int>(r), j) = x(expert_rows[e][r], j);
    }
    const Tensor2 ye = expert_forward(block.experts[e], xe);
    for (size_t r = 0; r < expert_rows[e].size(); ++r) {
      const float w = expert_weights[e][r];
      const int t = expert_rows[e][r];
      for (int j = 0; j < x.cols; ++j) y(t, j) += w * ye(static_cast<int>(r), j);
    }
  }
  ensure_finite(y, "moe_forward");
  return y;
}

/// Routes with the block's own policy and runs the mixture.
inline Tensor2 moe_apply(const MoeBlock& block, const Tensor2& x, MoeForwardStats* stats = nullptr) {
  const Tensor2 routing = route(block.router, x);
  const std::vector<int> ks = decide_k(block.policy, routing);
  return moe_forward(block, x, ks, /*renormalize=*/true, stats);
}

}  // namespace moekit
