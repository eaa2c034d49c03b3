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

#include <stdexcept>
#include <variant>

namespace moekit {

/// Static per-layer expert count, k in {1, 2, 3}.
struct StaticPolicy {
  int k = 2;
};

/// Token-wise policy: k is picked per token from the maximal routing weight
/// against the layer's two thresholds.
struct DynamicPolicy {
  double alpha_i = 0.0;  // high threshold
  double beta_i = 0.0;   // low threshold, beta_i < alpha_i
};

using LayerPolicy = std::variant<StaticPolicy, DynamicPolicy>;

inline void validate_policy(const LayerPolicy& p) {
  if (const auto* s = std::get_if<StaticPolicy>(&p)) {
    if (s->k < 1 || s->k > 3) throw std::invalid_argument("StaticPolicy: k must be 1, 2, or 3");
  } else {
    const auto& d = std::get<DynamicPolicy>(p);
    if (!(d.beta_i < d.alpha_i)) throw std::invalid_argument("DynamicPolicy: requires beta_i < alpha_i");
  }
}

/// Token-wise expert count: 1 when the max routing weight clears alpha_i,
/// 3 when it falls at or below beta_i, 2 otherwise.
inline int dynamic_k(double w_max, double alpha_i, double beta_i) {
  if (!(beta_i < alpha_i)) throw std::invalid_argument("dynamic_k: requires beta_i < alpha_i");
  if (w_max >= alpha_i) return 1;
  if (w_max <= beta_i) return 3;
  return 2;
}

}  // namespace moekit
