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

#include <cstdint>

#include "moekit/transformer.hpp"

namespace moekit {

/// Closed-form parameter and per-token FLOP counts for a model with its
/// highest-index `n_moe_layers` FFNs converted to N-expert mixtures.
struct ParamFlopReport {
  uint64_t total_params = 0;
  uint64_t activated_params = 0;            // per-token, under top-k routing
  uint64_t ffn_flops_per_token_dense = 0;   // all layers dense
  uint64_t ffn_flops_per_token_moe = 0;     // with n_moe_layers converted
  double reduction_ratio = 0.0;             // 1 - activated/total over the FFN stack (incl. routers)
};

inline ParamFlopReport count_params_flops(const TransformerConfig& cfg, int n_moe_layers, int n_experts, int k) {
  cfg.validate();
  if (n_moe_layers < 0 || n_moe_layers > cfg.n_layers) {
    throw std::invalid_argument("count_params_flops: n_moe_layers out of range");
  }
  if (n_moe_layers > 0) {
    if (n_experts < 2) throw std::invalid_argument("count_params_flops: need at least two experts");
    if (k < 1 || k > n_experts) throw std::invalid_argument("count_params_flops: k out of range");
    if (cfg.d_i % n_experts != 0) {
      throw std::invalid_argument("count_params_flops: d_i not divisible by expert count");
    }
  }

  const uint64_t d_h = cfg.d_h, d_i = cfg.d_i, vocab = cfg.vocab;
  const uint64_t n_dense = static_cast<uint64_t>(cfg.n_layers - n_moe_layers);
  const uint64_t n_moe = static_cast<uint64_t>(n_moe_layers);
  const uint64_t nn = n_moe_layers > 0 ? static_cast<uint64_t>(n_experts) : 1;
  const uint64_t kk = n_moe_layers > 0 ? static_cast<uint64_t>(k) : 1;

  const uint64_t attn_params = 4 * d_h * d_h;
  const uint64_t norm_params = 2 * d_h;
  const uint64_t ffn_params = 3 * d_h * d_i;
  const uint64_t router_params = d_h * nn;
  const uint64_t expert_params = 3 * d_h * (d_i / nn);  // one expert

  const uint64_t non_ffn = 2 * vocab * d_h + d_h +
                           static_cast<uint64_t>(cfg.n_layers) * (attn_params + norm_params);
  const uint64_t ffn_total = n_dense * ffn_params + n_moe * (router_params + nn * expert_params);
  const uint64_t ffn_activated = n_dense * ffn_params + n_moe * (router_params + kk * expert_params);

  ParamFlopReport r;
  r.total_params = non_ffn + ffn_total;
  r.activated_params = non_ffn + ffn_activated;
  r.ffn_flops_per_token_dense = static_cast<uint64_t>(cfg.n_layers) * 6 * d_h * d_i;
  const uint64_t moe_layer_flops = kk * 6 * d_h * (d_i / nn) + 2 * d_h * nn;
  r.ffn_flops_per_token_moe = n_dense * 6 * d_h * d_i + n_moe * moe_layer_flops;
  r.reduction_ratio = ffn_total == 0 ? 0.0
                                     : 1.0 - static_cast<double>(ffn_activated) / static_cast<double>(ffn_total);
  return r;
}

}  // namespace moekit
