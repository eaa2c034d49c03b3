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
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moekit/checkpoint.hpp"
#include "moekit/io.hpp"
#include "moekit/routing_policy.hpp"
#include "moekit/transformer.hpp"

namespace moekit {

/// Empirical quantile with linear interpolation between order statistics:
/// position q*(n-1) into the ascending-sorted samples.
inline double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("quantile: empty samples");
  if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile: q outside [0, 1]");
  std::sort(samples.begin(), samples.end());
  const double h = q * static_cast<double>(samples.size() - 1);
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= samples.size()) return samples.back();
  const double frac = h - static_cast<double>(lo);
  return samples[lo] + frac * (samples[lo + 1] - samples[lo]);
}

/// Per-layer samples of the maximal routing weight observed at inference.
/// Softmax over N experts bounds every sample to [1/N, 1).
struct RoutingProfile {
  int n_experts = 0;
  std::string corpus_id;
  std::map<int, std::vector<double>> samples;  // layer index -> w_max samples

  void validate() const {
    if (n_experts < 2) throw std::invalid_argument("RoutingProfile: need at least two experts");
    const double lo = 1.0 / n_experts - 1e-6;
    for (const auto& [layer, vals] : samples) {
      if (vals.empty()) {
        throw std::invalid_argument("RoutingProfile: layer " + std::to_string(layer) + " has no samples");
      }
      for (double v : vals) {
        if (v < lo || v > 1.0) {
          throw std::invalid_argument("RoutingProfile: sample outside [1/N, 1] at layer " +
                                      std::to_string(layer));
        }
      }
    }
  }
};

constexpr uint32_t kProfileVersion = 1;

// Profile file, magic "LDPR" version 1:
//   magic[4] | u32 version | u32 entry_count | u32 n_experts |
//   string corpus_id | entry_count * (u32 layer | u64 count | count f32)
inline void save_profile(const std::string& path, const RoutingProfile& p) {
  p.validate();
  auto os = io::open_out(path);
  os.write("LDPR", 4);
  io::write_u32(os, kProfileVersion);
  io::write_u32(os, static_cast<uint32_t>(p.samples.size()));
  io::write_u32(os, static_cast<uint32_t>(p.n_experts));
  io::write_string(os, p.corpus_id);
  for (const auto& [layer, vals] : p.samples) {
    io::write_u32(os, static_cast<uint32_t>(layer));
    io::write_u64(os, vals.size());
    for (double v : vals) io::write_f32(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline RoutingProfile load_profile(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "LDPR", "routing profile");
  const uint32_t version = io::read_u32(is);
  if (version != kProfileVersion) throw std::runtime_error("unsupported profile version");
  const uint32_t entries = io::read_u32(is);
  RoutingProfile p;
  p.n_experts = static_cast<int>(io::read_u32(is));
  p.corpus_id = io::read_string(is);
  for (uint32_t i = 0; i < entries; ++i) {
    const int layer = static_cast<int>(io::read_u32(is));
    const uint64_t count = io::read_u64(is);
    if (count > (1ull << 32)) throw std::runtime_error("corrupt file: unreasonable sample count");
    std::vector<double> vals(count);
    for (double& v : vals) v = io::read_f32(is);
    p.samples[layer] = std::move(vals);
  }
  p.validate();
  return p;
}

/// Runs the model over the corpus and records, for every token and every
/// mixture layer, the maximal routing weight that layer assigned the token.
inline RoutingProfile profile_routing(const ToyTransformer& model, const std::vector<std::vector<int>>& corpus,
                                      const std::string& corpus_id) {
  if (corpus.empty()) throw std::invalid_argument("profile_routing: empty corpus");
  const std::vector<int> moe_layers = model.moe_layer_indices();
  if (moe_layers.empty()) {
    throw std::invalid_argument("profile_routing: model has no mixture layers to profile");
  }

  RoutingProfile p;
  p.corpus_id = corpus_id;
  p.n_experts = std::get<MoeBlock>(model.layers[moe_layers.front()].ffn).n_experts();
  for (int l : moe_layers) p.samples[l] = {};

  ForwardHooks hooks;
  hooks.on_moe_stats = [&](int layer, const MoeForwardStats& stats) {
    auto& dst = p.samples[layer];
    for (float w : stats.max_weight) dst.push_back(w);
  };
  for (const auto& seq : corpus) transformer_forward(model, seq, &hooks);
  p.validate();
  return p;
}

/// Global and per-layer quantile thresholds behind a policy decision.
/// alpha cuts the top p_u mass of the pooled maximal-weight distribution;
/// beta cuts the bottom p_e mass. Per-layer alpha_i/beta_i use the same rule
/// on that layer's own samples.
struct QuantileThresholds {
  double p_u = 0.0;
  double p_e = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::map<int, double> alpha_i;
  std::map<int, double> beta_i;
};

struct PolicyDecision {
  QuantileThresholds thresholds;
  std::map<int, LayerPolicy> policies;  // layer index -> policy
  bool degenerate = false;  // pooled distribution had no spread; forced Static(2)
};

// Per-layer policy from the threshold grid. A layer whose high tail is heavy
// (alpha_i above global alpha) can afford fewer experts; a heavy low tail
// (beta_i below global beta) needs more. Boundary cases count toward the
// default Static(2) cell. A layer extreme on both ends gets the token-wise
// dynamic rule instead of a fixed k.
inline PolicyDecision decide_policies(const RoutingProfile& profile, double p_u, double p_e) {
  profile.validate();
  if (p_u <= 0.0 || p_u >= 1.0 || p_e <= 0.0 || p_e >= 1.0) {
    throw std::invalid_argument("decide_policies: p_u and p_e must lie strictly inside (0, 1)");
  }
  if (p_u + p_e > 1.0) throw std::invalid_argument("decide_policies: p_u + p_e must be <= 1");

  std::vector<double> pooled;
  for (const auto& [layer, vals] : profile.samples) {
    pooled.insert(pooled.end(), vals.begin(), vals.end());
  }

  PolicyDecision out;
  out.thresholds.p_u = p_u;
  out.thresholds.p_e = p_e;
  out.thresholds.alpha = quantile(pooled, 1.0 - p_u);
  out.thresholds.beta = quantile(pooled, p_e);

  if (out.thresholds.alpha == out.thresholds.beta) {
    // No spread to read a policy from; keep every layer on the default k.
    out.degenerate = true;
    for (const auto& [layer, vals] : profile.samples) {
      out.thresholds.alpha_i[layer] = quantile(vals, 1.0 - p_u);
      out.thresholds.beta_i[layer] = quantile(vals, p_e);
      out.policies[layer] = StaticPolicy{2};
    }
    return out;
  }

  for (const auto& [layer, vals] : profile.samples) {
    const double ai = quantile(vals, 1.0 - p_u);
    const double bi = quantile(vals, p_e);
    out.thresholds.alpha_i[layer] = ai;
    out.thresholds.beta_i[layer] = bi;
    const bool low_alpha = ai <= out.thresholds.alpha;
    const bool high_beta = bi >= out.thresholds.beta;
    LayerPolicy p;
    if (low_alpha && high_beta) {
      p = StaticPolicy{2};
    } else if (!low_alpha && high_beta) {
      p = StaticPolicy{1};
    } else if (low_alpha && !high_beta) {
      p = StaticPolicy{3};
    } else {
      p = DynamicPolicy{ai, bi};
    }
    validate_policy(p);
    out.policies[layer] = p;
  }
  return out;
}

// Policy file: a JSON list with one entry per mixture layer. Every entry
// repeats the global thresholds so the file is self-describing.
inline void save_policy_json(const std::string& path, const PolicyDecision& d) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [layer, policy] : d.policies) {
    nlohmann::json entry = {{"layer", layer},
                            {"alpha", d.thresholds.alpha},
                            {"beta", d.thresholds.beta},
                            {"p_u", d.thresholds.p_u},
                            {"p_e", d.thresholds.p_e}};
    if (const auto* s = std::get_if<StaticPolicy>(&policy)) {
      entry["policy"] = "static";
      entry["k"] = s->k;
    } else {
      const auto& dy = std::get<DynamicPolicy>(policy);
      entry["policy"] = "dynamic";
      entry["alpha_i"] = dy.alpha_i;
      entry["beta_i"] = dy.beta_i;
    }
    list.push_back(std::move(entry));
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << list.dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::map<int, LayerPolicy> load_policy_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open policy file: " + path);
  nlohmann::json list;
  try {
    is >> list;
  } catch (const nlohmann::json::parse_error&) {
    throw std::runtime_error("policy file is not valid JSON: " + path);
  }
  if (!list.is_array()) throw std::runtime_error("policy file must be a JSON list: " + path);
  std::map<int, LayerPolicy> out;
  for (const auto& entry : list) {
    const int layer = entry.at("layer").get<int>();
    const std::string kind = entry.at("policy").get<std::string>();
    LayerPolicy p;
    if (kind == "static") {
      p = StaticPolicy{entry.at("k").get<int>()};
    } else if (kind == "dynamic") {
      p = DynamicPolicy{entry.at("alpha_i").get<double>(), entry.at("beta_i").get<double>()};
    } else {
      throw std::runtime_error("unknown policy kind in policy file: " + kind);
    }
    validate_policy(p);
    if (!out.emplace(layer, p).second) {
      throw std::runtime_error("duplicate layer in policy file: " + std::to_string(layer));
    }
  }
  return out;
}

/// Installs per-layer policies onto a model's mixture blocks.
inline void apply_policies(ToyTransformer& model, const std::map<int, LayerPolicy>& policies) {
  for (const auto& [layer, policy] : policies) {
    if (layer < 0 || layer >= static_cast<int>(model.layers.size())) {
      throw std::invalid_argument("apply_policies: layer out of range: " + std::to_string(layer));
    }
    auto* block = std::get_if<MoeBlock>(&model.layers[layer].ffn);
    if (!block) {
      throw std::invalid_argument("apply_policies: layer " + std::to_string(layer) + " is not a mixture layer");
    }
    block->policy = policy;
  }
}

}  // namespace moekit
