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

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moekit/io.hpp"
#include "moekit/moe.hpp"
#include "moekit/transformer.hpp"

namespace moekit {

// Checkpoint container, magic "LDMO" version 1:
//   magic[4] | u32 version | u64 json_len + config JSON | u32 tensor_count |
//   tensor_count * (string name | u32 rows | u32 cols | f32 data)
// Both whole models and single trained blocks use it; the config JSON "type"
// field says which.

constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensors {
  std::vector<std::pair<std::string, Tensor2>> items;

  void put(std::string name, Tensor2 t) { items.emplace_back(std::move(name), std::move(t)); }

  const Tensor2& get(const std::string& name) const {
    for (const auto& [n, t] : items) {
      if (n == name) return t;
    }
    throw std::runtime_error("checkpoint is missing tensor: " + name);
  }
};

inline void write_container(const std::string& path, const nlohmann::json& config, const NamedTensors& tensors) {
  auto os = io::open_out(path);
  os.write("LDMO", 4);
  io::write_u32(os, kCheckpointVersion);
  const std::string cfg = config.dump();
  io::write_u64(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  io::write_u32(os, static_cast<uint32_t>(tensors.items.size()));
  for (const auto& [name, t] : tensors.items) {
    io::write_string(os, name);
    io::write_tensor(os, t);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::pair<nlohmann::json, NamedTensors> read_container(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "LDMO", "checkpoint");
  const uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  const uint64_t cfg_len = io::read_u64(is);
  if (cfg_len > (1u << 26)) throw std::runtime_error("corrupt file: unreasonable config length");
  std::string cfg(cfg_len, '\0');
  if (cfg_len > 0 && !is.read(cfg.data(), static_cast<std::streamsize>(cfg_len))) io::fail_truncated();
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::parse_error&) {
    throw std::runtime_error("corrupt file: config block is not valid JSON");
  }
  NamedTensors tensors;
  const uint32_t count = io::read_u32(is);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    tensors.put(std::move(name), io::read_tensor(is));
  }
  return {std::move(config), std::move(tensors)};
}

inline nlohmann::json policy_to_json(const LayerPolicy& p) {
  if (const auto* s = std::get_if<StaticPolicy>(&p)) {
    return {{"type", "static"}, {"k", s->k}};
  }
  const auto& d = std::get<DynamicPolicy>(p);
  return {{"type", "dynamic"}, {"alpha_i", d.alpha_i}, {"beta_i", d.beta_i}};
}

inline LayerPolicy policy_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  LayerPolicy p;
  if (type == "static") {
    p = StaticPolicy{j.at("k").get<int>()};
  } else if (type == "dynamic") {
    p = DynamicPolicy{j.at("alpha_i").get<double>(), j.at("beta_i").get<double>()};
  } else {
    throw std::runtime_error("unknown policy type: " + type);
  }
  validate_policy(p);
  return p;
}

namespace detail {

inline std::string layer_key(int l, const char* suffix) {
  return "layers." + std::to_string(l) + "." + suffix;
}

inline void put_block_tensors(NamedTensors& out, const std::string& prefix, const MoeBlock& b) {
  out.put(prefix + "router", b.router.weight);
  for (int e = 0; e < b.n_experts(); ++e) {
    const std::string ep = prefix + "expert" + std::to_string(e) + ".";
    out.put(ep + "w_up", b.experts[e].w_up);
    out.put(ep + "w_gate", b.experts[e].w_gate);
    out.put(ep + "w_down", b.experts[e].w_down);
  }
}

/// Expert slices are positional provenance of the original split; they are
/// reconstructed from expert order rather than stored.
inline MoeBlock block_from_tensors(const NamedTensors& t, const std::string& prefix, int n_experts,
                                   const LayerPolicy& policy) {
  MoeBlock b;
  b.router.weight = t.get(prefix + "router");
  for (int e = 0; e < n_experts; ++e) {
    const std::string ep = prefix + "expert" + std::to_string(e) + ".";
    Expert ex;
    ex.w_up = t.get(ep + "w_up");
    ex.w_gate = t.get(ep + "w_gate");
    ex.w_down = t.get(ep + "w_down");
    ex.slice_begin = e * ex.w_up.cols;
    ex.slice_end = (e + 1) * ex.w_up.cols;
    b.experts.push_back(std::move(ex));
  }
  b.policy = policy;
  b.validate();
  return b;
}

}  // namespace detail

inline void save_model(const std::string& path, const ToyTransformer& m) {
  nlohmann::json layers = nlohmann::json::array();
  NamedTensors tensors;
  tensors.put("embed", m.embedding);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const TransformerLayer& layer = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    tensors.put(p + "attn_norm", layer.attn_norm);
    tensors.put(p + "wq", layer.wq);
    tensors.put(p + "wk", layer.wk);
    tensors.put(p + "wv", layer.wv);
    tensors.put(p + "wo", layer.wo);
    tensors.put(p + "ffn_norm", layer.ffn_norm);
    if (layer.is_moe()) {
      const MoeBlock& b = std::get<MoeBlock>(layer.ffn);
      layers.push_back({{"kind", "moe"},
                        {"n_experts", b.n_experts()},
                        {"policy", policy_to_json(b.policy)}});
      detail::put_block_tensors(tensors, p + "moe.", b);
    } else {
      const DenseFfn& f = std::get<DenseFfn>(layer.ffn);
      layers.push_back({{"kind", "dense"}});
      tensors.put(p + "ffn.w_up", f.w_up);
      tensors.put(p + "ffn.w_gate", f.w_gate);
      tensors.put(p + "ffn.w_down", f.w_down);
    }
  }
  tensors.put("final_norm", m.final_norm);
  tensors.put("unembed", m.unembed);

  nlohmann::json config = {{"type", "model"},
                           {"n_layers", m.config.n_layers},
                           {"d_h", m.config.d_h},
                           {"d_i", m.config.d_i},
                           {"n_heads", m.config.n_heads},
                           {"vocab", m.config.vocab},
                           {"seq_len", m.config.seq_len},
                           {"layers", layers}};
  write_container(path, config, tensors);
}

inline ToyTransformer load_model(const std::string& path) {
  auto [config, tensors] = read_container(path);
  if (config.value("type", "") != "model") {
    throw std::runtime_error("checkpoint is not a model: " + path);
  }
  ToyTransformer m;
  m.config.n_layers = config.at("n_layers").get<int>();
  m.config.d_h = config.at("d_h").get<int>();
  m.config.d_i = config.at("d_i").get<int>();
  m.config.n_heads = config.at("n_heads").get<int>();
  m.config.vocab = config.at("vocab").get<int>();
  m.config.seq_len = config.at("seq_len").get<int>();
  m.config.validate();

  const auto& layers_cfg = config.at("layers");
  if (static_cast<int>(layers_cfg.size()) != m.config.n_layers) {
    throw std::runtime_error("corrupt file: layer list does not match n_layers");
  }
  m.embedding = tensors.get("embed");
  for (int l = 0; l < m.config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    TransformerLayer layer;
    layer.attn_norm = tensors.get(p + "attn_norm");
    layer.wq = tensors.get(p + "wq");
    layer.wk = tensors.get(p + "wk");
    layer.wv = tensors.get(p + "wv");
    layer.wo = tensors.get(p + "wo");
    layer.ffn_norm = tensors.get(p + "ffn_norm");
    const auto& lc = layers_cfg.at(l);
    if (lc.at("kind") == "moe") {
      const int n = lc.at("n_experts").get<int>();
      layer.ffn = detail::block_from_tensors(tensors, p + "moe.", n, policy_from_json(lc.at("policy")));
    } else {
      DenseFfn f;
      f.w_up = tensors.get(p + "ffn.w_up");
      f.w_gate = tensors.get(p + "ffn.w_gate");
      f.w_down = tensors.get(p + "ffn.w_down");
      f.validate();
      layer.ffn = std::move(f);
    }
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = tensors.get("final_norm");
  m.unembed = tensors.get("unembed");
  return m;
}

/// A trained block for one layer, stored standalone between `train` and
/// `assemble`.
inline void save_block(const std::string& path, const MoeBlock& block, int layer_index) {
  block.validate();
  NamedTensors tensors;
  detail::put_block_tensors(tensors, "", block);
  nlohmann::json config = {{"type", "block"},
                           {"layer", layer_index},
                           {"d_h", block.d_h()},
                           {"d_i_prime", block.d_i_prime()},
                           {"n_experts", block.n_experts()},
                           {"policy", policy_to_json(block.policy)}};
  write_container(path, config, tensors);
}

inline std::pair<MoeBlock, int> load_block(const std::string& path) {
  auto [config, tensors] = read_container(path);
  if (config.value("type", "") != "block") {
    throw std::runtime_error("checkpoint is not a trained block: " + path);
  }
  const int n = config.at("n_experts").get<int>();
  MoeBlock b = detail::block_from_tensors(tensors, "", n, policy_from_json(config.at("policy")));
  return {std::move(b), config.at("layer").get<int>()};
}

}  // namespace moekit
