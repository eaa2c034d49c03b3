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

#include <functional>
#include <span>
#include <variant>
#include <vector>

#include "moekit/ffn.hpp"
#include "moekit/moe.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

struct TransformerConfig {
  int n_layers = 0;
  int d_h = 0;
  int d_i = 0;
  int n_heads = 0;
  int vocab = 0;
  int seq_len = 0;

  void validate() const {
    if (n_layers < 1 || d_h < 1 || d_i < 1 || n_heads < 1 || vocab < 1 || seq_len < 1) {
      throw std::invalid_argument("TransformerConfig: all dimensions must be positive");
    }
    if (d_h % n_heads != 0) throw std::invalid_argument("TransformerConfig: d_h not divisible by n_heads");
    if ((d_h / n_heads) % 2 != 0) {
      throw std::invalid_argument("TransformerConfig: head dimension must be even for rotary embedding");
    }
  }
};

/// One pre-norm decoder layer. The FFN slot holds either the original dense
/// block or its mixture replacement.
struct TransformerLayer {
  Tensor2 attn_norm;  // [1, d_h]
  Tensor2 wq, wk, wv, wo;  // each [d_h, d_h]
  Tensor2 ffn_norm;   // [1, d_h]
  std::variant<DenseFfn, MoeBlock> ffn;

  bool is_moe() const { return std::holds_alternative<MoeBlock>(ffn); }
};

struct ToyTransformer {
  TransformerConfig config;
  Tensor2 embedding;  // [vocab, d_h]
  std::vector<TransformerLayer> layers;
  Tensor2 final_norm;  // [1, d_h]
  Tensor2 unembed;     // [d_h, vocab]

  std::vector<int> moe_layer_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].is_moe()) out.push_back(static_cast<int>(i));
    }
    return out;
  }
};

inline ToyTransformer random_transformer(const TransformerConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ToyTransformer m;
  m.config = cfg;
  m.embedding = randn(cfg.vocab, cfg.d_h, 0.02, rng);
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
  for (int l = 0; l < cfg.n_layers; ++l) {
    TransformerLayer layer;
    layer.attn_norm = Tensor2::full(1, cfg.d_h, 1.0f);
    layer.wq = randn(cfg.d_h, cfg.d_h, attn_std, rng);
    layer.wk = randn(cfg.d_h, cfg.d_h, attn_std, rng);
    layer.wv = randn(cfg.d_h, cfg.d_h, attn_std, rng);
    layer.wo = randn(cfg.d_h, cfg.d_h, attn_std, rng);
    layer.ffn_norm = Tensor2::full(1, cfg.d_h, 1.0f);
    layer.ffn = random_ffn(cfg.d_h, cfg.d_i, rng);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = Tensor2::full(1, cfg.d_h, 1.0f);
  m.unembed = randn(cfg.d_h, cfg.vocab, attn_std, rng);
  return m;
}

inline Tensor2 rms_norm(const Tensor2& x, const Tensor2& weight, double eps = 1e-5) {
  if (weight.rows != 1 || weight.cols != x.cols) {
    throw std::invalid_argument("rms_norm: weight must be [1, cols]");
  }
  Tensor2 y(x.rows, x.cols);
  for (int i = 0; i < x.rows; ++i) {
    double ms = 0.0;
    for (int j = 0; j < x.cols; ++j) ms += static_cast<double>(x(i, j)) * x(i, j);
    const double inv = 1.0 / std::sqrt(ms / x.cols + eps);
    for (int j = 0; j < x.cols; ++j) {
      y(i, j) = static_cast<float>(x(i, j) * inv * weight(0, j));
    }
  }
  ensure_finite(y, "rms_norm");
  return y;
}

namespace detail {

inline void apply_rope(Tensor2& qk, int n_heads) {
  const int head_dim = qk.cols / n_heads;
  for (int t = 0; t < qk.rows; ++t) {
    for (int h = 0; h < n_heads; ++h) {
      const int base = h * head_dim;
      for (int i = 0; i < head_dim / 2; ++i) {
        const double theta = std::pow(10000.0, -2.0 * i / head_dim);
        const double angle = t * theta;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = qk(t, base + 2 * i);
        const double b = qk(t, base + 2 * i + 1);
        qk(t, base + 2 * i) = static_cast<float>(a * c - b * s);
        qk(t, base + 2 * i + 1) = static_cast<float>(a * s + b * c);
      }
    }
  }
}

inline Tensor2 causal_attention(const TransformerLayer& layer, const Tensor2& x, int n_heads) {
  const int T = x.rows;
  const int d_h = x.cols;
  const int head_dim = d_h / n_heads;
  Tensor2 q = matmul(x, layer.wq);
  Tensor2 k = matmul(x, layer.wk);
  Tensor2 v = matmul(x, layer.wv);
  apply_rope(q, n_heads);
  apply_rope(k, n_heads);

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor2 mixed(T, d_h);
  std::vector<double> scores;
  for (int h = 0; h < n_heads; ++h) {
    const int base = h * head_dim;
    for (int t = 0; t < T; ++t) {
      scores.assign(t + 1, 0.0);
      double mx = -1e300;
      for (int u = 0; u <= t; ++u) {
        double dot = 0.0;
        for (int d = 0; d < head_dim; ++d) {
          dot += static_cast<double>(q(t, base + d)) * k(u, base + d);
        }
        scores[u] = dot * inv_scale;
        mx = std::max(mx, scores[u]);
      }
      double denom = 0.0;
      for (int u = 0; u <= t; ++u) {
        scores[u] = std::exp(scores[u] - mx);
        denom += scores[u];
      }
      for (int d = 0; d < head_dim; ++d) {
        double acc = 0.0;
        for (int u = 0; u <= t; ++u) acc += scores[u] * v(u, base + d);
        mixed(t, base + d) = static_cast<float>(acc / denom);
      }
    }
  }
  return matmul(mixed, layer.wo);
}

}  // namespace detail

/// Observation points inside a forward pass. All are optional; layer index
/// is passed to each callback.
struct ForwardHooks {
  std::function<void(int, const Tensor2&)> on_ffn_input;    // post-norm FFN input rows
  std::function<void(int, const Tensor2&)> on_ffn_output;   // FFN (or mixture) output rows
  std::function<void(int, const MoeForwardStats&)> on_moe_stats;
};

/// Pre-norm causal decoder forward over one token sequence. Returns
/// next-token logits, one row per position.
inline Tensor2 transformer_forward(const ToyTransformer& model, std::span<const int> tokens,
                                   const ForwardHooks* hooks = nullptr) {
  const TransformerConfig& cfg = model.config;
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw std::invalid_argument("transformer_forward: empty token sequence");
  if (T > cfg.seq_len) throw std::invalid_argument("transformer_forward: sequence longer than seq_len");
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab) throw std::invalid_argument("transformer_forward: token id outside vocab");
  }

  Tensor2 x(T, cfg.d_h);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < cfg.d_h; ++j) x(t, j) = model.embedding(tokens[t], j);
  }

  for (size_t l = 0; l < model.layers.size(); ++l) {
    const TransformerLayer& layer = model.layers[l];
    const Tensor2 attn_out = detail::causal_attention(layer, rms_norm(x, layer.attn_norm), cfg.n_heads);
    x = add(x, attn_out);

    const Tensor2 ffn_in = rms_norm(x, layer.ffn_norm);
    if (hooks && hooks->on_ffn_input) hooks->on_ffn_input(static_cast<int>(l), ffn_in);

    Tensor2 ffn_out;
    if (layer.is_moe()) {
      const MoeBlock& block = std::get<MoeBlock>(layer.ffn);
      MoeForwardStats stats;
      const bool want_stats = hooks && hooks->on_moe_stats;
      ffn_out = moe_apply(block, ffn_in, want_stats ? &stats : nullptr);
      if (want_stats) hooks->on_moe_stats(static_cast<int>(l), stats);
    } else {
      ffn_out = ffn_forward(std::get<DenseFfn>(layer.ffn), ffn_in);
    }
    if (hooks && hooks->on_ffn_output) hooks->on_ffn_output(static_cast<int>(l), ffn_out);
    x = add(x, ffn_out);
  }

  return matmul(rms_norm(x, model.final_norm), model.unembed);
}

}  // namespace moekit
