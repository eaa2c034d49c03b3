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
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <moekit/moe.hpp>
#include <moekit/transformer.hpp>

using moekit::Tensor2;
using moekit::ToyTransformer;
using moekit::TransformerConfig;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig cfg;
  cfg.n_layers = 3;
  cfg.d_h = 16;
  cfg.d_i = 32;
  cfg.n_heads = 4;
  cfg.vocab = 50;
  cfg.seq_len = 24;
  return cfg;
}

TEST(RmsNorm, MatchesDoubleReference) {
  moekit::Rng rng(1);
  const Tensor2 x = moekit::randn(5, 8, 2.0, rng);
  Tensor2 w(1, 8);
  for (int j = 0; j < 8; ++j) w(0, j) = 0.5f + 0.1f * j;
  const Tensor2 y = moekit::rms_norm(x, w);
  for (int i = 0; i < 5; ++i) {
    double ms = 0.0;
    for (int j = 0; j < 8; ++j) ms += static_cast<double>(x(i, j)) * x(i, j);
    const double inv = 1.0 / std::sqrt(ms / 8 + 1e-5);
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(y(i, j), x(i, j) * inv * w(0, j), 1e-6);
  }
}

TEST(RmsNorm, HandlesZeroRowsViaEpsilon) {
  const Tensor2 x(3, 8);
  Tensor2 w(1, 8);
  for (int j = 0; j < 8; ++j) w(0, j) = 1.0f;
  const Tensor2 y = moekit::rms_norm(x, w);
  for (size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y.data[i], 0.0f);
}

TEST(Rope, PositionZeroIsIdentity) {
  moekit::Rng rng(2);
  Tensor2 qk = moekit::randn(4, 16, 1.0, rng);
  const Tensor2 before = qk;
  moekit::detail::apply_rope(qk, 4);
  for (int j = 0; j < 16; ++j) EXPECT_EQ(qk(0, j), before(0, j));
}

TEST(Rope, RotationPreservesPairNorms) {
  moekit::Rng rng(3);
  Tensor2 qk = moekit::randn(6, 16, 1.0, rng);
  const Tensor2 before = qk;
  moekit::detail::apply_rope(qk, 2);
  const int head_dim = 8;
  for (int t = 0; t < 6; ++t) {
    for (int h = 0; h < 2; ++h) {
      for (int i = 0; i < head_dim / 2; ++i) {
        const int a = h * head_dim + 2 * i, b = a + 1;
        const double n0 = double(before(t, a)) * before(t, a) + double(before(t, b)) * before(t, b);
        const double n1 = double(qk(t, a)) * qk(t, a) + double(qk(t, b)) * qk(t, b);
        EXPECT_NEAR(n0, n1, 1e-5);
      }
    }
  }
}

TEST(Transformer, ForwardShapeAndDeterminism) {
  const ToyTransformer model = moekit::random_transformer(tiny_config(), 7);
  const std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  const Tensor2 a = moekit::transformer_forward(model, tokens);
  const Tensor2 b = moekit::transformer_forward(model, tokens);
  EXPECT_EQ(a.rows, 8);
  EXPECT_EQ(a.cols, 50);
  EXPECT_EQ(moekit::max_abs_diff(a, b), 0.0);
}

TEST(Transformer, CausalMaskMakesPrefixesAgree) {
  // Row t of the logits may only depend on tokens 0..t, so running a prefix
  // must reproduce the first rows of the full sequence bit for bit.
  const ToyTransformer model = moekit::random_transformer(tiny_config(), 8);
  const std::vector<int> tokens = {10, 20, 30, 40, 11, 21, 31, 41, 12, 22};
  const Tensor2 full = moekit::transformer_forward(model, tokens);
  for (int prefix : {1, 4, 7}) {
    const std::vector<int> head(tokens.begin(), tokens.begin() + prefix);
    const Tensor2 part = moekit::transformer_forward(model, head);
    ASSERT_EQ(part.rows, prefix);
    for (int t = 0; t < prefix; ++t) {
      for (int j = 0; j < part.cols; ++j) EXPECT_EQ(part(t, j), full(t, j));
    }
  }
}

TEST(Transformer, RejectsBadTokenSequences) {
  const ToyTransformer model = moekit::random_transformer(tiny_config(), 9);
  EXPECT_THROW(moekit::transformer_forward(model, std::vector<int>{}), std::invalid_argument);
  EXPECT_THROW(moekit::transformer_forward(model, std::vector<int>{1, 50}), std::invalid_argument);
  EXPECT_THROW(moekit::transformer_forward(model, std::vector<int>{1, -1}), std::invalid_argument);
  const std::vector<int> too_long(25, 1);
  EXPECT_THROW(moekit::transformer_forward(model, too_long), std::invalid_argument);
}

TEST(Transformer, HooksSeeEveryLayerWithMatchingShapes) {
  const ToyTransformer model = moekit::random_transformer(tiny_config(), 10);
  const std::vector<int> tokens = {1, 2, 3, 4, 5};
  std::vector<int> in_layers, out_layers;
  moekit::ForwardHooks hooks;
  hooks.on_ffn_input = [&](int layer, const Tensor2& x) {
    in_layers.push_back(layer);
    EXPECT_EQ(x.rows, 5);
    EXPECT_EQ(x.cols, 16);
  };
  hooks.on_ffn_output = [&](int layer, const Tensor2& y) {
    out_layers.push_back(layer);
    EXPECT_EQ(y.rows, 5);
    EXPECT_EQ(y.cols, 16);
  };
  moekit::transformer_forward(model, tokens, &hooks);
  EXPECT_EQ(in_layers, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(out_layers, (std::vector<int>{0, 1, 2}));
}

TEST(Transformer, FfnHookInputReproducesFfnOutput) {
  // on_ffn_output must be the FFN applied to exactly what on_ffn_input saw.
  const ToyTransformer model = moekit::random_transformer(tiny_config(), 11);
  const std::vector<int> tokens = {7, 8, 9, 10, 11, 12};
  std::vector<Tensor2> inputs(3, Tensor2(0, 0)), outputs(3, Tensor2(0, 0));
  moekit::ForwardHooks hooks;
  hooks.on_ffn_input = [&](int layer, const Tensor2& x) { inputs[layer] = x; };
  hooks.on_ffn_output = [&](int layer, const Tensor2& y) { outputs[layer] = y; };
  moekit::transformer_forward(model, tokens, &hooks);
  for (int l = 0; l < 3; ++l) {
    const auto& ffn = std::get<moekit::DenseFfn>(model.layers[l].ffn);
    const Tensor2 replay = moekit::ffn_forward(ffn, inputs[l]);
    EXPECT_EQ(moekit::max_abs_diff(replay, outputs[l]), 0.0) << "layer " << l;
  }
}

TEST(Transformer, MoeStatsHookFiresOnlyForMixtureLayers) {
  ToyTransformer model = moekit::random_transformer(tiny_config(), 12);
  moekit::Rng rng(13);
  const auto& dense = std::get<moekit::DenseFfn>(model.layers[1].ffn);
  model.layers[1].ffn = moekit::moefy_ffn(dense, 4, rng);
  EXPECT_EQ(model.moe_layer_indices(), (std::vector<int>{1}));

  const std::vector<int> tokens = {1, 2, 3, 4};
  std::vector<int> stat_layers;
  moekit::ForwardHooks hooks;
  hooks.on_moe_stats = [&](int layer, const moekit::MoeForwardStats& stats) {
    stat_layers.push_back(layer);
    EXPECT_EQ(stats.max_weight.size(), 4u);
    EXPECT_EQ(stats.k_used.size(), 4u);
    for (int k : stats.k_used) EXPECT_EQ(k, 2);  // default static policy
  };
  moekit::transformer_forward(model, tokens, &hooks);
  EXPECT_EQ(stat_layers, (std::vector<int>{1}));
}

TEST(Transformer, ConfigValidationRejectsBadShapes) {
  TransformerConfig cfg = tiny_config();
  cfg.n_heads = 5;  // d_h = 16 not divisible
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.d_h = 17;  // odd head_dim breaks the rotary pairing
  cfg.n_heads = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.n_layers = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
