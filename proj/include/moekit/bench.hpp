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
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include "moekit/accounting.hpp"
#include "moekit/capture.hpp"
#include "moekit/checkpoint.hpp"
#include "moekit/moe.hpp"
#include "moekit/transformer.hpp"

namespace moekit {

/// Which layers to convert when assembling a partially-converted model.
struct AssemblySpec {
  std::vector<int> layers;

  void validate(int n_layers) const {
    std::vector<int> sorted = layers;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] < 0 || sorted[i] >= n_layers) {
        throw std::invalid_argument("AssemblySpec: layer index out of range: " + std::to_string(sorted[i]));
      }
      if (i > 0 && sorted[i] == sorted[i - 1]) {
        throw std::invalid_argument("AssemblySpec: duplicate layer index: " + std::to_string(sorted[i]));
      }
    }
  }
};

/// Replaces the listed layers' FFNs with their trained blocks; every other
/// tensor is copied through untouched.
inline ToyTransformer assemble_model(const ToyTransformer& dense, const std::map<int, MoeBlock>& blocks,
                                     const AssemblySpec& spec) {
  spec.validate(dense.config.n_layers);
  ToyTransformer out = dense;
  for (int l : spec.layers) {
    auto it = blocks.find(l);
    if (it == blocks.end()) {
      throw std::invalid_argument("assemble_model: no trained block for layer " + std::to_string(l));
    }
    const MoeBlock& b = it->second;
    b.validate();
    if (b.d_h() != dense.config.d_h) {
      throw std::invalid_argument("assemble_model: block width mismatch at layer " + std::to_string(l));
    }
    if (b.n_experts() * b.d_i_prime() != dense.config.d_i) {
      throw std::invalid_argument("assemble_model: block expert sizes do not cover d_i at layer " +
                                  std::to_string(l));
    }
    out.layers[l].ffn = b;
  }
  return out;
}

/// Loads every trained-block checkpoint in a directory, keyed by the layer
/// index embedded in each file. Files without the checkpoint magic are
/// ignored; duplicate layers are an error.
inline std::map<int, MoeBlock> load_blocks_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::map<int, MoeBlock> out;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& path : paths) {
    {
      std::ifstream probe(path, std::ios::binary);
      char magic[4] = {};
      if (!probe.read(magic, 4) || std::string(magic, 4) != "LDMO") continue;
    }
    auto [block, layer] = load_block(path.string());
    if (!out.emplace(layer, std::move(block)).second) {
      throw std::runtime_error("two block files claim layer " + std::to_string(layer) + " in " + dir);
    }
  }
  return out;
}

struct BenchReport {
  double tokens_per_sec = 0.0;            // median over timed runs
  std::map<int, double> layer_mse;        // converted layer -> mean output MSE vs its dense FFN
  double sum_layer_mse = 0.0;
  double perplexity = 0.0;
  double dense_perplexity = 0.0;
  double perplexity_ratio = 1.0;          // perplexity / dense_perplexity
  double mean_activated_experts = 0.0;    // 0 when no mixture layers
  ParamFlopReport pf;
};

namespace detail {

/// Next-token cross-entropy perplexity over the corpus: row t predicts token
/// t+1. Needs at least one sequence of length >= 2.
inline double corpus_perplexity(const ToyTransformer& model, const std::vector<std::vector<int>>& corpus) {
  double nll = 0.0;
  int64_t predicted = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    const Tensor2 logits = transformer_forward(model, seq);
    for (size_t t = 0; t + 1 < seq.size(); ++t) {
      double mx = logits(static_cast<int>(t), 0);
      for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, static_cast<double>(logits(static_cast<int>(t), j)));
      double sum = 0.0;
      for (int j = 0; j < logits.cols; ++j) sum += std::exp(logits(static_cast<int>(t), j) - mx);
      const double logp = (logits(static_cast<int>(t), seq[t + 1]) - mx) - std::log(sum);
      nll -= logp;
      ++predicted;
    }
  }
  if (predicted == 0) throw std::invalid_argument("perplexity: corpus has no next-token positions");
  return std::exp(nll / static_cast<double>(predicted));
}

/// Analytic counts for a possibly-mixed model. Dynamic or mixed static
/// policies are summarized with the default k=2 in the closed form; the
/// measured mean_activated_experts carries the empirical value.
inline ParamFlopReport analytic_report(const ToyTransformer& model) {
  const std::vector<int> moe = model.moe_layer_indices();
  if (moe.empty()) return count_params_flops(model.config, 0, 1, 1);
  int n_experts = -1;
  int uniform_k = -1;
  bool uniform = true;
  for (int l : moe) {
    const MoeBlock& b = std::get<MoeBlock>(model.layers[l].ffn);
    if (n_experts == -1) n_experts = b.n_experts();
    if (b.n_experts() != n_experts) {
      throw std::invalid_argument("analytic_report: mixture layers disagree on expert count");
    }
    if (const auto* s = std::get_if<StaticPolicy>(&b.policy)) {
      if (uniform_k == -1) uniform_k = s->k;
      uniform = uniform && s->k == uniform_k;
    } else {
      uniform = false;
    }
  }
  const int k = uniform ? uniform_k : 2;
  return count_params_flops(model.config, static_cast<int>(moe.size()), n_experts, k);
}

}  // namespace detail

/// Measures one model against its dense reference on a shared corpus:
/// wall-clock tokens/sec (median of `timed_runs` after one warm-up pass),
/// per-converted-layer output MSE against the dense FFN on the states the
/// converted model itself produces, corpus perplexity against the dense
/// model's, and the closed-form parameter/FLOP report.
inline BenchReport bench_model(const ToyTransformer& model, const ToyTransformer& dense,
                               const std::vector<std::vector<int>>& corpus, int timed_runs = 3) {
  if (corpus.empty()) throw std::invalid_argument("bench_model: empty corpus");
  if (timed_runs < 3) throw std::invalid_argument("bench_model: need at least three timed runs");
  if (model.config.n_layers != dense.config.n_layers || model.config.d_h != dense.config.d_h) {
    throw std::invalid_argument("bench_model: model and dense reference disagree on shape");
  }

  BenchReport r;

  // Fidelity: per converted layer, feed that layer's own post-norm inputs to
  // the dense FFN it replaced and compare outputs.
  const std::vector<int> moe = model.moe_layer_indices();
  std::map<int, double> sq_sum;
  std::map<int, int64_t> el_count;
  std::map<int, double> k_sum;
  std::map<int, int64_t> k_count;
  for (int l : moe) {
    if (dense.layers[l].is_moe()) {
      throw std::invalid_argument("bench_model: dense reference already converted at layer " +
                                  std::to_string(l));
    }
    sq_sum[l] = 0.0;
    el_count[l] = 0;
    k_sum[l] = 0.0;
    k_count[l] = 0;
  }
  ForwardHooks hooks;
  std::map<int, Tensor2> pending_input;
  hooks.on_ffn_input = [&](int layer, const Tensor2& x) {
    if (sq_sum.count(layer)) pending_input[layer] = x;
  };
  hooks.on_ffn_output = [&](int layer, const Tensor2& y) {
    auto it = pending_input.find(layer);
    if (it == pending_input.end()) return;
    const Tensor2 teacher = ffn_forward(std::get<DenseFfn>(dense.layers[layer].ffn), it->second);
    for (size_t i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y.data[i]) - teacher.data[i];
      sq_sum[layer] += d * d;
    }
    el_count[layer] += static_cast<int64_t>(y.size());
    pending_input.erase(it);
  };
  hooks.on_moe_stats = [&](int layer, const MoeForwardStats& stats) {
    for (int k : stats.k_used) k_sum[layer] += k;
    k_count[layer] += static_cast<int64_t>(stats.k_used.size());
  };
  for (const auto& seq : corpus) transformer_forward(model, seq, &hooks);

  for (int l : moe) {
    const double layer_mse = el_count[l] == 0 ? 0.0 : sq_sum[l] / static_cast<double>(el_count[l]);
    r.layer_mse[l] = layer_mse;
    r.sum_layer_mse += layer_mse;
  }
  double total_k = 0.0;
  int64_t total_tokens_routed = 0;
  for (int l : moe) {
    total_k += k_sum[l];
    total_tokens_routed += k_count[l];
  }
  r.mean_activated_experts = total_tokens_routed == 0 ? 0.0 : total_k / static_cast<double>(total_tokens_routed);

  r.perplexity = detail::corpus_perplexity(model, corpus);
  r.dense_perplexity = detail::corpus_perplexity(dense, corpus);
  r.perplexity_ratio = r.perplexity / r.dense_perplexity;

  r.pf = detail::analytic_report(model);

  int64_t corpus_tokens = 0;
  for (const auto& seq : corpus) corpus_tokens += static_cast<int64_t>(seq.size());
  std::vector<double> rates;
  for (int run = 0; run < timed_runs + 1; ++run) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& seq : corpus) transformer_forward(model, seq);
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    if (run == 0) continue;  // warm-up
    rates.push_back(static_cast<double>(corpus_tokens) / std::max(secs, 1e-9));
  }
  std::sort(rates.begin(), rates.end());
  r.tokens_per_sec = rates[rates.size() / 2];
  return r;
}

struct SweepRow {
  int m = 0;  // number of highest-index layers converted
  BenchReport report;
};

/// Assembles and benches one model per m value, converting the m
/// highest-index layers each time.
inline std::vector<SweepRow> sweep_models(const ToyTransformer& dense, const std::map<int, MoeBlock>& blocks,
                                          const std::vector<int>& m_values,
                                          const std::vector<std::vector<int>>& corpus, int timed_runs = 3) {
  std::vector<SweepRow> out;
  for (int m : m_values) {
    if (m < 0 || m > dense.config.n_layers) {
      throw std::invalid_argument("sweep_models: m out of range: " + std::to_string(m));
    }
    AssemblySpec spec;
    for (int l = dense.config.n_layers - m; l < dense.config.n_layers; ++l) spec.layers.push_back(l);
    const ToyTransformer model = assemble_model(dense, blocks, spec);
    out.push_back({m, bench_model(model, dense, corpus, timed_runs)});
  }
  return out;
}

inline void write_bench_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "m,tokens_per_sec,perplexity,perplexity_ratio,sum_layer_mse,mean_activated_experts,"
        "total_params,activated_params,ffn_flops_per_token_dense,ffn_flops_per_token_moe,reduction_ratio\n";
  os << std::setprecision(12);
  for (const SweepRow& row : rows) {
    const BenchReport& r = row.report;
    os << row.m << "," << r.tokens_per_sec << "," << r.perplexity << "," << r.perplexity_ratio << ","
       << r.sum_layer_mse << "," << r.mean_activated_experts << "," << r.pf.total_params << ","
       << r.pf.activated_params << "," << r.pf.ffn_flops_per_token_dense << ","
       << r.pf.ffn_flops_per_token_moe << "," << r.pf.reduction_ratio << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace moekit
