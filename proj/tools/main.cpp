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

// Command-line surface for the conversion pipeline:
//   init-model / make-corpus  -> synthetic starting points
//   capture -> train -> assemble -> profile -> decide-policy -> bench / sweep

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <moekit/moekit.hpp>

namespace {

// "0,2,5" and "1..4" (inclusive) and mixtures of both.
std::vector<int> parse_index_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    if (piece.empty()) continue;
    const size_t dots = piece.find("..");
    try {
      if (dots == std::string::npos) {
        out.push_back(std::stoi(piece));
      } else {
        const int lo = std::stoi(piece.substr(0, dots));
        const int hi = std::stoi(piece.substr(dots + 2));
        if (hi < lo) throw std::invalid_argument("descending range");
        for (int v = lo; v <= hi; ++v) out.push_back(v);
      }
    } catch (const std::exception&) {
      throw std::runtime_error("cannot parse index list entry: '" + piece + "'");
    }
  }
  if (out.empty()) throw std::runtime_error("empty index list: '" + text + "'");
  return out;
}

// states.ldhs -> states.l3.ldhs (used when one capture run writes several layers)
std::string with_layer_suffix(const std::string& path, int layer) {
  const std::filesystem::path p(path);
  std::filesystem::path out = p.parent_path() / p.stem();
  out += ".l" + std::to_string(layer);
  out += p.extension();
  return out.string();
}

int run(int argc, char** argv) {
  CLI::App app{"Convert dense FFN layers into sparse expert mixtures and measure the trade-off"};
  app.require_subcommand(1);

  // ---- init-model ----------------------------------------------------------
  auto* init_cmd = app.add_subcommand("init-model", "Create a random dense model checkpoint");
  struct {
    int n_layers = 4, d_h = 64, d_i = 256, n_heads = 4, vocab = 256, seq_len = 128;
    uint64_t seed = 1;
    std::string out;
  } init_opts;
  init_cmd->add_option("--layers", init_opts.n_layers, "Transformer layer count");
  init_cmd->add_option("--dh", init_opts.d_h, "Hidden width");
  init_cmd->add_option("--di", init_opts.d_i, "FFN intermediate width");
  init_cmd->add_option("--heads", init_opts.n_heads, "Attention heads");
  init_cmd->add_option("--vocab", init_opts.vocab, "Vocabulary size");
  init_cmd->add_option("--seq-len", init_opts.seq_len, "Maximum sequence length");
  init_cmd->add_option("--seed", init_opts.seed, "RNG seed");
  init_cmd->add_option("--out", init_opts.out, "Output checkpoint path")->required();
  init_cmd->callback([&] {
    moekit::TransformerConfig cfg{init_opts.n_layers, init_opts.d_h,   init_opts.d_i,
                                  init_opts.n_heads,  init_opts.vocab, init_opts.seq_len};
    moekit::save_model(init_opts.out, moekit::random_transformer(cfg, init_opts.seed));
    std::cout << "wrote dense model (" << cfg.n_layers << " layers, d_h=" << cfg.d_h << ", d_i=" << cfg.d_i
              << ") to " << init_opts.out << "\n";
  });

  // ---- make-corpus ---------------------------------------------------------
  auto* corpus_cmd = app.add_subcommand("make-corpus", "Create a random token-id corpus file");
  struct {
    int vocab = 256, sequences = 64, length = 64;
    uint64_t seed = 1;
    std::string out;
  } corpus_opts;
  corpus_cmd->add_option("--vocab", corpus_opts.vocab, "Vocabulary size (ids are drawn below this)");
  corpus_cmd->add_option("--sequences", corpus_opts.sequences, "Number of lines");
  corpus_cmd->add_option("--length", corpus_opts.length, "Tokens per line");
  corpus_cmd->add_option("--seed", corpus_opts.seed, "RNG seed");
  corpus_cmd->add_option("--out", corpus_opts.out, "Output corpus path")->required();
  corpus_cmd->callback([&] {
    if (corpus_opts.vocab < 1 || corpus_opts.sequences < 1 || corpus_opts.length < 1) {
      throw std::runtime_error("make-corpus: all sizes must be positive");
    }
    moekit::Rng rng(corpus_opts.seed);
    std::ofstream os(corpus_opts.out);
    if (!os) throw std::runtime_error("cannot open for writing: " + corpus_opts.out);
    for (int s = 0; s < corpus_opts.sequences; ++s) {
      for (int t = 0; t < corpus_opts.length; ++t) {
        os << rng.uniform_int(corpus_opts.vocab) << (t + 1 == corpus_opts.length ? "" : " ");
      }
      os << "\n";
    }
    if (!os) throw std::runtime_error("write failed: " + corpus_opts.out);
    std::cout << "wrote " << corpus_opts.sequences << " x " << corpus_opts.length << " token corpus to "
              << corpus_opts.out << "\n";
  });

  // ---- capture -------------------------------------------------------------
  auto* capture_cmd = app.add_subcommand("capture", "Record per-layer FFN-input hidden states over a corpus");
  struct {
    std::string model, corpus, layers, out;
    uint64_t max_rows = 100000;
  } cap_opts;
  capture_cmd->add_option("--model", cap_opts.model, "Model checkpoint")->required();
  capture_cmd->add_option("--corpus", cap_opts.corpus, "Token-id corpus file")->required();
  capture_cmd->add_option("--layers", cap_opts.layers, "Layer indices, e.g. 0,2 or 1..3")->required();
  capture_cmd->add_option("--max-rows", cap_opts.max_rows, "Row cap per layer (default 100000)");
  capture_cmd
      ->add_option("--out", cap_opts.out,
                   "Output dataset path; with several layers, '.l<i>' is inserted before the extension")
      ->required();
  capture_cmd->callback([&] {
    if (cap_opts.max_rows < 1) throw std::runtime_error("capture: --max-rows must be >= 1");
    const moekit::ToyTransformer model = moekit::load_model(cap_opts.model);
    const auto corpus = moekit::load_corpus(cap_opts.corpus);
    const std::vector<int> layers = parse_index_list(cap_opts.layers);
    auto datasets = moekit::capture_ffn_inputs(model, corpus, layers, cap_opts.max_rows, cap_opts.corpus);
    for (const auto& [layer, ds] : datasets) {
      const std::string path = layers.size() == 1 ? cap_opts.out : with_layer_suffix(cap_opts.out, layer);
      moekit::save_hidden_states(path, ds);
      std::cout << "layer " << layer << ": " << ds.rows.rows << " rows -> " << path << "\n";
    }
  });

  // ---- train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Distill one FFN layer into a mixture block");
  struct {
    std::string teacher, data, out, report;
    int layer = -1;
    moekit::TrainConfig cfg;
    std::string loss_mode = "fixed";
    std::string init = "split";
  } train_opts;
  train_opts.cfg.steps = 1000;
  train_cmd->add_option("--teacher", train_opts.teacher, "Dense model checkpoint holding the teacher FFN")
      ->required();
  train_cmd->add_option("--layer", train_opts.layer, "Layer whose FFN is distilled")->required();
  train_cmd->add_option("--data", train_opts.data, "Captured hidden-state dataset for that layer")->required();
  train_cmd->add_option("--experts", train_opts.cfg.n_experts, "Expert count N");
  train_cmd->add_option("--k", train_opts.cfg.k_train, "Experts per token during training");
  train_cmd->add_option("--alpha", train_opts.cfg.alpha_aux, "Load-balancing coefficient");
  train_cmd->add_option("--steps", train_opts.cfg.steps, "Optimizer steps");
  train_cmd->add_option("--batch", train_opts.cfg.batch_size, "Batch size");
  train_cmd->add_option("--lr", train_opts.cfg.learning_rate, "Learning rate");
  train_cmd->add_option("--seed", train_opts.cfg.seed, "Run seed (init and batch order)");
  train_cmd->add_option("--loss-mode", train_opts.loss_mode, "fixed | adaptive")
      ->check(CLI::IsMember({"fixed", "adaptive"}));
  train_cmd->add_option("--init", train_opts.init, "split | random expert initialization")
      ->check(CLI::IsMember({"split", "random"}));
  train_cmd->add_option("--out", train_opts.out, "Output block checkpoint")->required();
  train_cmd->add_option("--report", train_opts.report, "Optional per-step CSV report path");
  train_cmd->callback([&] {
    train_opts.cfg.loss_mode =
        train_opts.loss_mode == "fixed" ? moekit::LossMode::kFixed : moekit::LossMode::kAdaptive;
    const moekit::ToyTransformer model = moekit::load_model(train_opts.teacher);
    if (train_opts.layer < 0 || train_opts.layer >= model.config.n_layers) {
      throw std::runtime_error("train: --layer out of range");
    }
    const auto* teacher = std::get_if<moekit::DenseFfn>(&model.layers[train_opts.layer].ffn);
    if (!teacher) throw std::runtime_error("train: requested layer is already a mixture");
    const moekit::HiddenStateDataset ds = moekit::load_hidden_states(train_opts.data);
    if (ds.layer_index != train_opts.layer) {
      throw std::runtime_error("train: dataset was captured from layer " + std::to_string(ds.layer_index));
    }
    moekit::Rng init_rng(train_opts.cfg.seed);
    const moekit::InitMode mode =
        train_opts.init == "split" ? moekit::InitMode::kSplit : moekit::InitMode::kRandom;
    moekit::MoeBlock block = moekit::init_block(*teacher, train_opts.cfg.n_experts, mode, init_rng);
    moekit::TrainResult result = moekit::train_moe_block(*teacher, std::move(block), ds.rows, train_opts.cfg);
    moekit::save_block(train_opts.out, result.block, train_opts.layer);
    if (!train_opts.report.empty()) moekit::write_train_report_csv(train_opts.report, result.report);
    std::cout << "layer " << train_opts.layer << ": " << train_opts.cfg.steps
              << " steps, final loss " << result.report.final_loss << " -> " << train_opts.out << "\n";
  });

  // ---- assemble ------------------------------------------------------------
  auto* assemble_cmd = app.add_subcommand("assemble", "Swap trained blocks into a dense checkpoint");
  struct {
    std::string dense, blocks_dir, layers, out;
  } asm_opts;
  assemble_cmd->add_option("--dense", asm_opts.dense, "Dense model checkpoint")->required();
  assemble_cmd->add_option("--blocks-dir", asm_opts.blocks_dir, "Directory of trained block checkpoints")
      ->required();
  assemble_cmd->add_option("--layers", asm_opts.layers, "Layers to convert, e.g. 2,3 or 1..3")->required();
  assemble_cmd->add_option("--out", asm_opts.out, "Output checkpoint")->required();
  assemble_cmd->callback([&] {
    const moekit::ToyTransformer dense = moekit::load_model(asm_opts.dense);
    const auto blocks = moekit::load_blocks_dir(asm_opts.blocks_dir);
    moekit::AssemblySpec spec;
    spec.layers = parse_index_list(asm_opts.layers);
    moekit::save_model(asm_opts.out, moekit::assemble_model(dense, blocks, spec));
    std::cout << "converted " << spec.layers.size() << " layer(s) -> " << asm_opts.out << "\n";
  });

  // ---- profile -------------------------------------------------------------
  auto* profile_cmd = app.add_subcommand("profile", "Record maximal routing weights per mixture layer");
  struct {
    std::string model, corpus, out;
  } prof_opts;
  profile_cmd->add_option("--model", prof_opts.model, "Converted model checkpoint")->required();
  profile_cmd->add_option("--corpus", prof_opts.corpus, "Token-id corpus file")->required();
  profile_cmd->add_option("--out", prof_opts.out, "Output profile path")->required();
  profile_cmd->callback([&] {
    const moekit::ToyTransformer model = moekit::load_model(prof_opts.model);
    const auto corpus = moekit::load_corpus(prof_opts.corpus);
    const moekit::RoutingProfile p = moekit::profile_routing(model, corpus, prof_opts.corpus);
    moekit::save_profile(prof_opts.out, p);
    size_t total = 0;
    for (const auto& [layer, vals] : p.samples) total += vals.size();
    std::cout << "profiled " << p.samples.size() << " layer(s), " << total << " samples -> " << prof_opts.out
              << "\n";
  });

  // ---- decide-policy -------------------------------------------------------
  auto* decide_cmd = app.add_subcommand("decide-policy", "Derive per-layer top-k policies from a profile");
  struct {
    std::string profile, out;
    double pu = 0.25, pe = 0.25;
  } dec_opts;
  decide_cmd->add_option("--profile", dec_opts.profile, "Routing profile file")->required();
  decide_cmd->add_option("--pu", dec_opts.pu, "Upper tail mass (default 0.25)");
  decide_cmd->add_option("--pe", dec_opts.pe, "Lower tail mass (default 0.25)");
  decide_cmd->add_option("--out", dec_opts.out, "Output policy JSON path")->required();
  decide_cmd->callback([&] {
    const moekit::RoutingProfile p = moekit::load_profile(dec_opts.profile);
    const moekit::PolicyDecision d = moekit::decide_policies(p, dec_opts.pu, dec_opts.pe);
    if (d.degenerate) {
      std::cerr << "warning: routing-weight distribution has no spread; every layer falls back to static k=2\n";
    }
    moekit::save_policy_json(dec_opts.out, d);
    for (const auto& [layer, policy] : d.policies) {
      std::cout << "layer " << layer << ": ";
      if (const auto* s = std::get_if<moekit::StaticPolicy>(&policy)) {
        std::cout << "static k=" << s->k << "\n";
      } else {
        const auto& dy = std::get<moekit::DynamicPolicy>(policy);
        std::cout << "dynamic alpha_i=" << dy.alpha_i << " beta_i=" << dy.beta_i << "\n";
      }
    }
    std::cout << "alpha=" << d.thresholds.alpha << " beta=" << d.thresholds.beta << " -> " << dec_opts.out
              << "\n";
  });

  // ---- bench ---------------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "Measure throughput and fidelity against the dense reference");
  struct {
    std::string model, dense, corpus, policy, report;
  } bench_opts;
  bench_cmd->add_option("--model", bench_opts.model, "Model checkpoint to measure")->required();
  bench_cmd->add_option("--dense", bench_opts.dense, "Dense reference checkpoint")->required();
  bench_cmd->add_option("--corpus", bench_opts.corpus, "Token-id corpus file")->required();
  bench_cmd->add_option("--policy", bench_opts.policy, "Optional policy JSON applied before measuring");
  bench_cmd->add_option("--report", bench_opts.report, "Output CSV path")->required();
  bench_cmd->callback([&] {
    moekit::ToyTransformer model = moekit::load_model(bench_opts.model);
    const moekit::ToyTransformer dense = moekit::load_model(bench_opts.dense);
    if (!bench_opts.policy.empty()) {
      moekit::apply_policies(model, moekit::load_policy_json(bench_opts.policy));
    }
    const auto corpus = moekit::load_corpus(bench_opts.corpus);
    const moekit::BenchReport r = moekit::bench_model(model, dense, corpus);
    moekit::write_bench_csv(bench_opts.report,
                            {{static_cast<int>(model.moe_layer_indices().size()), r}});
    std::cout << "tokens/sec " << r.tokens_per_sec << ", perplexity ratio " << r.perplexity_ratio
              << ", sum layer MSE " << r.sum_layer_mse << ", mean activated experts "
              << r.mean_activated_experts << " -> " << bench_opts.report << "\n";
  });

  // ---- sweep ---------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "Bench a range of converted-layer counts");
  struct {
    std::string dense, blocks_dir, m, corpus, report;
  } sweep_opts;
  sweep_cmd->add_option("--dense", sweep_opts.dense, "Dense model checkpoint")->required();
  sweep_cmd->add_option("--blocks-dir", sweep_opts.blocks_dir, "Directory of trained block checkpoints")
      ->required();
  sweep_cmd->add_option("--m", sweep_opts.m, "Converted-layer counts, e.g. 0..4 (m highest layers)")
      ->required();
  sweep_cmd->add_option("--corpus", sweep_opts.corpus, "Token-id corpus file")->required();
  sweep_cmd->add_option("--report", sweep_opts.report, "Output CSV path")->required();
  sweep_cmd->callback([&] {
    const moekit::ToyTransformer dense = moekit::load_model(sweep_opts.dense);
    const auto blocks = moekit::load_blocks_dir(sweep_opts.blocks_dir);
    const auto corpus = moekit::load_corpus(sweep_opts.corpus);
    const std::vector<int> m_values = parse_index_list(sweep_opts.m);
    const auto rows = moekit::sweep_models(dense, blocks, m_values, corpus);
    moekit::write_bench_csv(sweep_opts.report, rows);
    std::cout << rows.size() << " bench row(s) -> " << sweep_opts.report << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
