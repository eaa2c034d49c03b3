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
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moekit/io.hpp"
#include "moekit/transformer.hpp"

namespace moekit {

// A corpus is a UTF-8 text file, one sequence per line, each line a
// space-separated list of integer token ids. Blank lines are skipped.
inline std::vector<std::vector<int>> load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open corpus: " + path);
  std::vector<std::vector<int>> sequences;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<int> ids;
    long long id = 0;
    while (ls >> id) {
      if (id < 0) {
        throw std::runtime_error("corpus line " + std::to_string(line_no) + ": negative token id");
      }
      ids.push_back(static_cast<int>(id));
    }
    if (!ls.eof()) {
      throw std::runtime_error("corpus line " + std::to_string(line_no) + ": not a token id list");
    }
    if (!ids.empty()) sequences.push_back(std::move(ids));
  }
  if (sequences.empty()) throw std::runtime_error("corpus is empty: " + path);
  return sequences;
}

// Captured FFN inputs for one layer: the post-norm hidden states that feed
// that layer's FFN, one row per token, in corpus order. These are the
// regression inputs for distilling the layer; teacher outputs are recomputed
// at train time rather than stored.
struct HiddenStateDataset {
  int layer_index = 0;
  std::string corpus_id;
  Tensor2 rows;  // [n_rows, d_h]
};

constexpr uint32_t kHiddenStateVersion = 1;

// Hidden-state file, magic "LDHS" version 1:
//   magic[4] | u32 version | u32 layer_index | u32 d_h | u64 row_count |
//   string corpus_id | row_count * d_h f32
inline void save_hidden_states(const std::string& path, const HiddenStateDataset& ds) {
  auto os = io::open_out(path);
  os.write("LDHS", 4);
  io::write_u32(os, kHiddenStateVersion);
  io::write_u32(os, static_cast<uint32_t>(ds.layer_index));
  io::write_u32(os, static_cast<uint32_t>(ds.rows.cols));
  io::write_u64(os, static_cast<uint64_t>(ds.rows.rows));
  io::write_string(os, ds.corpus_id);
  for (float v : ds.rows.data) io::write_f32(os, v);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline HiddenStateDataset load_hidden_states(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "LDHS", "hidden-state file");
  const uint32_t version = io::read_u32(is);
  if (version != kHiddenStateVersion) throw std::runtime_error("unsupported hidden-state file version");
  HiddenStateDataset ds;
  ds.layer_index = static_cast<int>(io::read_u32(is));
  const uint32_t d_h = io::read_u32(is);
  const uint64_t n_rows = io::read_u64(is);
  if (d_h == 0 || d_h > (1u << 24)) throw std::runtime_error("corrupt file: bad hidden width");
  if (n_rows > (1ull << 32)) throw std::runtime_error("corrupt file: unreasonable row count");
  ds.corpus_id = io::read_string(is);
  ds.rows = Tensor2::zeros(static_cast<int>(n_rows), static_cast<int>(d_h));
  for (float& v : ds.rows.data) v = io::read_f32(is);
  return ds;
}

// Runs the frozen model over the corpus and records, for each requested
// layer, the post-norm FFN input rows. Rows appear in corpus order
// (sequence by sequence, token by token). `max_rows` == 0 means unlimited;
// otherwise capture stops exactly at the cap, mid-sequence if necessary.
inline std::map<int, HiddenStateDataset> capture_ffn_inputs(const ToyTransformer& model,
                                                            const std::vector<std::vector<int>>& corpus,
                                                            const std::vector<int>& layer_indices,
                                                            uint64_t max_rows,
                                                            const std::string& corpus_id) {
  if (layer_indices.empty()) throw std::invalid_argument("no layers requested for capture");
  for (int l : layer_indices) {
    if (l < 0 || l >= model.config.n_layers) {
      throw std::invalid_argument("capture layer out of range: " + std::to_string(l));
    }
  }

  std::map<int, std::vector<float>> collected;
  std::map<int, uint64_t> counts;
  for (int l : layer_indices) {
    collected[l] = {};
    counts[l] = 0;
  }

  const int d_h = model.config.d_h;
  ForwardHooks hooks;
  hooks.on_ffn_input = [&](int layer, const Tensor2& x) {
    auto it = collected.find(layer);
    if (it == collected.end()) return;
    uint64_t& n = counts[layer];
    for (int r = 0; r < x.rows; ++r) {
      if (max_rows != 0 && n >= max_rows) break;
      const float* row = x.data.data() + static_cast<size_t>(r) * d_h;
      it->second.insert(it->second.end(), row, row + d_h);
      ++n;
    }
  };

  for (const auto& seq : corpus) {
    bool all_full = max_rows != 0;
    for (int l : layer_indices) all_full = all_full && counts[l] >= max_rows;
    if (all_full) break;
    transformer_forward(model, seq, &hooks);
  }

  std::map<int, HiddenStateDataset> out;
  for (int l : layer_indices) {
    HiddenStateDataset ds;
    ds.layer_index = l;
    ds.corpus_id = corpus_id;
    ds.rows.rows = static_cast<int>(counts[l]);
    ds.rows.cols = d_h;
    ds.rows.data = std::move(collected[l]);
    out.emplace(l, std::move(ds));
  }
  return out;
}

}  // namespace moekit
