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

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "moekit/autograd.hpp"
#include "moekit/ffn.hpp"
#include "moekit/moe.hpp"

namespace moekit {

enum class LossMode { kFixed, kAdaptive };
enum class InitMode { kSplit, kRandom };

struct TrainConfig {
  int n_experts = 4;
  int k_train = 2;
  int batch_size = 32;
  int steps = 0;
  double learning_rate = 1e-4;
  double alpha_aux = 0.0;
  LossMode loss_mode = LossMode::kFixed;
  uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (steps < 0) throw std::invalid_argument("TrainConfig: negative step count");
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (alpha_aux < 0.0) throw std::invalid_argument("TrainConfig: alpha_aux must be >= 0");
    if (n_experts < 2) throw std::invalid_argument("TrainConfig: need at least two experts");
    if (k_train < 1 || k_train > n_experts) throw std::invalid_argument("TrainConfig: k_train out of range");
  }
};

// Load-balancing penalty: sum over experts of f_i * P_i, where f_i is the
// fraction of dispatch slots the expert received this batch (denominator
// batch * k, so the f_i sum to 1 for any k) and P_i is its mean routing
// weight. Uniform routing gives 1/N; full collapse with k=1 approaches 1.
inline double aux_loss(const Tensor2& routing, const TopkResult& dispatch, int k) {
  if (routing.rows == 0) throw std::invalid_argument("aux_loss: empty batch");
  if (dispatch.rows != routing.rows || dispatch.k != k) {
    throw std::invalid_argument("aux_loss: dispatch does not match routing/k");
  }
  const int n = routing.cols;
  std::vector<int64_t> slots(n, 0);
  for (int idx : dispatch.indices) {
    if (idx < 0 || idx >= n) throw std::invalid_argument("aux_loss: dispatch index out of range");
    ++slots[idx];
  }
  double out = 0.0;
  const double denom = static_cast<double>(routing.rows) * k;
  for (int e = 0; e < n; ++e) {
    double p = 0.0;
    for (int t = 0; t < routing.rows; ++t) p += routing(t, e);
    p /= routing.rows;
    out += (static_cast<double>(slots[e]) / denom) * p;
  }
  return out;
}

// Combined objective. Fixed mode adds alpha * L_aux; adaptive mode scales the
// penalty by |L_mse| so it tracks the regression term's magnitude as training
// progresses:  L_tot = L_mse + alpha * |L_mse| * L_aux.
inline double combined_loss_value(double l_mse, double l_aux, double alpha, LossMode mode) {
  if (mode == LossMode::kFixed) return l_mse + alpha * l_aux;
  return l_mse + alpha * std::abs(l_mse) * l_aux;
}

/// Tape node ids for the trainable tensors of one block, registered in a
/// fixed order (router first, then each expert's up/gate/down).
struct BlockParamIds {
  int router = -1;
  struct ExpertIds {
    int up = -1, gate = -1, down = -1;
  };
  std::vector<ExpertIds> experts;
};

inline BlockParamIds register_block_params(GradTape& tape, const MoeBlock& block) {
  BlockParamIds ids;
  ids.router = tape.param(block.router.weight);
  for (const Expert& e : block.experts) {
    ids.experts.push_back({tape.param(e.w_up), tape.param(e.w_gate), tape.param(e.w_down)});
  }
  return ids;
}

/// Pointers to a block's trainable tensors in the same order as
/// register_block_params (for optimizer updates).
inline std::vector<Tensor2*> block_param_tensors(MoeBlock& block) {
  std::vector<Tensor2*> out;
  out.push_back(&block.router.weight);
  for (Expert& e : block.experts) {
    out.push_back(&e.w_up);
    out.push_back(&e.w_gate);
    out.push_back(&e.w_down);
  }
  return out;
}

struct TapedStepLosses {
  Scalar mse;
  Scalar aux;
  Scalar total;
  std::vector<int64_t> dispatch_counts;  // slots per expert this batch
};

/// Builds the differentiable student forward pass and combined loss on the
/// tape. Expert selection (top-k) and the dispatch fractions f_i are discrete
/// and enter as constants; gradients flow through the routing weights, the
/// renormalized mixture weights and the expert projections. The adaptive
/// coefficient alpha*|L_mse| is likewise a constant of the step.
inline TapedStepLosses taped_block_losses(GradTape& tape, const BlockParamIds& ids, const MoeBlock& block,
                                          const Tensor2& x, const Tensor2& target, int k, double alpha,
                                          LossMode mode) {
  if (x.rows == 0) throw std::invalid_argument("taped_block_losses: empty batch");
  const int n = block.n_experts();
  if (k < 1 || k > n) throw std::invalid_argument("taped_block_losses: k out of range");
  const int batch = x.rows;

  const int x_id = tape.input(x);
  const int target_id = tape.input(target);

  const int routing = tape.softmax_rows(tape.matmul(x_id, ids.router));
  const TopkResult picked = topk_rows(tape.value(routing), k);

  // Selected routing weights [batch, k], renormalized to sum 1 per token.
  std::vector<std::pair<int, int>> picked_rc;
  picked_rc.reserve(static_cast<size_t>(batch) * k);
  for (int t = 0; t < batch; ++t) {
    for (int s = 0; s < k; ++s) picked_rc.emplace_back(t, picked.index(t, s));
  }
  const int mix_weights = tape.normalize_rows(tape.gather_entries(routing, picked_rc, batch, k));

  // Per-expert dispatch lists: token row and the slot column it occupies in
  // the [batch, k] mixture-weight tensor.
  std::vector<std::vector<int>> expert_tokens(n);
  std::vector<std::vector<std::pair<int, int>>> expert_slots(n);
  for (int t = 0; t < batch; ++t) {
    for (int s = 0; s < k; ++s) {
      const int e = picked.index(t, s);
      expert_tokens[e].push_back(t);
      expert_slots[e].emplace_back(t, s);
    }
  }

  int y = -1;
  for (int e = 0; e < n; ++e) {
    if (expert_tokens[e].empty()) continue;
    const int m = static_cast<int>(expert_tokens[e].size());
    const int xe = tape.gather_rows(x_id, expert_tokens[e]);
    const int up = tape.matmul(xe, ids.experts[e].up);
    const int gate = tape.swish(tape.matmul(xe, ids.experts[e].gate));
    const int down = tape.matmul(tape.mul(up, gate), ids.experts[e].down);
    const int w = tape.gather_entries(mix_weights, expert_slots[e], m, 1);
    const int contrib = tape.scatter_rows(tape.row_scale(down, w), expert_tokens[e], batch);
    y = (y < 0) ? contrib : tape.add(y, contrib);
  }

  TapedStepLosses out;
  out.mse = tape.mse(y, target_id);

  out.dispatch_counts.assign(n, 0);
  for (int idx : picked.indices) ++out.dispatch_counts[idx];

  Tensor2 f(1, n);
  for (int e = 0; e < n; ++e) {
    f(0, e) = static_cast<float>(static_cast<double>(out.dispatch_counts[e]) / (static_cast<double>(batch) * k));
  }
  const int mean_probs = tape.matmul(tape.input(Tensor2::full(1, batch, 1.0f / batch)), routing);
  out.aux = tape.sum_all(tape.mul(tape.input(std::move(f)), mean_probs));

  const double coeff = (mode == LossMode::kFixed) ? alpha : alpha * std::abs(out.mse.value);
  out.total = tape.add_scalars(out.mse, tape.scale_scalar(out.aux, coeff));
  return out;
}

/// Adam with bias correction. Moment buffers are lazily sized to the first
/// step's parameter list, which must keep the same order afterwards.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Tensor2*>& params, const std::vector<const Tensor2*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("AdamOptimizer: param/grad count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p]->size(), 0.0f);
        v_[p].assign(params[p]->size(), 0.0f);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor2& w = *params[p];
      const Tensor2& g = *grads[p];
      if (!same_shape(w, g)) throw std::invalid_argument("AdamOptimizer: grad shape mismatch");
      for (size_t i = 0; i < w.size(); ++i) {
        const double gi = g.data[i];
        const double m = beta1_ * m_[p][i] + (1.0 - beta1_) * gi;
        const double v = beta2_ * v_[p][i] + (1.0 - beta2_) * gi * gi;
        m_[p][i] = static_cast<float>(m);
        v_[p][i] = static_cast<float>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        w.data[i] = static_cast<float>(w.data[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Student starting point: either the teacher's own slices (so the unweighted
/// expert sum reproduces the teacher exactly) or fresh random projections of
/// the same shape. The router is small-Gaussian either way.
inline MoeBlock init_block(const DenseFfn& teacher, int n_experts, InitMode mode, Rng& rng) {
  if (mode == InitMode::kSplit) return moefy_ffn(teacher, n_experts, rng);
  MoeBlock b;
  b.router = random_router(teacher.d_h(), n_experts, rng);
  if (teacher.d_i() % n_experts != 0) {
    throw std::invalid_argument("init_block: intermediate size not divisible by expert count");
  }
  const int dh = teacher.d_h();
  const int dp = teacher.d_i() / n_experts;
  const double up_std = 1.0 / std::sqrt(static_cast<double>(dh));
  const double down_std = 1.0 / std::sqrt(static_cast<double>(dp));
  for (int e = 0; e < n_experts; ++e) {
    Expert ex;
    ex.w_up = randn(dh, dp, up_std, rng);
    ex.w_gate = randn(dh, dp, up_std, rng);
    ex.w_down = randn(dp, dh, down_std, rng);
    ex.slice_begin = e * dp;
    ex.slice_end = (e + 1) * dp;
    b.experts.push_back(std::move(ex));
  }
  b.validate();
  return b;
}

struct TrainStepRow {
  int step = 0;  // 1-based
  double l_mse = 0.0;
  double l_aux = 0.0;
  double l_tot = 0.0;
  std::vector<double> dispatch_fractions;  // per expert, sums to 1
};

struct TrainReport {
  std::vector<TrainStepRow> rows;
  // Mean L_mse over the last min(100, steps) steps; NaN for a 0-step run.
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  MoeBlock block;
  TrainReport report;
};

/// Distills one frozen FFN into a mixture block: each step samples a batch of
/// captured hidden states, recomputes the teacher output without gradients,
/// runs the student with k_train experts per token, and applies one Adam
/// update to the router and experts. Batch order reshuffles every pass over
/// the data with the run seed, so a given (seed, data) pair replays exactly.
inline TrainResult train_moe_block(const DenseFfn& teacher, MoeBlock block, const Tensor2& data_rows,
                                   const TrainConfig& cfg) {
  cfg.validate();
  teacher.validate();
  block.validate();
  if (data_rows.rows == 0) throw std::invalid_argument("train_moe_block: empty dataset");
  if (data_rows.cols != teacher.d_h() || block.d_h() != teacher.d_h()) {
    throw std::invalid_argument("train_moe_block: width mismatch between data, teacher and block");
  }
  if (block.n_experts() != cfg.n_experts) {
    throw std::invalid_argument("train_moe_block: block expert count differs from config");
  }

  TrainResult result;
  result.block = std::move(block);

  Rng shuffle_rng(cfg.seed);
  std::vector<int> order(data_rows.rows);
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();  // forces a shuffle before the first batch
  auto next_row = [&]() {
    if (cursor >= order.size()) {
      for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  AdamOptimizer adam(cfg.learning_rate);
  std::vector<Tensor2*> params = block_param_tensors(result.block);

  Tensor2 batch_x(cfg.batch_size, data_rows.cols);
  for (int step = 1; step <= cfg.steps; ++step) {
    for (int r = 0; r < cfg.batch_size; ++r) {
      const int src = next_row();
      for (int j = 0; j < data_rows.cols; ++j) batch_x(r, j) = data_rows(src, j);
    }
    const Tensor2 target = ffn_forward(teacher, batch_x);

    GradTape tape;
    BlockParamIds ids = register_block_params(tape, result.block);
    TapedStepLosses losses =
        taped_block_losses(tape, ids, result.block, batch_x, target, cfg.k_train, cfg.alpha_aux, cfg.loss_mode);
    if (!std::isfinite(losses.total.value)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": l_mse=" << losses.mse.value
          << " l_aux=" << losses.aux.value << " l_tot=" << losses.total.value;
      throw std::runtime_error(msg.str());
    }
    tape.backward(losses.total);

    std::vector<const Tensor2*> grads;
    grads.push_back(&tape.grad(ids.router));
    for (const auto& e : ids.experts) {
      grads.push_back(&tape.grad(e.up));
      grads.push_back(&tape.grad(e.gate));
      grads.push_back(&tape.grad(e.down));
    }
    adam.step(params, grads);

    TrainStepRow row;
    row.step = step;
    row.l_mse = losses.mse.value;
    row.l_aux = losses.aux.value;
    row.l_tot = losses.total.value;
    row.dispatch_fractions.resize(cfg.n_experts);
    const double denom = static_cast<double>(cfg.batch_size) * cfg.k_train;
    for (int e = 0; e < cfg.n_experts; ++e) {
      row.dispatch_fractions[e] = static_cast<double>(losses.dispatch_counts[e]) / denom;
    }
    result.report.rows.push_back(std::move(row));
  }

  if (!result.report.rows.empty()) {
    const size_t window = std::min<size_t>(100, result.report.rows.size());
    double acc = 0.0;
    for (size_t i = result.report.rows.size() - window; i < result.report.rows.size(); ++i) {
      acc += result.report.rows[i].l_mse;
    }
    result.report.final_loss = acc / static_cast<double>(window);
  }
  return result;
}

inline void write_train_report_csv(const std::string& path, const TrainReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  const size_t n = report.rows.empty() ? 0 : report.rows.front().dispatch_fractions.size();
  os << "step,l_mse,l_aux,l_tot";
  for (size_t e = 0; e < n; ++e) os << ",f" << e;
  os << "\n";
  os << std::setprecision(12);
  for (const TrainStepRow& r : report.rows) {
    os << r.step << "," << r.l_mse << "," << r.l_aux << "," << r.l_tot;
    for (double f : r.dispatch_fractions) os << "," << f;
    os << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace moekit
