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
#include <utility>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

/// Scalar result of a taped reduction. `value` is the double-precision
/// magnitude (authoritative for reporting); `id` is the 1x1 node used to
/// seed backprop.
struct Scalar {
  int id = -1;
  double value = 0.0;
};

/// Records primitive ops in creation order, which is a topological order of
/// the graph; backward() replays the list strictly in reverse. One tape per
/// training step, single-threaded.
class GradTape {
 public:
  using NodeId = int;

  NodeId input(Tensor2 v) { return add_leaf(std::move(v), false); }

  NodeId param(const Tensor2& v) {
    NodeId id = add_leaf(v, true);
    params_.push_back(id);
    return id;
  }

  const Tensor2& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor2& grad(NodeId id) const { return nodes_.at(id).grad; }
  const std::vector<NodeId>& params() const { return params_; }
  size_t num_ops() const { return num_ops_; }

  NodeId matmul(NodeId a, NodeId b) {
    Tensor2 y = moekit::matmul(value(a), value(b));
    return add_op(std::move(y), [a, b](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      t.accumulate(a, matmul_nt(g, t.value(b)));
      t.accumulate(b, matmul_tn(t.value(a), g));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    Tensor2 y = moekit::add(value(a), value(b));
    return add_op(std::move(y), [a, b](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  NodeId mul(NodeId a, NodeId b) {
    Tensor2 y = hadamard(value(a), value(b));
    return add_op(std::move(y), [a, b](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      t.accumulate(a, hadamard(g, t.value(b)));
      t.accumulate(b, hadamard(g, t.value(a)));
    });
  }

  NodeId swish(NodeId x) {
    Tensor2 y = moekit::swish(value(x));
    return add_op(std::move(y), [x](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& xv = t.value(x);
      Tensor2 dx(xv.rows, xv.cols);
      for (size_t i = 0; i < dx.size(); ++i) {
        const double v = xv.data[i];
        const double s = sigmoid(v);
        dx.data[i] = static_cast<float>(g.data[i] * s * (1.0 + v * (1.0 - s)));
      }
      t.accumulate(x, dx);
    });
  }

  NodeId softmax_rows(NodeId x) {
    Tensor2 y = moekit::softmax_rows(value(x));
    return add_op(std::move(y), [x](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& y = t.nodes_[self].value;
      Tensor2 dx(y.rows, y.cols);
      for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += static_cast<double>(g(i, j)) * y(i, j);
        for (int j = 0; j < y.cols; ++j) {
          dx(i, j) = static_cast<float>(y(i, j) * (g(i, j) - dot));
        }
      }
      t.accumulate(x, dx);
    });
  }

  /// y_ij = x_ij / sum_j x_ij. Row sums must be non-zero.
  NodeId normalize_rows(NodeId x) {
    const Tensor2& xv = value(x);
    Tensor2 y(xv.rows, xv.cols);
    std::vector<double> sums(xv.rows);
    for (int i = 0; i < xv.rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < xv.cols; ++j) s += xv(i, j);
      if (s == 0.0) throw std::runtime_error("normalize_rows: zero row sum");
      sums[i] = s;
      for (int j = 0; j < xv.cols; ++j) y(i, j) = static_cast<float>(xv(i, j) / s);
    }
    ensure_finite(y, "normalize_rows");
    return add_op(std::move(y), [x, sums](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& y = t.nodes_[self].value;
      Tensor2 dx(y.rows, y.cols);
      for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += static_cast<double>(g(i, j)) * y(i, j);
        for (int j = 0; j < y.cols; ++j) {
          dx(i, j) = static_cast<float>((g(i, j) - dot) / sums[i]);
        }
      }
      t.accumulate(x, dx);
    });
  }

  /// y_ij = x_ij * w_i with w of shape [rows, 1].
  NodeId row_scale(NodeId x, NodeId w) {
    const Tensor2& xv = value(x);
    const Tensor2& wv = value(w);
    if (wv.cols != 1 || wv.rows != xv.rows) {
      throw std::invalid_argument("row_scale: weight must be [rows, 1]");
    }
    Tensor2 y(xv.rows, xv.cols);
    for (int i = 0; i < xv.rows; ++i) {
      for (int j = 0; j < xv.cols; ++j) y(i, j) = xv(i, j) * wv(i, 0);
    }
    ensure_finite(y, "row_scale");
    return add_op(std::move(y), [x, w](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& xv = t.value(x);
      const Tensor2& wv = t.value(w);
      Tensor2 dx(xv.rows, xv.cols);
      Tensor2 dw(wv.rows, 1);
      for (int i = 0; i < xv.rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < xv.cols; ++j) {
          dx(i, j) = g(i, j) * wv(i, 0);
          acc += static_cast<double>(g(i, j)) * xv(i, j);
        }
        dw(i, 0) = static_cast<float>(acc);
      }
      t.accumulate(x, dx);
      t.accumulate(w, dw);
    });
  }

  NodeId gather_rows(NodeId x, std::vector<int> idx) {
    const Tensor2& xv = value(x);
    Tensor2 y(static_cast<int>(idx.size()), xv.cols);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= xv.rows) throw std::invalid_argument("gather_rows: index out of range");
      for (int j = 0; j < xv.cols; ++j) y(static_cast<int>(r), j) = xv(idx[r], j);
    }
    return add_op(std::move(y), [x, idx = std::move(idx)](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      Tensor2 dx(t.value(x).rows, t.value(x).cols);
      for (size_t r = 0; r < idx.size(); ++r) {
        for (int j = 0; j < dx.cols; ++j) dx(idx[r], j) += g(static_cast<int>(r), j);
      }
      t.accumulate(x, dx);
    });
  }

  /// out[idx[r], :] += x[r, :]; duplicates in idx accumulate.
  NodeId scatter_rows(NodeId x, std::vector<int> idx, int out_rows) {
    const Tensor2& xv = value(x);
    if (static_cast<int>(idx.size()) != xv.rows) {
      throw std::invalid_argument("scatter_rows: one target row per source row");
    }
    Tensor2 y(out_rows, xv.cols);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= out_rows) throw std::invalid_argument("scatter_rows: index out of range");
      for (int j = 0; j < xv.cols; ++j) y(idx[r], j) += xv(static_cast<int>(r), j);
    }
    return add_op(std::move(y), [x, idx = std::move(idx)](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& xv = t.value(x);
      Tensor2 dx(xv.rows, xv.cols);
      for (size_t r = 0; r < idx.size(); ++r) {
        for (int j = 0; j < dx.cols; ++j) dx(static_cast<int>(r), j) = g(idx[r], j);
      }
      t.accumulate(x, dx);
    });
  }

  /// Arbitrary-entry gather: y is [out_rows, out_cols] with
  /// y[p] = x[rc[p].first, rc[p].second], p in row-major order.
  NodeId gather_entries(NodeId x, std::vector<std::pair<int, int>> rc, int out_rows, int out_cols) {
    const Tensor2& xv = value(x);
    if (rc.size() != static_cast<size_t>(out_rows) * out_cols) {
      throw std::invalid_argument("gather_entries: entry list does not match output shape");
    }
    Tensor2 y(out_rows, out_cols);
    for (size_t p = 0; p < rc.size(); ++p) {
      auto [r, c] = rc[p];
      if (r < 0 || r >= xv.rows || c < 0 || c >= xv.cols) {
        throw std::invalid_argument("gather_entries: index out of range");
      }
      y.data[p] = xv(r, c);
    }
    return add_op(std::move(y), [x, rc = std::move(rc)](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      const Tensor2& xv = t.value(x);
      Tensor2 dx(xv.rows, xv.cols);
      for (size_t p = 0; p < rc.size(); ++p) dx(rc[p].first, rc[p].second) += g.data[p];
      t.accumulate(x, dx);
    });
  }

  Scalar mse(NodeId a, NodeId b) {
    const double v = moekit::mse(value(a), value(b));
    Tensor2 y(1, 1);
    y(0, 0) = static_cast<float>(v);
    NodeId id = add_op(std::move(y), [a, b](GradTape& t, NodeId self) {
      const double g = t.nodes_[self].grad(0, 0);
      const Tensor2& av = t.value(a);
      const Tensor2& bv = t.value(b);
      const double scale = 2.0 * g / static_cast<double>(av.size());
      Tensor2 da(av.rows, av.cols);
      Tensor2 db(av.rows, av.cols);
      for (size_t i = 0; i < av.size(); ++i) {
        const double d = scale * (static_cast<double>(av.data[i]) - bv.data[i]);
        da.data[i] = static_cast<float>(d);
        db.data[i] = static_cast<float>(-d);
      }
      t.accumulate(a, da);
      t.accumulate(b, db);
    });
    return Scalar{id, v};
  }

  Scalar sum_all(NodeId x) {
    double acc = 0.0;
    for (float v : value(x).data) acc += v;
    Tensor2 y(1, 1);
    y(0, 0) = static_cast<float>(acc);
    NodeId id = add_op(std::move(y), [x](GradTape& t, NodeId self) {
      const float g = t.nodes_[self].grad(0, 0);
      const Tensor2& xv = t.value(x);
      t.accumulate(x, Tensor2::full(xv.rows, xv.cols, g));
    });
    return Scalar{id, acc};
  }

  /// c * s with c treated as a constant (no gradient through c).
  Scalar scale_scalar(Scalar s, double c) {
    const double v = c * s.value;
    Tensor2 y(1, 1);
    y(0, 0) = static_cast<float>(v);
    NodeId id = add_op(std::move(y), [src = s.id, c](GradTape& t, NodeId self) {
      Tensor2 d(1, 1);
      d(0, 0) = static_cast<float>(c * t.nodes_[self].grad(0, 0));
      t.accumulate(src, d);
    });
    return Scalar{id, v};
  }

  Scalar add_scalars(Scalar a, Scalar b) {
    const double v = a.value + b.value;
    Tensor2 y(1, 1);
    y(0, 0) = static_cast<float>(v);
    NodeId id = add_op(std::move(y), [ia = a.id, ib = b.id](GradTape& t, NodeId self) {
      const Tensor2& g = t.nodes_[self].grad;
      t.accumulate(ia, g);
      t.accumulate(ib, g);
    });
    return Scalar{id, v};
  }

  /// Seeds the loss gradient with 1 and replays recorded ops in reverse
  /// creation order. Gradients of unvisited parameters stay zero.
  void backward(Scalar loss) { backward(loss.id); }

  void backward(NodeId loss) {
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size())) {
      throw std::invalid_argument("backward: loss is not on this tape");
    }
    Node& ln = nodes_[loss];
    if (ln.value.rows != 1 || ln.value.cols != 1) {
      throw std::invalid_argument("backward: loss node is not a scalar");
    }
    ln.grad(0, 0) += 1.0f;
    for (NodeId i = loss; i >= 0; --i) {
      if (nodes_[i].backprop) nodes_[i].backprop(*this, i);
    }
  }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    std::function<void(GradTape&, NodeId)> backprop;  // empty for leaves
    bool trainable = false;
  };

  NodeId add_leaf(Tensor2 v, bool trainable) {
    Node n;
    n.grad = Tensor2(v.rows, v.cols);
    n.value = std::move(v);
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId add_op(Tensor2 v, std::function<void(GradTape&, NodeId)> backprop) {
    Node n;
    n.grad = Tensor2(v.rows, v.cols);
    n.value = std::move(v);
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    ++num_ops_;
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  void accumulate(NodeId id, const Tensor2& g) {
    Tensor2& dst = nodes_[id].grad;
    if (!same_shape(dst, g)) throw std::runtime_error("gradient shape mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
  size_t num_ops_ = 0;
};

}  // namespace moekit
