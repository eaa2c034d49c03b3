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

// Gradient checks: each tape op's analytic backward pass is compared against
// central finite differences of an independent double-precision reference.

#include <gtest/gtest.h>

#include <moekit/autograd.hpp>

#include "oracles.hpp"

using moekit::GradTape;
using moekit::Rng;
using moekit::Scalar;
using moekit::Tensor2;
using oracles::DMat;

namespace {

constexpr double kTol = 1e-3;

TEST(Autograd, MatmulGradients) {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 a = moekit::randn(4, 3, 1.0, rng);
    const Tensor2 b = moekit::randn(3, 5, 1.0, rng);
    const Tensor2 r = moekit::randn(4, 5, 1.0, rng);
    GradTape tape;
    const int ia = tape.param(a);
    const int ib = tape.param(b);
    tape.backward(tape.sum_all(tape.mul(tape.matmul(ia, ib), tape.input(r))));

    DMat da = DMat::from(a), db = DMat::from(b);
    const DMat dr = DMat::from(r);
    const auto ref_a = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dmatmul(m, db), dr)); };
    const auto ref_b = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dmatmul(da, m), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ia), da, ref_a), kTol);
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ib), db, ref_b), kTol);
  }
}

TEST(Autograd, AddAndMulGradients) {
  Rng rng(102);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 a = moekit::randn(3, 4, 1.0, rng);
    const Tensor2 b = moekit::randn(3, 4, 1.0, rng);
    const Tensor2 r = moekit::randn(3, 4, 1.0, rng);
    GradTape tape;
    const int ia = tape.param(a);
    const int ib = tape.param(b);
    const int ir = tape.input(r);
    tape.backward(tape.sum_all(tape.mul(tape.add(ia, ib), ir)));

    DMat da = DMat::from(a);
    const DMat db = DMat::from(b), dr = DMat::from(r);
    const auto ref = [&](const DMat& m) {
      DMat s(m.rows, m.cols);
      for (size_t i = 0; i < s.a.size(); ++i) s.a[i] = m.a[i] + db.a[i];
      return oracles::dsum(oracles::dhadamard(s, dr));
    };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ia), da, ref), kTol);
  }
}

TEST(Autograd, SwishGradients) {
  Rng rng(103);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(4, 4, 2.0, rng);
    const Tensor2 r = moekit::randn(4, 4, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.swish(ix), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dswish(m), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, SoftmaxRowsGradients) {
  Rng rng(104);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(5, 4, 1.5, rng);
    const Tensor2 r = moekit::randn(5, 4, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.softmax_rows(ix), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dsoftmax_rows(m), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, NormalizeRowsGradients) {
  Rng rng(105);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor2 x = moekit::randn(4, 3, 1.0, rng);
    for (auto& v : x.data) v = std::abs(v) + 0.2f;  // keep row sums well away from zero
    const Tensor2 r = moekit::randn(4, 3, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.normalize_rows(ix), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dnormalize_rows(m), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, NormalizeRowsRejectsZeroRowSum) {
  Tensor2 x(1, 2);
  x(0, 0) = 1.0f;
  x(0, 1) = -1.0f;
  GradTape tape;
  const int ix = tape.input(x);
  EXPECT_THROW(tape.normalize_rows(ix), std::runtime_error);
}

TEST(Autograd, RowScaleGradients) {
  Rng rng(106);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(4, 5, 1.0, rng);
    const Tensor2 w = moekit::randn(4, 1, 1.0, rng);
    const Tensor2 r = moekit::randn(4, 5, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    const int iw = tape.param(w);
    tape.backward(tape.sum_all(tape.mul(tape.row_scale(ix, iw), tape.input(r))));

    DMat dx = DMat::from(x), dw = DMat::from(w);
    const DMat dr = DMat::from(r);
    const auto ref_x = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::drow_scale(m, dw), dr)); };
    const auto ref_w = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::drow_scale(dx, m), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref_x), kTol);
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(iw), dw, ref_w), kTol);
  }
}

TEST(Autograd, GatherRowsGradientsWithDuplicates) {
  Rng rng(107);
  const std::vector<int> idx{2, 0, 2, 1};  // row 2 drawn twice
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(3, 4, 1.0, rng);
    const Tensor2 r = moekit::randn(4, 4, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.gather_rows(ix, idx), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) { return oracles::dsum(oracles::dhadamard(oracles::dgather_rows(m, idx), dr)); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, ScatterRowsGradientsWithCollisions) {
  Rng rng(108);
  const std::vector<int> idx{1, 1, 0, 2};  // rows 0 and 1 collide on target 1
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(4, 3, 1.0, rng);
    const Tensor2 r = moekit::randn(3, 3, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.scatter_rows(ix, idx, 3), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) {
      return oracles::dsum(oracles::dhadamard(oracles::dscatter_rows(m, idx, 3), dr));
    };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, ScatterRowsAccumulatesCollidingRows) {
  Tensor2 x(2, 2);
  x(0, 0) = 1.0f; x(0, 1) = 2.0f;
  x(1, 0) = 10.0f; x(1, 1) = 20.0f;
  GradTape tape;
  const int y = tape.scatter_rows(tape.input(x), {0, 0}, 2);
  EXPECT_FLOAT_EQ(tape.value(y)(0, 0), 11.0f);
  EXPECT_FLOAT_EQ(tape.value(y)(0, 1), 22.0f);
  EXPECT_FLOAT_EQ(tape.value(y)(1, 0), 0.0f);
}

TEST(Autograd, GatherEntriesGradients) {
  Rng rng(109);
  const std::vector<std::pair<int, int>> rc{{0, 1}, {2, 0}, {1, 2}, {0, 1}};  // entry (0,1) twice
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 x = moekit::randn(3, 3, 1.0, rng);
    const Tensor2 r = moekit::randn(2, 2, 1.0, rng);
    GradTape tape;
    const int ix = tape.param(x);
    tape.backward(tape.sum_all(tape.mul(tape.gather_entries(ix, rc, 2, 2), tape.input(r))));

    DMat dx = DMat::from(x);
    const DMat dr = DMat::from(r);
    const auto ref = [&](const DMat& m) {
      return oracles::dsum(oracles::dhadamard(oracles::dgather_entries(m, rc, 2, 2), dr));
    };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ix), dx, ref), kTol);
  }
}

TEST(Autograd, MseGradients) {
  Rng rng(110);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 a = moekit::randn(4, 3, 1.0, rng);
    const Tensor2 b = moekit::randn(4, 3, 1.0, rng);
    GradTape tape;
    const int ia = tape.param(a);
    const int ib = tape.param(b);
    tape.backward(tape.mse(ia, ib));

    DMat da = DMat::from(a), db = DMat::from(b);
    const auto ref_a = [&](const DMat& m) { return oracles::dmse(m, db); };
    const auto ref_b = [&](const DMat& m) { return oracles::dmse(da, m); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ia), da, ref_a), kTol);
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ib), db, ref_b), kTol);
  }
}

TEST(Autograd, ScalarCombinationGradients) {
  // loss = mse(a, b) + c * sum(a) probes scale_scalar and add_scalars.
  Rng rng(111);
  const double c = 0.37;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor2 a = moekit::randn(3, 3, 1.0, rng);
    const Tensor2 b = moekit::randn(3, 3, 1.0, rng);
    GradTape tape;
    const int ia = tape.param(a);
    const int ib = tape.input(b);
    const Scalar loss = tape.add_scalars(tape.mse(ia, ib), tape.scale_scalar(tape.sum_all(ia), c));
    tape.backward(loss);

    DMat da = DMat::from(a);
    const DMat db = DMat::from(b);
    const auto ref = [&](const DMat& m) { return oracles::dmse(m, db) + c * oracles::dsum(m); };
    EXPECT_LT(oracles::max_grad_rel_err(tape.grad(ia), da, ref), kTol);
    EXPECT_NEAR(loss.value, ref(da), 1e-5);
  }
}

TEST(Autograd, ScaleScalarCoefficientIsConstant) {
  // d/ds of (c * s) must be exactly c: no gradient flows through c even when
  // c was computed from tape values.
  Tensor2 a(1, 1);
  a(0, 0) = 3.0f;
  GradTape tape;
  const int ia = tape.param(a);
  const Scalar s = tape.sum_all(ia);
  const Scalar scaled = tape.scale_scalar(s, 2.5);
  tape.backward(scaled);
  EXPECT_FLOAT_EQ(tape.grad(ia)(0, 0), 2.5f);
  EXPECT_DOUBLE_EQ(scaled.value, 7.5);
}

TEST(Autograd, ReusedNodeAccumulatesGradient) {
  Tensor2 x(1, 2);
  x(0, 0) = 1.0f;
  x(0, 1) = 2.0f;
  GradTape tape;
  const int ix = tape.param(x);
  tape.backward(tape.sum_all(tape.add(ix, ix)));
  EXPECT_FLOAT_EQ(tape.grad(ix)(0, 0), 2.0f);
  EXPECT_FLOAT_EQ(tape.grad(ix)(0, 1), 2.0f);
}

TEST(Autograd, GradsAreZeroBeforeBackward) {
  Tensor2 x(2, 2);
  GradTape tape;
  const int ix = tape.param(x);
  tape.matmul(ix, tape.input(Tensor2::full(2, 2, 1.0f)));
  for (float g : tape.grad(ix).data) EXPECT_EQ(g, 0.0f);
}

TEST(Autograd, BackwardValidatesLossNode) {
  Tensor2 x(2, 2);
  GradTape tape;
  const int ix = tape.input(x);
  EXPECT_THROW(tape.backward(ix), std::invalid_argument);   // not a scalar
  EXPECT_THROW(tape.backward(99), std::invalid_argument);   // not on the tape
  EXPECT_THROW(tape.backward(Scalar{}), std::invalid_argument);
}

TEST(Autograd, ParamsRecordRegistrationOrder) {
  Tensor2 x(1, 1);
  GradTape tape;
  const int a = tape.param(x);
  tape.input(x);
  const int b = tape.param(x);
  ASSERT_EQ(tape.params().size(), 2u);
  EXPECT_EQ(tape.params()[0], a);
  EXPECT_EQ(tape.params()[1], b);
}

TEST(Autograd, ValueMatchesPlainOps) {
  Rng rng(112);
  const Tensor2 a = moekit::randn(3, 4, 1.0, rng);
  const Tensor2 b = moekit::randn(4, 2, 1.0, rng);
  GradTape tape;
  const int y = tape.matmul(tape.input(a), tape.input(b));
  EXPECT_EQ(moekit::max_abs_diff(tape.value(y), moekit::matmul(a, b)), 0.0);
}

}  // namespace
