#include <cmath>
#include <limits>

#include "doctest.h"
#include "mtn/errors.hpp"
#include "mtn/gradcheck.hpp"
#include "mtn/tensor.hpp"
#include "oracle_helpers.hpp"

using namespace mtn;
using testref::Mat;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_SUITE("tensor") {

TEST_CASE("matmul matches the naive triple loop on random inputs") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(6);
    const std::size_t k = 1 + rng.below(6);
    const std::size_t n = 1 + rng.below(6);
    Tensor a = Tensor::uniform(m, k, -2.0, 2.0, rng);
    Tensor b = Tensor::uniform(k, n, -2.0, 2.0, rng);
    Tape tape;
    Tensor c = matmul(tape, a, b);
    Mat expect = testref::naive_matmul(testref::from_tensor(a),
                                       testref::from_tensor(b));
    CHECK(testref::max_abs_diff(expect, c) <= 1e-12);
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions, naming both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros(2, 3);
  Tensor b = Tensor::zeros(4, 2);
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       "matmul: incompatible shapes 2x3 and 4x2", ShapeError);
}

TEST_CASE("transpose round-trips and matches the reference") {
  Rng rng(7);
  Tensor x = Tensor::uniform(3, 5, -1.0, 1.0, rng);
  Tape tape;
  Tensor xt = transpose(tape, x);
  CHECK(testref::max_abs_diff(testref::naive_transpose(testref::from_tensor(x)),
                              xt) == 0.0);
  Tensor xtt = transpose(tape, xt);
  CHECK(max_abs_diff(x, xtt) == 0.0);
}

TEST_CASE("softmax handles uniform, masked, and degenerate rows") {
  Tape tape;
  Tensor even = softmax_rows(tape, Tensor::row({0.0, 0.0}));
  CHECK(even(0, 0) == 0.5);
  CHECK(even(0, 1) == 0.5);

  Tensor masked = softmax_rows(tape, Tensor::row({-kInf, 0.0, -kInf}));
  CHECK(masked(0, 0) == 0.0);  // exactly zero, not just small
  CHECK(masked(0, 1) == 1.0);
  CHECK(masked(0, 2) == 0.0);

  CHECK_THROWS_AS(softmax_rows(tape, Tensor::row({-kInf, -kInf})), MaskError);
}

TEST_CASE("softmax rows sum to one on random matrices") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::uniform(4, 7, -30.0, 30.0, rng);
    Tape tape;
    Tensor y = softmax_rows(tape, x);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) s += y(i, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    Mat expect = testref::naive_softmax_rows(testref::from_tensor(x));
    CHECK(testref::max_abs_diff(expect, y) <= 1e-12);
  }
}

TEST_CASE("layer norm standardizes rows exactly") {
  Tape tape;
  Tensor gain = Tensor::row({1.0, 1.0});
  Tensor bias = Tensor::row({0.0, 0.0});
  Tensor y = layer_norm_rows(tape, Tensor::row({1.0, -1.0}), gain, bias, 0.0);
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));

  Rng rng(3);
  Tensor x = Tensor::uniform(5, 8, -4.0, 4.0, rng);
  Tensor g8 = Tensor::uniform(1, 8, 0.5, 1.5, rng);
  Tensor b8 = Tensor::uniform(1, 8, -0.5, 0.5, rng);
  Tensor out = layer_norm_rows(tape, x, g8, b8, 1e-5);
  Mat expect = testref::naive_layer_norm_rows(
      testref::from_tensor(x), testref::from_tensor(g8),
      testref::from_tensor(b8), 1e-5);
  CHECK(testref::max_abs_diff(expect, out) <= 1e-12);

  CHECK_THROWS_AS(layer_norm_rows(tape, Tensor::row({1.0}),
                                  Tensor::row({1.0}), Tensor::row({0.0}), 0.0),
                  ShapeError);
}

TEST_CASE("backward accumulates additively and respects provenance") {
  Tensor x = Tensor::full(2, 3, 2.0, /*requires_grad=*/true);
  Tape tape;
  Tensor loss = sum_all(tape, x);
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 2.0);  // second pass adds on top

  Tape other;
  CHECK_THROWS_AS(other.backward(loss), TapeError);
  Tensor scalar_leaf = Tensor::zeros(1, 1, true);
  CHECK_THROWS_AS(tape.backward(scalar_leaf), TapeError);  // not produced here
}

TEST_CASE("a zero-weighted path still reaches its leaves with zero gradient") {
  Tensor x = Tensor::full(2, 2, 3.0, true);
  Tape tape;
  Tensor loss = sum_all(tape, scale(tape, x, 0.0));
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::zeros(2, 2, true);
  Tape tape;
  Tensor y = add(tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("masked fill zeroes masked attention weights exactly") {
  Rng rng(5);
  Tensor logits = Tensor::uniform(4, 4, -2.0, 2.0, rng);
  ValidityMask mask = ValidityMask::causal(4);
  Tape tape;
  Tensor w = softmax_rows(tape, masked_fill(tape, logits, mask));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) CHECK(w(i, j) == 0.0);
      s += w(i, j);
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("row lookups copy rows and accumulate duplicate gradients") {
  Tensor table = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}});
  Tensor grad_table = table.clone(true);
  Tape tape;
  Tensor picked = lookup_rows(tape, grad_table, {2, 2, 0});
  CHECK(picked(0, 0) == 5.0);
  CHECK(picked(1, 0) == 5.0);
  CHECK(picked(1, 1) == 6.0);
  Tensor loss = sum_all(tape, picked);
  tape.backward(loss);
  CHECK(grad_table.grad()[2 * 2 + 0] == 2.0);  // row 2 hit twice
  CHECK(grad_table.grad()[0] == 1.0);
  CHECK(grad_table.grad()[1 * 2 + 0] == 0.0);

  CHECK_THROWS_AS(lookup_rows(tape, table, {3}), VocabError);
  CHECK_THROWS_AS(lookup_rows(tape, table, {-1}), VocabError);
}

TEST_CASE("slices and concats invert each other") {
  Rng rng(9);
  Tensor x = Tensor::uniform(6, 4, -1.0, 1.0, rng);
  Tape tape;
  Tensor top = slice_rows(tape, x, 0, 2);
  Tensor rest = slice_rows(tape, x, 2, 4);
  CHECK(max_abs_diff(concat_rows(tape, {top, rest}), x) == 0.0);

  Tensor left = slice_cols(tape, x, 0, 1);
  Tensor right = slice_cols(tape, x, 1, 3);
  CHECK(max_abs_diff(concat_cols(tape, {left, right}), x) == 0.0);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  Rng rng(1234);
  const double h = 1e-5;
  const double tol = 1e-4;

  auto check = [&](const char* name, const ScalarFn& f, const Tensor& x) {
    INFO("op: " << name);
    CHECK(finite_diff_check(f, x, h) < tol);
  };

  Tensor x0 = Tensor::uniform(3, 4, -1.0, 1.0, rng);
  Tensor other = Tensor::uniform(3, 4, -1.0, 1.0, rng);
  Tensor rhs = Tensor::uniform(4, 2, -1.0, 1.0, rng);
  Tensor lhs = Tensor::uniform(5, 3, -1.0, 1.0, rng);
  Tensor bias = Tensor::uniform(1, 4, -1.0, 1.0, rng);
  Tensor gain = Tensor::uniform(1, 4, 0.5, 1.5, rng);

  check("matmul_lhs",
        [&](Tape& t, const Tensor& x) { return sum_all(t, matmul(t, x, rhs)); },
        x0);
  check("matmul_rhs",
        [&](Tape& t, const Tensor& x) { return sum_all(t, matmul(t, lhs, x)); },
        x0);
  check("transpose",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, matmul(t, transpose(t, x), rhs.clone()));
        },
        Tensor::uniform(4, 3, -1.0, 1.0, rng));
  check("add",
        [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, add(t, x, other), other)); },
        x0);
  check("sub",
        [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, sub(t, x, other), other)); },
        x0);
  check("mul",
        [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, mul(t, x, other), x)); },
        x0);
  check("scale",
        [&](Tape& t, const Tensor& x) { return sum_all(t, scale(t, x, -1.7)); },
        x0);
  check("scale_by",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, scale_by(t, mul(t, x, x), slice_cols(t, slice_rows(t, x, 0, 1), 0, 1)));
        },
        x0);
  check("add_bias_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, add_bias_rows(t, x, bias), x));
        },
        x0);
  check("add_bias_rows_bias",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, add_bias_rows(t, other, x), other));
        },
        bias);
  check("relu",
        [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, relu(t, x), other)); },
        x0);
  check("tanh",
        [&](Tape& t, const Tensor& x) { return sum_all(t, mul(t, tanh(t, x), other)); },
        x0);
  check("softmax_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, softmax_rows(t, x), other));
        },
        x0);
  check("log_softmax_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, log_softmax_rows(t, x), other));
        },
        x0);
  check("layer_norm_x",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, layer_norm_rows(t, x, gain, bias, 1e-5), other));
        },
        x0);
  check("layer_norm_gain",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, layer_norm_rows(t, x0, x, bias, 1e-5), other));
        },
        gain);
  check("layer_norm_bias",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, layer_norm_rows(t, x0, gain, x, 1e-5), other));
        },
        bias);
  {
    ValidityMask mask(3, 4, true);
    mask.set(0, 1, false);
    mask.set(2, 3, false);
    check("masked_fill+softmax",
          [&, mask](Tape& t, const Tensor& x) {
            return sum_all(t, mul(t, softmax_rows(t, masked_fill(t, x, mask)), other));
          },
          x0);
  }
  check("lookup_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, lookup_rows(t, x, {0, 2, 2}),
                                slice_rows(t, lhs, 0, 3)));
        },
        Tensor::uniform(4, 3, -1.0, 1.0, rng));
  check("concat_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, concat_rows(t, {x, other}), concat_rows(t, {other, x})));
        },
        x0);
  check("concat_cols",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, concat_cols(t, {x, other}), concat_cols(t, {other, x})));
        },
        x0);
  check("slice_rows",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, slice_rows(t, x, 1, 2), slice_rows(t, other, 0, 2)));
        },
        x0);
  check("slice_cols",
        [&](Tape& t, const Tensor& x) {
          return sum_all(t, mul(t, slice_cols(t, x, 1, 2), slice_cols(t, other, 0, 2)));
        },
        x0);
}

TEST_CASE("relu gradient is zero exactly at zero") {
  Tensor x = Tensor::row({0.0, -1.0, 2.0});
  Tensor leaf = x.clone(true);
  Tape tape;
  tape.backward(sum_all(tape, relu(tape, leaf)));
  CHECK(leaf.grad()[0] == 0.0);
  CHECK(leaf.grad()[1] == 0.0);
  CHECK(leaf.grad()[2] == 1.0);
}

TEST_CASE("dropout is identity in eval mode and rescales in training") {
  Rng rng(77);
  Tensor x = Tensor::uniform(8, 8, 0.5, 1.5, rng);
  Tape tape;
  Tensor eval_out = dropout(tape, x, 0.5, nullptr, /*training=*/false);
  CHECK(max_abs_diff(eval_out, x) == 0.0);

  Rng droprng(123);
  Tensor train_out = dropout(tape, x, 0.5, &droprng, true);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < train_out.rows(); ++i) {
    for (std::size_t j = 0; j < train_out.cols(); ++j) {
      const double v = train_out(i, j);
      if (v == 0.0) {
        ++zeros;
      } else {
        CHECK(v == doctest::Approx(2.0 * x(i, j)));
      }
    }
  }
  CHECK(zeros > 0);
  CHECK(zeros < 64);

  // Same seed, same mask.
  Rng droprng2(123);
  Tensor again = dropout(tape, x, 0.5, &droprng2, true);
  CHECK(max_abs_diff(train_out, again) == 0.0);
}

TEST_CASE("assign_values refuses graph results and wrong sizes") {
  Tensor x = Tensor::zeros(2, 2);
  CHECK_THROWS_AS(x.assign_values({1.0}), ShapeError);
  Tape tape;
  Tensor y = add(tape, x, x);
  CHECK_THROWS_AS(y.assign_values({1.0, 2.0, 3.0, 4.0}), TapeError);
}

}  // TEST_SUITE
