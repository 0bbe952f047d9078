#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mtn/errors.hpp"
#include "mtn/gradcheck.hpp"
#include "mtn/mtn.hpp"
#include "oracle_helpers.hpp"

using namespace mtn;
using testref::Mat;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.d_f = 16;
  cfg.d_emb = 8;
  cfg.P = 2;
  cfg.L = 1;
  cfg.L_dec = 1;
  cfg.K = 2;
  cfg.L_levels = {1};
  cfg.level_group_caps = {};
  cfg.dropout = 0.0;
  cfg.max_query_len = 4;
  cfg.seed = 5;
  return cfg;
}

EncodedQuery query_of(std::vector<int> ids, std::size_t n_max) {
  EncodedQuery q;
  q.valid.assign(n_max, false);
  for (std::size_t i = 0; i < ids.size(); ++i) q.valid[i] = true;
  ids.resize(n_max, 0);
  q.ids = std::move(ids);
  return q;
}

double row_diff(const Tensor& a, const Tensor& b, std::size_t i) {
  double worst = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    worst = std::max(worst, std::abs(a(i, j) - b(i, j)));
  }
  return worst;
}

}  // namespace

TEST_SUITE("mtn") {

TEST_CASE("model construction wires pooling rows and unique parameter names") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);

  REQUIRE(model.level_proj.size() == 1);
  CHECK(model.level_proj[0].rows() == 1);
  CHECK(model.level_proj[0].cols() == 4);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(model.level_proj[0](0, j) == 0.25);
  }
  REQUIRE(model.code_encoders.size() == 1);
  CHECK(model.code_encoders[0].size() == 1);

  NamedTensors params = named_parameters(model);
  std::set<std::string> names;
  for (auto& [name, tensor] : params) {
    CHECK(tensor.requires_grad());
    names.insert(name);
  }
  CHECK(names.size() == params.size());
  CHECK(names.count("embedding.table") == 1);
  CHECK(names.count("query_enc.0.ffn.w1") == 1);
  CHECK(names.count("level.2.proj") == 1);
  CHECK(names.count("level.2.enc.0.head.0.query") == 1);
  CHECK(names.count("fuse_norm.gain") == 1);
  CHECK(names.count("decoder.0.cross_head.1.key") == 1);

  CHECK_THROWS_AS(make_model(cfg, 3), ConfigError);
}

TEST_CASE("encoding yields one fused token matrix per context query") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  std::vector<EncodedQuery> queries = {query_of({4, 5}, 4),
                                       query_of({6, 7, 8}, 4),
                                       query_of({9}, 4)};
  Tape tape;
  EncodeTrace trace = mtn_encode(tape, queries, model, RunMode::eval());
  REQUIRE(trace.fused.size() == 3);
  REQUIRE(trace.query_outputs.size() == 3);
  REQUIRE(trace.level_codes.size() == 1);
  CHECK(trace.level_codes[0].rows() == 3);
  CHECK(trace.level_codes[0].cols() == 8);
  CHECK(trace.top_unit == std::vector<std::size_t>{0, 1, 2});
  for (const Tensor& fused : trace.fused) {
    CHECK(fused.rows() == 4);
    CHECK(fused.cols() == 8);
    CHECK(fused.all_finite());
  }

  Tape t2;
  Tensor context = mtn_context(t2, queries, NestedGrouping{}, model,
                               RunMode::eval());
  CHECK(context.rows() == 12);
  CHECK(context.cols() == 8);
}

TEST_CASE("a layerless session level reduces to normalized mean-code fusion") {
  ModelConfig cfg = tiny_config();
  cfg.L_levels = {0};
  MtnModel model = make_model(cfg, 12);
  std::vector<EncodedQuery> queries = {query_of({4, 5, 6}, 4),
                                       query_of({7, 8}, 4)};
  Tape tape;
  EncodeTrace trace = mtn_encode(tape, queries, model, RunMode::eval());

  for (std::size_t q = 0; q < queries.size(); ++q) {
    Mat y = testref::from_tensor(trace.query_outputs[q]);
    // The pooling row starts as a uniform average, so each code is the
    // column mean of its query matrix and fusion adds it to every row.
    Mat shifted(y.rows, y.cols);
    for (std::size_t j = 0; j < y.cols; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < y.rows; ++i) mean += y.at(i, j);
      mean /= static_cast<double>(y.rows);
      for (std::size_t i = 0; i < y.rows; ++i) {
        shifted.a[i * y.cols + j] = y.at(i, j) + mean;
      }
    }
    Mat expect = testref::naive_layer_norm_rows(
        shifted, testref::from_tensor(model.fuse_norm.gain),
        testref::from_tensor(model.fuse_norm.bias), 1e-5);
    CHECK(testref::max_abs_diff(expect, trace.fused[q]) <= 1e-12);
  }
}

TEST_CASE("later queries cannot influence earlier fused representations") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  std::vector<EncodedQuery> queries = {query_of({4, 5}, 4),
                                       query_of({6, 7}, 4),
                                       query_of({8, 9}, 4)};
  Tape t1;
  EncodeTrace before = mtn_encode(t1, queries, model, RunMode::eval());

  queries[2] = query_of({10, 11, 4}, 4);
  Tape t2;
  EncodeTrace after = mtn_encode(t2, queries, model, RunMode::eval());

  for (std::size_t q = 0; q < 2; ++q) {
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(row_diff(before.fused[q], after.fused[q], i) == 0.0);
    }
  }
  double moved = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    moved = std::max(moved, row_diff(before.fused[2], after.fused[2], i));
  }
  CHECK(moved > 1e-6);
}

TEST_CASE("three-level hierarchies group queries and stay causal across groups") {
  ModelConfig cfg = tiny_config();
  cfg.K = 3;
  cfg.L_levels = {1, 1};
  cfg.level_group_caps = {2};
  MtnModel model = make_model(cfg, 12);
  REQUIRE(model.level_proj.size() == 2);
  CHECK(model.level_proj[1].cols() == 2);

  std::vector<EncodedQuery> queries = {query_of({4}, 4), query_of({5}, 4),
                                       query_of({6}, 4), query_of({7}, 4)};
  NestedGrouping grouping;
  grouping.group_sizes = {{2, 2}};

  Tape t1;
  EncodeTrace before = k_level_encode(t1, queries, grouping, model,
                                      RunMode::eval());
  REQUIRE(before.level_codes.size() == 2);
  CHECK(before.level_codes[0].rows() == 4);
  CHECK(before.level_codes[1].rows() == 2);
  CHECK(before.top_unit == std::vector<std::size_t>{0, 0, 1, 1});

  // Perturbing a query in the second group must leave the first group's
  // fused outputs untouched: its top-level code only attends to itself.
  queries[3] = query_of({8, 9}, 4);
  Tape t2;
  EncodeTrace after = k_level_encode(t2, queries, grouping, model,
                                     RunMode::eval());
  for (std::size_t q = 0; q < 2; ++q) {
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(row_diff(before.fused[q], after.fused[q], i) == 0.0);
    }
  }
  for (std::size_t q = 2; q < 4; ++q) {
    double moved = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      moved = std::max(moved, row_diff(before.fused[q], after.fused[q], i));
    }
    CHECK(moved > 1e-8);
  }

  // A short trailing group is zero-padded up to the cap instead of rejected.
  NestedGrouping ragged;
  ragged.group_sizes = {{2, 1, 1}};
  Tape t3;
  EncodeTrace padded = k_level_encode(t3, queries, ragged, model,
                                      RunMode::eval());
  CHECK(padded.level_codes[1].rows() == 3);
  CHECK(padded.top_unit == std::vector<std::size_t>{0, 0, 1, 2});

  NestedGrouping bad_cover;
  bad_cover.group_sizes = {{2, 1}};
  Tape t4;
  CHECK_THROWS_AS(k_level_encode(t4, queries, bad_cover, model, RunMode::eval()),
                  ShapeError);
  NestedGrouping bad_cap;
  bad_cap.group_sizes = {{3, 1}};
  CHECK_THROWS_AS(k_level_encode(t4, queries, bad_cap, model, RunMode::eval()),
                  ShapeError);
}

TEST_CASE("teacher-forced forward returns next-token log-probabilities") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  EncodedSession session;
  session.queries = {query_of({4, 5}, 4), query_of({6}, 4)};
  session.target = {2, 7, 8, 3};

  Tape tape;
  Tensor log_probs = mtn_forward(tape, session, model, RunMode::eval());
  REQUIRE(log_probs.rows() == 3);
  REQUIRE(log_probs.cols() == 12);
  for (std::size_t i = 0; i < log_probs.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < log_probs.cols(); ++j) {
      sum += std::exp(log_probs(i, j));
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
  }

  EncodedSession bad = session;
  bad.target = {2};
  CHECK_THROWS_AS(mtn_forward(tape, bad, model, RunMode::eval()), ShapeError);
}

TEST_CASE("stepwise decoding matches the teacher-forced rows exactly") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  EncodedSession session;
  session.queries = {query_of({4, 5, 6}, 4), query_of({7}, 4)};
  session.target = {2, 9, 10, 11, 3};

  Tape tape;
  Tensor forced = mtn_forward(tape, session, model, RunMode::eval());
  Tensor context = mtn_context(tape, session.queries, session.grouping, model,
                               RunMode::eval());
  for (std::size_t k = 0; k + 1 < session.target.size(); ++k) {
    std::vector<int> prefix(session.target.begin(),
                            session.target.begin() + k + 1);
    Tape local;
    Tensor step = decode_log_probs(local, context, prefix, model);
    REQUIRE(step.rows() == 1);
    for (std::size_t j = 0; j < step.cols(); ++j) {
      CHECK(step(0, j) == forced(k, j));
    }
  }
}

TEST_CASE("model gradients reach the pooling row, fusion norm, and embeddings") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  EncodedSession session;
  session.queries = {query_of({4, 5}, 4), query_of({6, 7}, 4)};
  session.target = {2, 8, 3};
  Rng rng(77);
  Tensor other = Tensor::uniform(2, 12, -1.0, 1.0, rng);

  auto weigh = [&](Tape& t, const Tensor& y) {
    return sum_all(t, mul(t, y, other));
  };

  CHECK(finite_diff_check(
            [&](Tape& t, const Tensor& x) {
              MtnModel m = model;
              m.level_proj[0] = x;
              return weigh(t, mtn_forward(t, session, m, RunMode::eval()));
            },
            model.level_proj[0], 1e-5) < 1e-4);
  CHECK(finite_diff_check(
            [&](Tape& t, const Tensor& x) {
              MtnModel m = model;
              m.fuse_norm.gain = x;
              return weigh(t, mtn_forward(t, session, m, RunMode::eval()));
            },
            model.fuse_norm.gain, 1e-5) < 1e-4);
  CHECK(finite_diff_check(
            [&](Tape& t, const Tensor& x) {
              MtnModel m = model;
              m.embedding.table = x;
              return weigh(t, mtn_forward(t, session, m, RunMode::eval()));
            },
            model.embedding.table, 1e-5) < 1e-4);
}

TEST_CASE("clones share values but not storage") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  MtnModel copy = clone_model(model);
  EncodedSession session;
  session.queries = {query_of({4, 5}, 4)};
  session.target = {2, 6, 3};

  Tape t1, t2;
  Tensor a = mtn_forward(t1, session, model, RunMode::eval());
  Tensor b = mtn_forward(t2, session, copy, RunMode::eval());
  CHECK(max_abs_diff(a, b) == 0.0);

  std::vector<double> bumped = model.fuse_norm.bias.values();
  bumped[0] += 1.0;
  model.fuse_norm.bias.assign_values(bumped);
  Tape t3, t4;
  Tensor a2 = mtn_forward(t3, session, model, RunMode::eval());
  Tensor b2 = mtn_forward(t4, session, copy, RunMode::eval());
  CHECK(max_abs_diff(a, a2) > 1e-6);
  CHECK(max_abs_diff(b, b2) == 0.0);
}

TEST_CASE("malformed inputs are rejected up front") {
  ModelConfig cfg = tiny_config();
  MtnModel model = make_model(cfg, 12);
  Tape tape;

  std::vector<EncodedQuery> none;
  CHECK_THROWS_AS(mtn_encode(tape, none, model, RunMode::eval()), ShapeError);

  EncodedQuery short_slots;
  short_slots.ids = {4, 5};
  short_slots.valid = {true, true};
  CHECK_THROWS_AS(mtn_encode(tape, {short_slots}, model, RunMode::eval()),
                  ShapeError);

  EncodedQuery all_pad;
  all_pad.ids = {0, 0, 0, 0};
  all_pad.valid = {false, false, false, false};
  CHECK_THROWS_AS(mtn_encode(tape, {all_pad}, model, RunMode::eval()),
                  ShapeError);
}

TEST_CASE("training-mode dropout is reproducible per seed") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.2;
  MtnModel model = make_model(cfg, 12);
  EncodedSession session;
  session.queries = {query_of({4, 5}, 4), query_of({6}, 4)};
  session.target = {2, 7, 3};

  Rng r1(99), r2(99), r3(100);
  Tape t1, t2, t3, t4;
  Tensor a = mtn_forward(t1, session, model, RunMode::train(0.2, r1));
  Tensor b = mtn_forward(t2, session, model, RunMode::train(0.2, r2));
  Tensor c = mtn_forward(t3, session, model, RunMode::train(0.2, r3));
  Tensor e = mtn_forward(t4, session, model, RunMode::eval());
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(max_abs_diff(a, c) > 1e-9);
  CHECK(max_abs_diff(a, e) > 1e-9);
}

}  // TEST_SUITE
