#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mtn/errors.hpp"
#include "mtn/gradcheck.hpp"
#include "mtn/mtn.hpp"
#include "mtn/rng.hpp"
#include "mtn/sessions_data.hpp"
#include "mtn/tensor.hpp"
#include "mtn/training.hpp"

using namespace mtn;

namespace {

ModelConfig tiny_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.d_f = 16;
  cfg.d_emb = 8;
  cfg.P = 2;
  cfg.L = 1;
  cfg.L_dec = 1;
  cfg.K = 2;
  cfg.L_levels = {1};
  cfg.dropout = 0.1;
  cfg.warmup_steps = 10;
  cfg.max_query_len = 4;
  cfg.seed = seed;
  return cfg;
}

// Repeat-the-last-query examples over ids 4..9.
std::vector<PairExample> copy_examples(int count, Rng& rng) {
  std::vector<PairExample> examples;
  for (int i = 0; i < count; ++i) {
    std::vector<int> query;
    const std::size_t len = 1 + rng.below(3);
    for (std::size_t t = 0; t < len; ++t) {
      query.push_back(4 + static_cast<int>(rng.below(6)));
    }
    PairExample ex;
    ex.source.push_back(query);
    if (i % 2 == 0) ex.source.push_back(query);
    ex.target = query;
    examples.push_back(std::move(ex));
  }
  return examples;
}

std::string read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.is_open());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_binary(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.is_open());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

std::vector<std::vector<double>> snapshot(NamedTensors& params) {
  std::vector<std::vector<double>> values;
  for (auto& [name, p] : params) values.push_back(p.values());
  return values;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("smoothed cross entropy matches hand-computed values") {
  Tape tape;

  SUBCASE("uniform prediction scores ln V at any smoothing") {
    const std::size_t vocab = 7;
    Tensor log_probs =
        Tensor::full(3, vocab, -std::log(static_cast<double>(vocab)));
    for (double s : {0.0, 0.3}) {
      Tensor loss = label_smoothed_ce(tape, log_probs, {4, 5, 6}, s);
      CHECK(std::abs(loss(0, 0) - std::log(7.0)) <= 1e-12);
    }
  }
  SUBCASE("a confident correct prediction drives the loss to zero") {
    Tensor logits = Tensor::from_rows({{100.0, 0.0, 0.0, 0.0}});
    Tensor log_probs = log_softmax_rows(tape, logits);
    Tensor loss = label_smoothed_ce(tape, log_probs, {0}, 0.0, /*pad_id=*/3);
    CHECK(loss(0, 0) <= 1e-12);
    CHECK(loss(0, 0) >= 0.0);
  }
  SUBCASE("smoothing splits mass between gold and the rest") {
    Tensor log_probs = Tensor::from_rows({{-0.5, -1.5, -2.5, -3.5}});
    const double s = 0.3;
    Tensor loss = label_smoothed_ce(tape, log_probs, {2}, s);
    const double expected =
        -((1.0 - s) * -2.5 + (s / 3.0) * (-0.5 - 1.5 - 3.5));
    CHECK(std::abs(loss(0, 0) - expected) <= 1e-15);
  }
  SUBCASE("pad positions contribute nothing") {
    Tensor base = Tensor::from_rows(
        {{-1.0, -2.0, -0.5, -3.0}, {-0.2, -1.2, -2.2, -3.2}});
    Tensor padded = Tensor::from_rows({{-1.0, -2.0, -0.5, -3.0},
                                       {-0.2, -1.2, -2.2, -3.2},
                                       {-9.0, -9.0, -9.0, -9.0}});
    Tensor a = label_smoothed_ce(tape, base, {2, 1}, 0.1);
    Tensor b = label_smoothed_ce(tape, padded, {2, 1, 0}, 0.1);
    CHECK(std::abs(a(0, 0) - b(0, 0)) <= 1e-12);
  }
  SUBCASE("degenerate inputs are rejected") {
    Tensor lp = Tensor::full(2, 4, -1.0);
    CHECK_THROWS_AS(label_smoothed_ce(tape, lp, {0, 0}, 0.0), EvalError);
    CHECK_THROWS_AS(label_smoothed_ce(tape, lp, {1, 2}, 1.0), ConfigError);
    CHECK_THROWS_AS(label_smoothed_ce(tape, lp, {1, 9}, 0.0), VocabError);
    CHECK_THROWS_AS(label_smoothed_ce(tape, lp, {1}, 0.0), ShapeError);
  }
  SUBCASE("gradient flows through the smoothed loss") {
    Rng rng(3);
    Tensor logits = Tensor::uniform(3, 5, -1.0, 1.0, rng, true);
    auto f = [](Tape& t, const Tensor& x) {
      Tensor lp = log_softmax_rows(t, x);
      return label_smoothed_ce(t, lp, {1, 0, 4}, 0.2);
    };
    CHECK(finite_diff_check(f, logits, 1e-5) < 1e-6);
  }
}

TEST_CASE("the learning-rate schedule warms up then decays") {
  const double crossover = noam_lr(4000, 512, 4000);
  CHECK(std::abs(crossover - 6.988e-4) <= 1e-6);
  CHECK(crossover ==
        std::pow(512.0, -0.5) * std::pow(4000.0, -0.5));

  CHECK(noam_lr(100, 512, 4000) < noam_lr(200, 512, 4000));
  CHECK(noam_lr(3999, 512, 4000) < crossover);
  CHECK(noam_lr(8000, 512, 4000) < crossover);
  CHECK(noam_lr(4001, 512, 4000) < crossover);

  CHECK_THROWS_AS(noam_lr(0, 512, 4000), ConfigError);
  CHECK_THROWS_AS(noam_lr(1, 0, 4000), ConfigError);
}

TEST_CASE("adam updates match a hand-rolled scalar recurrence") {
  Tensor p = Tensor::full(1, 1, 0.7, true);
  NamedTensors params;
  params.emplace_back("w", p);
  OptimizerState state = make_optimizer(params);
  const double lr = 0.01;
  const double grads[3] = {0.4, -0.2, 0.9};

  double x = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    Tape tape;
    Tensor loss = sum_all(tape, mul(tape, p, Tensor::full(1, 1, g)));
    p.zero_grad();
    backward(loss, tape);
    adam_step(params, state, lr);

    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.98, t));
    x -= lr * mhat / (std::sqrt(vhat) + 1e-9);
    CHECK(std::abs(p(0, 0) - x) <= 1e-15);
  }
  CHECK(state.step == 3);
}

TEST_CASE("adam edge behavior: zero gradients, sign direction, bad gradients") {
  SUBCASE("zero gradient leaves parameters in place") {
    Tensor p = Tensor::full(2, 2, 1.5, true);
    NamedTensors params;
    params.emplace_back("w", p);
    OptimizerState state = make_optimizer(params);
    p.zero_grad();
    adam_step(params, state, 0.1);
    CHECK(p(0, 0) == 1.5);
    CHECK(p(1, 1) == 1.5);
    CHECK(state.step == 1);
  }
  SUBCASE("constant positive gradient walks the parameter down") {
    Tensor p = Tensor::full(1, 1, 1.0, true);
    NamedTensors params;
    params.emplace_back("w", p);
    OptimizerState state = make_optimizer(params);
    for (int t = 0; t < 50; ++t) {
      Tape tape;
      Tensor loss = sum_all(tape, mul(tape, p, Tensor::full(1, 1, 2.0)));
      p.zero_grad();
      backward(loss, tape);
      adam_step(params, state, 0.01);
    }
    // In the constant-gradient limit the step is -lr per update.
    CHECK(p(0, 0) < 1.0 - 45 * 0.01);
    CHECK(p(0, 0) > 1.0 - 55 * 0.01);
  }
  SUBCASE("a non-finite gradient aborts naming the parameter") {
    Tensor p = Tensor::full(1, 1, 1.0, true);
    NamedTensors params;
    params.emplace_back("fuse_norm.gain", p);
    OptimizerState state = make_optimizer(params);
    Tape tape;
    Tensor loss = scale(tape, sum_all(tape, mul(tape, p, p)), 1e308);
    p.zero_grad();
    backward(loss, tape);
    try {
      adam_step(params, state, 0.01);
      FAIL("expected EvalError");
    } catch (const EvalError& e) {
      CHECK(std::string(e.what()).find("fuse_norm.gain") != std::string::npos);
    }
  }
}

TEST_CASE("one optimizer step decreases the loss of a convex toy") {
  Rng rng(12);
  Tensor w = Tensor::uniform(6, 5, -0.5, 0.5, rng, true);
  Tensor x = Tensor::uniform(1, 6, -1.0, 1.0, rng);
  NamedTensors params;
  params.emplace_back("w", w);
  OptimizerState state = make_optimizer(params);

  auto loss_value = [&] {
    Tape tape;
    Tensor lp = log_softmax_rows(tape, matmul(tape, x, w));
    return label_smoothed_ce(tape, lp, {3}, 0.0)(0, 0);
  };
  const double before = loss_value();
  Tape tape;
  Tensor lp = log_softmax_rows(tape, matmul(tape, x, w));
  Tensor loss = label_smoothed_ce(tape, lp, {3}, 0.0);
  w.zero_grad();
  backward(loss, tape);
  adam_step(params, state, 1e-3);
  CHECK(loss_value() < before);
}

TEST_CASE("training runs deterministically and respects a zero learning rate") {
  Rng data_rng(77);
  std::vector<PairExample> examples = copy_examples(12, data_rng);

  SUBCASE("zero learning-rate override freezes every parameter") {
    MtnModel model = make_model(tiny_config(4), 12);
    NamedTensors params = named_parameters(model);
    std::vector<std::vector<double>> before = snapshot(params);
    TrainOptions opts;
    opts.epochs = 1;
    opts.batch_capacity = 4;
    opts.lr_override = 0.0;
    TrainResult result = train_loop(model, examples, {}, opts);
    CHECK(result.steps > 0);
    std::vector<std::vector<double>> after = snapshot(params);
    CHECK(before == after);
  }
  SUBCASE("the same seed reproduces the loss trace exactly") {
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_capacity = 4;
    MtnModel first = make_model(tiny_config(4), 12);
    TrainResult a = train_loop(first, examples, {}, opts);
    MtnModel second = make_model(tiny_config(4), 12);
    TrainResult b = train_loop(second, examples, {}, opts);
    REQUIRE(a.step_losses.size() == b.step_losses.size());
    CHECK(a.step_losses == b.step_losses);
    NamedTensors pa = named_parameters(first);
    NamedTensors pb = named_parameters(second);
    CHECK(snapshot(pa) == snapshot(pb));
  }
  SUBCASE("training reduces the loss on the copy task") {
    MtnModel model = make_model(tiny_config(4), 12);
    TrainOptions opts;
    opts.epochs = 8;
    opts.batch_capacity = 4;
    TrainResult result = train_loop(model, examples, {}, opts);
    CHECK(result.epochs.back().train_loss < result.epochs.front().train_loss);
  }
  SUBCASE("an empty corpus is rejected") {
    MtnModel model = make_model(tiny_config(4), 12);
    TrainOptions opts;
    CHECK_THROWS_AS(train_loop(model, {}, {}, opts), ConfigError);
  }
}

TEST_CASE("checkpoints round-trip bitwise and reject damage by kind") {
  const std::string path = "checkpoint_test.mtnc";
  MtnModel model = make_model(tiny_config(9), 16);
  NamedTensors params = named_parameters(model);
  OptimizerState state = make_optimizer(params);
  // Give the optimizer a non-trivial state to round-trip.
  Rng data_rng(5);
  std::vector<PairExample> examples = copy_examples(6, data_rng);
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch_capacity = 2;
  train_loop(model, examples, {}, opts);

  TrainMeta meta;
  meta.rng_state = Rng(123).save_state();
  meta.adam_step = 7;
  meta.epochs_done = 1;
  meta.vocab_size = 16;
  save_checkpoint(path, model, &state, meta);

  SUBCASE("round-trip reproduces tensors, meta, and optimizer bitwise") {
    LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.meta.rng_state == meta.rng_state);
    CHECK(loaded.meta.adam_step == 7);
    CHECK(loaded.meta.epochs_done == 1);
    CHECK(loaded.meta.vocab_size == 16);
    REQUIRE(loaded.has_optimizer);
    CHECK(loaded.opt.step == 7);

    NamedTensors reloaded = named_parameters(loaded.model);
    REQUIRE(reloaded.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      CHECK(reloaded[i].first == params[i].first);
      CHECK(reloaded[i].second.values() == params[i].second.values());
    }
    for (std::size_t i = 0; i < state.m_acc.size(); ++i) {
      CHECK(loaded.opt.m_acc[i].values() == state.m_acc[i].values());
      CHECK(loaded.opt.v_acc[i].values() == state.v_acc[i].values());
    }
  }
  SUBCASE("a checkpoint without optimizer state loads without one") {
    save_checkpoint(path, model, nullptr, meta);
    LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK_FALSE(loaded.has_optimizer);
  }
  SUBCASE("damage is classified") {
    const std::string good = read_binary(path);

    std::string wrong_magic = good;
    wrong_magic[0] = 'X';
    write_binary(path, wrong_magic);
    try {
      load_checkpoint(path);
      FAIL("expected bad_magic");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::bad_magic);
    }

    std::string wrong_version = good;
    wrong_version[4] = 2;
    write_binary(path, wrong_version);
    try {
      load_checkpoint(path);
      FAIL("expected bad_version");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::bad_version);
      CHECK(std::string(e.what()).find("2") != std::string::npos);
      CHECK(std::string(e.what()).find("1") != std::string::npos);
    }

    write_binary(path, good.substr(0, good.size() - 10));
    try {
      load_checkpoint(path);
      FAIL("expected truncated");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::truncated);
    }

    std::string flipped = good;
    flipped[good.size() / 2] = static_cast<char>(flipped[good.size() / 2] ^ 0x40);
    write_binary(path, flipped);
    try {
      load_checkpoint(path);
      FAIL("expected corrupt");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::corrupt);
    }

    CHECK_THROWS_AS(load_checkpoint("missing_dir/missing.mtnc"), IoError);
    write_binary(path, good);
  }
  std::remove(path.c_str());
}

TEST_CASE("a reloaded model continues training exactly like the original") {
  Rng data_rng(31);
  std::vector<PairExample> examples = copy_examples(10, data_rng);
  MtnModel model = make_model(tiny_config(6), 12);
  TrainOptions warmup_opts;
  warmup_opts.epochs = 1;
  warmup_opts.batch_capacity = 4;
  train_loop(model, examples, {}, warmup_opts);

  const std::string path = "checkpoint_resume.mtnc";
  TrainMeta meta;
  meta.rng_state = Rng(0).save_state();
  meta.vocab_size = 12;
  save_checkpoint(path, model, nullptr, meta);
  LoadedCheckpoint loaded = load_checkpoint(path);
  std::remove(path.c_str());

  TrainOptions opts;
  opts.epochs = 2;
  opts.batch_capacity = 4;
  TrainResult a = train_loop(model, examples, {}, opts);
  TrainResult b = train_loop(loaded.model, examples, {}, opts);
  CHECK(a.step_losses == b.step_losses);

  NamedTensors pa = named_parameters(model);
  NamedTensors pb = named_parameters(loaded.model);
  CHECK(snapshot(pa) == snapshot(pb));
}

TEST_CASE("best-validation checkpoints are written when a path is given") {
  Rng data_rng(44);
  std::vector<PairExample> train = copy_examples(10, data_rng);
  std::vector<PairExample> valid = copy_examples(4, data_rng);
  MtnModel model = make_model(tiny_config(8), 12);

  const std::string path = "checkpoint_best.mtnc";
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_capacity = 4;
  opts.checkpoint_path = path;
  TrainResult result = train_loop(model, train, valid, opts);
  CHECK(result.best_epoch >= 1);
  CHECK(result.epochs.size() == 3);
  for (const EpochStats& e : result.epochs) {
    CHECK(std::isfinite(e.valid_loss));
  }

  LoadedCheckpoint best = load_checkpoint(path);
  CHECK(best.has_optimizer);
  CHECK(best.meta.epochs_done == result.best_epoch);
  std::remove(path.c_str());
}

}
