#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtn/config.hpp"
#include "mtn/dynamics_oracle.hpp"
#include "mtn/errors.hpp"
#include "mtn/evaluation.hpp"
#include "mtn/mtn.hpp"
#include "mtn/rng.hpp"
#include "mtn/sessions_data.hpp"
#include "mtn/training.hpp"
#include "mtn/transformer.hpp"

using namespace mtn;

namespace {

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel g_log_level = LogLevel::info;

void init_log_level() {
  const char* raw = std::getenv("MTN_LOG");
  if (raw == nullptr) return;
  const std::string value = raw;
  if (value == "error") {
    g_log_level = LogLevel::error;
  } else if (value == "info") {
    g_log_level = LogLevel::info;
  } else if (value == "debug") {
    g_log_level = LogLevel::debug;
  } else {
    std::cerr << "[error] MTN_LOG must be error, info, or debug; got \""
              << value << "\", keeping info\n";
  }
}

void log_info(const std::string& msg) {
  if (g_log_level >= LogLevel::info) std::cerr << "[info] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (g_log_level >= LogLevel::debug) std::cerr << "[debug] " << msg << "\n";
}

EncodedQuery pad_query(const std::vector<int>& ids, std::size_t n_max) {
  EncodedQuery q;
  q.ids.assign(n_max, Vocabulary::kPad);
  q.valid.assign(n_max, false);
  const std::size_t keep = std::min(ids.size(), n_max);
  for (std::size_t i = 0; i < keep; ++i) {
    q.ids[i] = ids[i];
    q.valid[i] = true;
  }
  return q;
}

std::vector<EncodedQuery> pad_queries(const std::vector<std::vector<int>>& qs,
                                      std::size_t n_max) {
  std::vector<EncodedQuery> out;
  out.reserve(qs.size());
  for (const auto& ids : qs) out.push_back(pad_query(ids, n_max));
  return out;
}

// Same normalization the preparation pipeline applies: lowercase, split on
// whitespace.
std::vector<std::string> tokenize_lower(const std::string& text) {
  std::string lowered = text;
  for (char& c : lowered) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  std::istringstream in(lowered);
  std::vector<std::string> tokens;
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

std::string render_suggestion(const Vocabulary& vocab,
                              const std::vector<int>& ids) {
  if (ids.empty()) return "<eos>";
  std::string out;
  for (const std::string& tok : vocab.decode(ids)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

struct PrepareArgs {
  std::string input;
  std::string out_dir;
  double gap_minutes = 30.0;
  std::size_t min_len = 3;
  std::size_t max_len = 5;
  std::size_t max_query_len = 10;
  int min_count = 8;
  double valid_ratio = 0.025;
  double test_ratio = 0.025;
  std::uint64_t seed = 0;
};

int run_prepare(const PrepareArgs& args) {
  ParseStats stats;
  std::vector<LogRecord> records = parse_log_file(args.input, &stats);
  log_info("parsed " + std::to_string(stats.records) + " records from " +
           std::to_string(stats.lines) + " lines (" +
           std::to_string(stats.malformed) + " malformed)");
  sort_records(records);
  const auto gap = static_cast<std::int64_t>(args.gap_minutes * 60.0);
  std::vector<RawSession> raw = sessionize(records, gap);
  std::vector<Session> sessions =
      filter_and_normalize(raw, args.max_query_len, args.min_len, args.max_len);
  log_info(std::to_string(raw.size()) + " raw sessions, " +
           std::to_string(sessions.size()) + " kept after filtering");

  Rng rng(args.seed);
  SplitRatios ratios;
  ratios.valid = args.valid_ratio;
  ratios.test = args.test_ratio;
  ratios.train = 1.0 - args.valid_ratio - args.test_ratio;
  SplitSessions split = split_sessions(sessions, ratios, rng);
  Vocabulary vocab = build_vocab(split.train, args.min_count);

  std::filesystem::create_directories(args.out_dir);
  save_sessions(args.out_dir + "/train.tsv", split.train);
  save_sessions(args.out_dir + "/valid.tsv", split.valid);
  save_sessions(args.out_dir + "/test.tsv", split.test);
  vocab.save_file(args.out_dir + "/vocab.tsv");

  std::cout << "sessions: " << split.train.size() << " train, "
            << split.valid.size() << " valid, " << split.test.size()
            << " test\n"
            << "vocabulary: " << vocab.size() << " ids\n"
            << "wrote " << args.out_dir << "/{train,valid,test,vocab}.tsv\n";
  return 0;
}

struct TrainArgs {
  std::string config_path;
  std::string profile = "full";
  std::string data_dir;
  std::string out_path = "model.ckpt";
  int epochs = 5;
  std::size_t batch_capacity = 32;
  double lr = -1.0;
  std::int64_t max_steps = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int run_train(const TrainArgs& args) {
  ModelConfig base =
      args.profile == "desk" ? ModelConfig::desk_profile() : ModelConfig{};
  ModelConfig cfg =
      args.config_path.empty() ? base : load_config(args.config_path, base);
  if (args.seed_given) cfg.seed = args.seed;

  Vocabulary vocab = Vocabulary::load_file(args.data_dir + "/vocab.tsv");
  std::vector<Session> train_sessions =
      load_sessions(args.data_dir + "/train.tsv");
  std::vector<Session> valid_sessions;
  if (std::filesystem::exists(args.data_dir + "/valid.tsv")) {
    valid_sessions = load_sessions(args.data_dir + "/valid.tsv");
  }
  std::vector<PairExample> train_examples = unroll_pairs(train_sessions, vocab);
  std::vector<PairExample> valid_examples = unroll_pairs(valid_sessions, vocab);
  log_info(std::to_string(train_examples.size()) + " training examples, " +
           std::to_string(valid_examples.size()) + " validation examples, " +
           std::to_string(vocab.size()) + " vocabulary ids");

  MtnModel model = make_model(cfg, vocab.size());
  TrainOptions opts;
  opts.epochs = args.epochs;
  opts.batch_capacity = args.batch_capacity;
  opts.lr_override = args.lr;
  opts.max_steps = args.max_steps;
  opts.checkpoint_path = args.out_path;
  opts.label_smoothing = cfg.label_smoothing;

  TrainResult result = train_loop(model, train_examples, valid_examples, opts);
  for (const EpochStats& epoch : result.epochs) {
    std::cout << "epoch " << epoch.epoch << " train_loss=" << epoch.train_loss
              << " valid_loss=" << epoch.valid_loss << " steps=" << epoch.steps
              << "\n";
  }
  std::cout << "best valid_loss=" << result.best_valid << " at epoch "
            << result.best_epoch << ", " << result.steps
            << " optimizer steps, checkpoint " << args.out_path << "\n";
  return 0;
}

struct EvaluateArgs {
  std::string model_path;
  std::string data_dir;
  std::string split = "test";
  std::size_t beam = 1;
  std::size_t max_len = 0;
  bool json = false;
};

int run_evaluate(const EvaluateArgs& args) {
  LoadedCheckpoint loaded = load_checkpoint(args.model_path);
  const MtnModel& model = loaded.model;
  Vocabulary vocab = Vocabulary::load_file(args.data_dir + "/vocab.tsv");
  if (vocab.size() != model.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                      " ids but the checkpoint was trained with " +
                      std::to_string(model.vocab_size));
  }
  std::vector<Session> sessions =
      load_sessions(args.data_dir + "/" + args.split + ".tsv");
  std::vector<PairExample> examples = unroll_pairs(sessions, vocab);
  if (examples.empty()) {
    throw EvalError("evaluate: split \"" + args.split + "\" has no examples");
  }

  const auto n_max = static_cast<std::size_t>(model.cfg.max_query_len);
  const std::size_t max_len = args.max_len > 0 ? args.max_len : n_max;
  std::vector<std::vector<int>> candidates;
  std::vector<std::vector<int>> references;
  candidates.reserve(examples.size());
  references.reserve(examples.size());
  for (const PairExample& ex : examples) {
    std::vector<EncodedQuery> context = pad_queries(ex.source, n_max);
    candidates.push_back(args.beam > 1
                             ? beam_decode(model, context, args.beam, max_len)
                             : greedy_decode(model, context, max_len));
    references.push_back(ex.target);
  }
  log_info("decoded " + std::to_string(candidates.size()) + " prefixes from " +
           std::to_string(sessions.size()) + " sessions");
  log_info("cross entropy " + std::to_string(corpus_loss(model, examples)));

  MetricsReport report = evaluate_corpus(candidates, references);
  std::cout << (args.json ? report.to_json() : report.to_line()) << "\n";
  return 0;
}

struct SuggestArgs {
  std::string model_path;
  std::string vocab_path;
  std::size_t beam = 8;
  std::size_t top_k = 3;
  std::size_t max_len = 0;
  bool interactive = false;
};

int run_suggest(const SuggestArgs& args) {
  LoadedCheckpoint loaded = load_checkpoint(args.model_path);
  const MtnModel& model = loaded.model;
  Vocabulary vocab = Vocabulary::load_file(args.vocab_path);
  if (vocab.size() != model.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                      " ids but the checkpoint was trained with " +
                      std::to_string(model.vocab_size));
  }
  const auto n_max = static_cast<std::size_t>(model.cfg.max_query_len);
  const std::size_t max_len = args.max_len > 0 ? args.max_len : n_max;

  auto encode_query = [&](const std::string& text) {
    std::vector<std::string> tokens = tokenize_lower(text);
    if (tokens.size() > n_max) {
      log_debug("query truncated to " + std::to_string(n_max) + " tokens");
      tokens.resize(n_max);
    }
    return vocab.encode(tokens);
  };
  auto rank = [&](const std::vector<std::vector<int>>& context_ids) {
    std::vector<EncodedQuery> context = pad_queries(context_ids, n_max);
    return beam_suggestions(model, context, args.beam, max_len, args.top_k);
  };

  if (!args.interactive) {
    // Batch mode: one session per input line, queries separated by tabs;
    // one output line with the ranked suggestions separated by tabs.
    std::string line;
    while (std::getline(std::cin, line)) {
      if (tokenize_lower(line).empty()) {
        std::cout << "\n";
        continue;
      }
      std::vector<std::vector<int>> context_ids;
      std::istringstream fields(line);
      std::string query;
      while (std::getline(fields, query, '\t')) {
        if (!tokenize_lower(query).empty()) {
          context_ids.push_back(encode_query(query));
        }
      }
      std::string out;
      for (const auto& suggestion : rank(context_ids)) {
        if (!out.empty()) out += '\t';
        out += render_suggestion(vocab, suggestion);
      }
      std::cout << out << "\n";
    }
    return 0;
  }

  log_info("one query per line; :reset clears the session, :quit exits");
  std::vector<std::vector<int>> context_ids;
  std::string line;
  while (true) {
    std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (tokenize_lower(line).empty()) continue;
    if (line == ":quit") break;
    if (line == ":reset") {
      context_ids.clear();
      log_info("session cleared");
      continue;
    }
    context_ids.push_back(encode_query(line));
    std::size_t place = 0;
    for (const auto& suggestion : rank(context_ids)) {
      std::cout << ++place << ". " << render_suggestion(vocab, suggestion)
                << "\n";
    }
  }
  return 0;
}

struct VerifyArgs {
  std::uint64_t seed = 0;
  int trials = 100;
};

int run_verify(const VerifyArgs& args) {
  VerificationReport report = run_verification_suite(args.seed, args.trials);
  std::cout << report.to_text();
  return report.pass ? 0 : 3;
}

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double step = 1e-4;
  double tolerance = 1e-4;
};

// Central-difference check of one parameter tensor of the toy model. The
// analytic side runs backward once; the numeric side perturbs the parameter
// storage in place, one coordinate at a time.
double sweep_parameter(MtnModel& model, const EncodedSession& session,
                       const Tensor& weights, Tensor param, double h) {
  auto loss_value = [&]() {
    Tape tape;
    Tensor out = mtn_forward(tape, session, model, RunMode::eval());
    return sum_all(tape, mul(tape, out, weights))(0, 0);
  };

  for (auto& [name, tensor] : named_parameters(model)) {
    (void)name;
    tensor.zero_grad();
  }
  Tape tape;
  Tensor out = mtn_forward(tape, session, model, RunMode::eval());
  Tensor loss = sum_all(tape, mul(tape, out, weights));
  tape.backward(loss);
  const std::vector<double> analytic = param.grad();

  double worst = 0.0;
  const std::vector<double> base = param.values();
  std::vector<double> probe = base;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    probe[k] = base[k] + h;
    param.assign_values(probe);
    const double up = loss_value();
    probe[k] = base[k] - h;
    param.assign_values(probe);
    const double down = loss_value();
    probe[k] = base[k];
    const double numeric = (up - down) / (2.0 * h);
    const double gap = std::abs(analytic[k] - numeric);
    // Coordinates whose gradient sits at the roundoff floor of the loss give
    // meaningless relative errors; an absolute agreement this tight passes.
    if (gap <= 1e-8) continue;
    const double err =
        gap / (std::abs(analytic[k]) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  param.assign_values(base);
  return worst;
}

int run_gradcheck(const GradcheckArgs& args) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.d_f = 16;
  cfg.d_emb = 8;
  cfg.P = 2;
  cfg.L = 1;
  cfg.L_dec = 1;
  cfg.K = 2;
  cfg.L_levels = {1};
  cfg.dropout = 0.0;
  cfg.max_query_len = 3;
  cfg.seed = args.seed;
  const std::size_t vocab = 12;
  MtnModel model = make_model(cfg, vocab);

  EncodedSession session;
  session.queries = pad_queries({{4, 5, 6}, {7, 8, 9}}, 3);
  session.target = {Vocabulary::kBos, 6, 9, Vocabulary::kEos};
  Rng rng(derive_seed(args.seed, 17));
  const Tensor weights = Tensor::uniform(
      static_cast<std::size_t>(session.target.size() - 1), vocab, -1.0, 1.0, rng);

  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t checked = 0;
  for (auto& [name, param] : named_parameters(model)) {
    const double err = sweep_parameter(model, session, weights, param, args.step);
    log_debug(name + " relative error " + std::to_string(err));
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
    ++checked;
  }
  std::cout << "checked " << checked << " parameter tensors, worst relative "
            << "error " << worst << " (" << worst_name << "), tolerance "
            << args.tolerance << "\n";
  if (worst >= args.tolerance) {
    std::cerr << "gradient check failed\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  init_log_level();
  CLI::App app{"Multiresolution transformer for session-based query suggestion"};
  app.require_subcommand(1);

  PrepareArgs prep;
  CLI::App* prepare = app.add_subcommand(
      "prepare", "Turn a query log into session files and a vocabulary");
  prepare->add_option("--input", prep.input, "Tab-separated query log")
      ->required()
      ->check(CLI::ExistingFile);
  prepare->add_option("--out", prep.out_dir, "Output directory")->required();
  prepare->add_option("--gap-minutes", prep.gap_minutes,
                      "Inactivity that closes a session")->capture_default_str();
  prepare->add_option("--min-len", prep.min_len, "Minimum queries per session")->capture_default_str();
  prepare->add_option("--max-len", prep.max_len, "Maximum queries per session")->capture_default_str();
  prepare->add_option("--max-query-len", prep.max_query_len,
                      "Drop queries with more tokens than this")->capture_default_str();
  prepare->add_option("--min-count", prep.min_count,
                      "Keep tokens seen at least this often")->capture_default_str();
  prepare->add_option("--valid-ratio", prep.valid_ratio,
                      "Fraction of sessions held out for validation")->capture_default_str();
  prepare->add_option("--test-ratio", prep.test_ratio,
                      "Fraction of sessions held out for testing")->capture_default_str();
  prepare->add_option("--seed", prep.seed, "Split shuffle seed")->capture_default_str();

  TrainArgs tr;
  CLI::App* train =
      app.add_subcommand("train", "Train a model on prepared sessions");
  train->add_option("--config", tr.config_path,
                    "JSON model config; missing keys take profile defaults");
  train->add_option("--profile", tr.profile,
                    "Baseline hyperparameters: full or desk")->capture_default_str()
      ->check(CLI::IsMember({"full", "desk"}));
  train->add_option("--data", tr.data_dir, "Directory written by prepare")
      ->required();
  train->add_option("--out", tr.out_path, "Checkpoint path")->capture_default_str();
  train->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  train->add_option("--batch-capacity", tr.batch_capacity,
                    "Examples per batch")->capture_default_str();
  train->add_option("--lr", tr.lr,
                    "Fixed learning rate; negative uses the warmup schedule")->capture_default_str();
  train->add_option("--max-steps", tr.max_steps,
                    "Stop after this many optimizer steps; 0 means no cap")->capture_default_str();
  CLI::Option* seed_opt =
      train->add_option("--seed", tr.seed, "Overrides the config seed");

  EvaluateArgs ev;
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "Score a checkpoint on a prepared split");
  evaluate->add_option("--model", ev.model_path, "Checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--data", ev.data_dir, "Directory written by prepare")
      ->required();
  evaluate->add_option("--split", ev.split, "Which split to score")->capture_default_str()
      ->check(CLI::IsMember({"train", "valid", "test"}));
  evaluate->add_option("--beam", ev.beam,
                       "Beam width; 1 means greedy decoding")->capture_default_str();
  evaluate->add_option("--max-len", ev.max_len,
                       "Suggestion length cap; 0 uses the model's query length")->capture_default_str();
  evaluate->add_flag("--json", ev.json, "Print the report as JSON");

  SuggestArgs sug;
  CLI::App* suggest = app.add_subcommand(
      "suggest", "Produce next-query suggestions for sessions");
  suggest->add_option("--model", sug.model_path, "Checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  suggest->add_option("--vocab", sug.vocab_path, "Vocabulary file")
      ->required()
      ->check(CLI::ExistingFile);
  suggest->add_option("--beam", sug.beam, "Beam width")->capture_default_str();
  suggest->add_option("--top-k", sug.top_k, "Suggestions per session")->capture_default_str();
  suggest->add_option("--max-len", sug.max_len,
                      "Suggestion length cap; 0 uses the model's query length")->capture_default_str();
  suggest->add_flag("--interactive", sug.interactive,
                    "Read one query per line, growing the session");

  VerifyArgs ver;
  CLI::App* verify = app.add_subcommand(
      "verify", "Check the dynamics identities on random instances");
  verify->add_option("--seed", ver.seed, "Base seed")->capture_default_str();
  verify->add_option("--trials", ver.trials, "Instances per property")->capture_default_str();

  GradcheckArgs gc;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "Finite-difference sweep over a toy model's parameters");
  gradcheck->add_option("--seed", gc.seed, "Model init seed")->capture_default_str();
  gradcheck->add_option("--step", gc.step, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance,
                        "Worst accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\nRun with --help for usage.\n";
    return 2;
  }

  try {
    if (*prepare) return run_prepare(prep);
    if (*train) {
      tr.seed_given = seed_opt->count() > 0;
      return run_train(tr);
    }
    if (*evaluate) return run_evaluate(ev);
    if (*suggest) return run_suggest(sug);
    if (*verify) return run_verify(ver);
    if (*gradcheck) return run_gradcheck(gc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
