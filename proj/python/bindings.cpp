// Python bindings for the session suggestion library. The surface mirrors
// what the command-line tool uses: config profiles, the data pipeline,
// training, decoding, metrics, checkpoints, and the verification suite.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtn/config.hpp"
#include "mtn/dynamics_oracle.hpp"
#include "mtn/evaluation.hpp"
#include "mtn/mtn.hpp"
#include "mtn/rng.hpp"
#include "mtn/sessions_data.hpp"
#include "mtn/training.hpp"

namespace py = pybind11;
using namespace mtn;

namespace {

// Queries arrive as plain id lists; the model wants fixed-width rows with
// validity flags. Overlong queries are truncated to the model width.
std::vector<EncodedQuery> pad_context(const std::vector<std::vector<int>>& queries,
                                      std::size_t n_max) {
  std::vector<EncodedQuery> out;
  out.reserve(queries.size());
  for (const auto& ids : queries) {
    EncodedQuery q;
    q.ids.assign(n_max, Vocabulary::kPad);
    q.valid.assign(n_max, false);
    const std::size_t len = std::min(ids.size(), n_max);
    for (std::size_t i = 0; i < len; ++i) {
      q.ids[i] = ids[i];
      q.valid[i] = true;
    }
    out.push_back(std::move(q));
  }
  return out;
}

std::size_t effective_len(const MtnModel& model, std::size_t max_len) {
  return max_len > 0 ? max_len
                     : static_cast<std::size_t>(model.cfg.max_query_len);
}

}  // namespace

PYBIND11_MODULE(_pymtn, m) {
  m.doc() =
      "Session-aware query suggestion: a hierarchical transformer over the "
      "queries of a search session, with training, decoding, metrics, and a "
      "closed-form verification suite.";
  m.attr("__version__") = "0.1.0";

  py::enum_<AttentionMode>(m, "AttentionMode")
      .value("concat", AttentionMode::concat)
      .value("weighted", AttentionMode::weighted);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d", &ModelConfig::d)
      .def_readwrite("d_f", &ModelConfig::d_f)
      .def_readwrite("d_emb", &ModelConfig::d_emb)
      .def_readwrite("P", &ModelConfig::P)
      .def_readwrite("L", &ModelConfig::L)
      .def_readwrite("L_dec", &ModelConfig::L_dec)
      .def_readwrite("K", &ModelConfig::K)
      .def_readwrite("L_levels", &ModelConfig::L_levels)
      .def_readwrite("level_group_caps", &ModelConfig::level_group_caps)
      .def_readwrite("session_d_f", &ModelConfig::session_d_f)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("label_smoothing", &ModelConfig::label_smoothing)
      .def_readwrite("warmup_steps", &ModelConfig::warmup_steps)
      .def_readwrite("max_query_len", &ModelConfig::max_query_len)
      .def_readwrite("attention_mode", &ModelConfig::attention_mode)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_static("desk_profile", &ModelConfig::desk_profile)
      .def("validate", &ModelConfig::validate)
      .def("to_json", &ModelConfig::to_json)
      .def_static("from_json",
                  py::overload_cast<const std::string&>(&ModelConfig::from_json),
                  py::arg("text"))
      .def_static("from_json",
                  py::overload_cast<const std::string&, const ModelConfig&>(
                      &ModelConfig::from_json),
                  py::arg("text"), py::arg("base"))
      .def("__repr__", &ModelConfig::to_json);

  m.def("load_config", &load_config, py::arg("path"),
        py::arg("base") = ModelConfig{});

  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("next", &Rng::next)
      .def("below", &Rng::below, py::arg("n"))
      .def("uniform", py::overload_cast<>(&Rng::uniform));

  // --- Data pipeline -------------------------------------------------------

  py::class_<LogRecord>(m, "LogRecord")
      .def(py::init<>())
      .def_readwrite("anon_id", &LogRecord::anon_id)
      .def_readwrite("query", &LogRecord::query)
      .def_readwrite("timestamp", &LogRecord::timestamp);

  m.def("parse_log_file",
        [](const std::string& path) { return parse_log_file(path); },
        py::arg("path"));
  m.def("sort_records",
        [](std::vector<LogRecord> records) {
          sort_records(records);
          return records;
        },
        py::arg("records"),
        "Returns the records ordered by user, then time, keeping input order "
        "for ties.");

  py::class_<RawSession>(m, "RawSession")
      .def(py::init<>())
      .def_readwrite("user", &RawSession::user)
      .def_readwrite("queries", &RawSession::queries);

  m.def("sessionize", &sessionize, py::arg("records"),
        py::arg("gap_seconds") = 30 * 60);

  py::class_<Session>(m, "Session")
      .def(py::init<>())
      .def_readwrite("user", &Session::user)
      .def_readwrite("queries", &Session::queries);

  m.def("filter_and_normalize", &filter_and_normalize, py::arg("raw"),
        py::arg("max_tokens") = 10, py::arg("min_len") = 3,
        py::arg("max_len") = 5);

  py::class_<Vocabulary> vocab(m, "Vocabulary");
  vocab.def(py::init<>())
      .def("__len__", &Vocabulary::size)
      .def("size", &Vocabulary::size)
      .def("id_of", &Vocabulary::id_of, py::arg("token"))
      .def("token_of", &Vocabulary::token_of, py::arg("id"))
      .def("count_of", &Vocabulary::count_of, py::arg("token"))
      .def("contains", &Vocabulary::contains, py::arg("token"))
      .def("__contains__", &Vocabulary::contains)
      .def("encode", &Vocabulary::encode, py::arg("tokens"))
      .def("decode", &Vocabulary::decode, py::arg("ids"))
      .def("to_text", &Vocabulary::to_text)
      .def_static("from_text", &Vocabulary::from_text, py::arg("text"))
      .def("save_file", &Vocabulary::save_file, py::arg("path"))
      .def_static("load_file", &Vocabulary::load_file, py::arg("path"));
  vocab.attr("PAD") = py::int_(Vocabulary::kPad);
  vocab.attr("UNK") = py::int_(Vocabulary::kUnk);
  vocab.attr("BOS") = py::int_(Vocabulary::kBos);
  vocab.attr("EOS") = py::int_(Vocabulary::kEos);

  m.def("build_vocab", &build_vocab, py::arg("train_sessions"),
        py::arg("min_count") = 8);

  py::class_<PairExample>(m, "PairExample")
      .def(py::init<>())
      .def(py::init([](std::vector<std::vector<int>> source,
                       std::vector<int> target) {
             return PairExample{std::move(source), std::move(target)};
           }),
           py::arg("source"), py::arg("target"))
      .def_readwrite("source", &PairExample::source)
      .def_readwrite("target", &PairExample::target);

  m.def("unroll_pairs",
        py::overload_cast<const Session&, const Vocabulary&>(&unroll_pairs),
        py::arg("session"), py::arg("vocab"));
  m.def("unroll_pairs",
        py::overload_cast<const std::vector<Session>&, const Vocabulary&>(
            &unroll_pairs),
        py::arg("sessions"), py::arg("vocab"));

  py::class_<SplitRatios>(m, "SplitRatios")
      .def(py::init<>())
      .def_readwrite("train", &SplitRatios::train)
      .def_readwrite("valid", &SplitRatios::valid)
      .def_readwrite("test", &SplitRatios::test);

  py::class_<SplitSessions>(m, "SplitSessions")
      .def_readonly("train", &SplitSessions::train)
      .def_readonly("valid", &SplitSessions::valid)
      .def_readonly("test", &SplitSessions::test);

  m.def("split_sessions", &split_sessions, py::arg("sessions"),
        py::arg("ratios"), py::arg("rng"));

  m.def("sessions_to_text", &sessions_to_text, py::arg("sessions"));
  m.def("sessions_from_text", &sessions_from_text, py::arg("text"));
  m.def("save_sessions", &save_sessions, py::arg("path"), py::arg("sessions"));
  m.def("load_sessions", &load_sessions, py::arg("path"));

  // --- Model, training, decoding -------------------------------------------

  py::class_<MtnModel>(m, "MtnModel")
      .def_property_readonly("cfg",
                             [](const MtnModel& model) { return model.cfg; })
      .def_readonly("vocab_size", &MtnModel::vocab_size);

  m.def("make_model", &make_model, py::arg("cfg"), py::arg("vocab_size"));
  m.def("clone_model", &clone_model, py::arg("model"));

  py::class_<TrainOptions>(m, "TrainOptions")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainOptions::epochs)
      .def_readwrite("batch_capacity", &TrainOptions::batch_capacity)
      .def_readwrite("lr_override", &TrainOptions::lr_override)
      .def_readwrite("max_steps", &TrainOptions::max_steps)
      .def_readwrite("checkpoint_path", &TrainOptions::checkpoint_path)
      .def_readwrite("label_smoothing", &TrainOptions::label_smoothing);

  py::class_<EpochStats>(m, "EpochStats")
      .def_readonly("epoch", &EpochStats::epoch)
      .def_readonly("train_loss", &EpochStats::train_loss)
      .def_readonly("valid_loss", &EpochStats::valid_loss)
      .def_readonly("steps", &EpochStats::steps);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("epochs", &TrainResult::epochs)
      .def_readonly("step_losses", &TrainResult::step_losses)
      .def_readonly("best_valid", &TrainResult::best_valid)
      .def_readonly("best_epoch", &TrainResult::best_epoch)
      .def_readonly("steps", &TrainResult::steps);

  m.def("train_loop", &train_loop, py::arg("model"), py::arg("train"),
        py::arg("valid"), py::arg("opts"),
        py::call_guard<py::gil_scoped_release>());
  m.def("corpus_loss", &corpus_loss, py::arg("model"), py::arg("examples"),
        py::call_guard<py::gil_scoped_release>());

  m.def("greedy_decode",
        [](const MtnModel& model, const std::vector<std::vector<int>>& context,
           std::size_t max_len) {
          const std::size_t n_max =
              static_cast<std::size_t>(model.cfg.max_query_len);
          return greedy_decode(model, pad_context(context, n_max),
                               effective_len(model, max_len));
        },
        py::arg("model"), py::arg("context"), py::arg("max_len") = 0,
        "Argmax decoding of the next query given the session's previous "
        "queries as id lists. max_len 0 means the model's query width.");
  m.def("beam_decode",
        [](const MtnModel& model, const std::vector<std::vector<int>>& context,
           std::size_t width, std::size_t max_len) {
          const std::size_t n_max =
              static_cast<std::size_t>(model.cfg.max_query_len);
          return beam_decode(model, pad_context(context, n_max), width,
                             effective_len(model, max_len));
        },
        py::arg("model"), py::arg("context"), py::arg("width") = 4,
        py::arg("max_len") = 0);
  m.def("beam_suggestions",
        [](const MtnModel& model, const std::vector<std::vector<int>>& context,
           std::size_t width, std::size_t max_len, std::size_t count) {
          const std::size_t n_max =
              static_cast<std::size_t>(model.cfg.max_query_len);
          return beam_suggestions(model, pad_context(context, n_max), width,
                                  effective_len(model, max_len), count);
        },
        py::arg("model"), py::arg("context"), py::arg("width") = 4,
        py::arg("max_len") = 0, py::arg("count") = 4);

  // --- Metrics --------------------------------------------------------------

  py::class_<PrecisionResult>(m, "PrecisionResult")
      .def_readonly("value", &PrecisionResult::value)
      .def_readonly("degenerate", &PrecisionResult::degenerate)
      .def("__repr__", [](const PrecisionResult& r) {
        return "PrecisionResult(value=" + std::to_string(r.value) +
               ", degenerate=" + (r.degenerate ? std::string("True") : "False") +
               ")";
      });

  m.def("ngram_precision", &ngram_precision, py::arg("candidates"),
        py::arg("references"), py::arg("order"));
  m.def("bleu", &bleu, py::arg("candidates"), py::arg("references"),
        py::arg("max_order") = 4, py::arg("add_one") = false);

  py::class_<MetricsReport>(m, "MetricsReport")
      .def_readonly("p1", &MetricsReport::p1)
      .def_readonly("p2", &MetricsReport::p2)
      .def_readonly("p3", &MetricsReport::p3)
      .def_readonly("p4", &MetricsReport::p4)
      .def_readonly("bleu_score", &MetricsReport::bleu_score)
      .def("to_line", &MetricsReport::to_line)
      .def("to_json", &MetricsReport::to_json)
      .def("__repr__", &MetricsReport::to_line);

  m.def("evaluate_corpus", &evaluate_corpus, py::arg("candidates"),
        py::arg("references"), py::arg("add_one") = false);

  // --- Checkpoints and verification ----------------------------------------

  py::class_<TrainMeta>(m, "TrainMeta")
      .def(py::init<>())
      .def_readwrite("rng_state", &TrainMeta::rng_state)
      .def_readwrite("adam_step", &TrainMeta::adam_step)
      .def_readwrite("epochs_done", &TrainMeta::epochs_done)
      .def_readwrite("vocab_size", &TrainMeta::vocab_size);

  m.def("save_checkpoint",
        [](const std::string& path, const MtnModel& model, TrainMeta meta) {
          if (meta.vocab_size == 0) meta.vocab_size = model.vocab_size;
          save_checkpoint(path, model, nullptr, meta);
        },
        py::arg("path"), py::arg("model"), py::arg("meta") = TrainMeta{});

  py::class_<LoadedCheckpoint>(m, "LoadedCheckpoint")
      .def_readonly("model", &LoadedCheckpoint::model)
      .def_readonly("has_optimizer", &LoadedCheckpoint::has_optimizer)
      .def_readonly("meta", &LoadedCheckpoint::meta);

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def("run_verification_suite",
        [](std::uint64_t seed, int trials) {
          bool pass = false;
          std::string text;
          {
            py::gil_scoped_release release;
            VerificationReport report = run_verification_suite(seed, trials);
            pass = report.pass;
            text = report.to_text();
          }
          return std::make_pair(pass, text);
        },
        py::arg("seed") = 0, py::arg("trials") = 25,
        "Runs the closed-form evolution checks on seeded random instances "
        "and returns (pass, report_text).");
}
