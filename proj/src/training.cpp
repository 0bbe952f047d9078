#include "mtn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "mtn/errors.hpp"

namespace mtn {

using nlohmann::json;

Tensor label_smoothed_ce(Tape& tape, const Tensor& log_probs,
                         const std::vector<int>& targets, double smoothing,
                         int pad_id) {
  const std::size_t m = log_probs.rows();
  const std::size_t vocab = log_probs.cols();
  if (targets.size() != m) {
    throw ShapeError("label_smoothed_ce: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(m) + " score rows");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("label_smoothed_ce: smoothing must lie in [0, 1)");
  }
  if (smoothing > 0.0 && vocab < 2) {
    throw ConfigError("label_smoothed_ce: smoothing needs at least 2 classes");
  }

  std::vector<double> weights(m * vocab, 0.0);
  std::size_t live = 0;
  const double off_mass =
      vocab > 1 ? smoothing / static_cast<double>(vocab - 1) : 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int gold = targets[i];
    if (gold == pad_id) continue;
    if (gold < 0 || static_cast<std::size_t>(gold) >= vocab) {
      throw VocabError("label_smoothed_ce: target id " + std::to_string(gold) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    ++live;
    for (std::size_t j = 0; j < vocab; ++j) weights[i * vocab + j] = off_mass;
    weights[i * vocab + static_cast<std::size_t>(gold)] = 1.0 - smoothing;
  }
  if (live == 0) {
    throw EvalError("label_smoothed_ce: every target position is padding");
  }
  Tensor target_dist = Tensor::from_data(m, vocab, std::move(weights));
  Tensor weighted = mul(tape, target_dist, log_probs);
  return scale(tape, sum_all(tape, weighted), -1.0 / static_cast<double>(live));
}

double noam_lr(std::int64_t step, int d, int warmup) {
  if (step < 1) {
    throw ConfigError("noam_lr: step must be at least 1, got " +
                      std::to_string(step));
  }
  if (d < 1 || warmup < 1) {
    throw ConfigError("noam_lr: width and warmup must be positive");
  }
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

OptimizerState make_optimizer(const NamedTensors& params) {
  OptimizerState state;
  state.m_acc.reserve(params.size());
  state.v_acc.reserve(params.size());
  for (const auto& [name, p] : params) {
    (void)name;
    state.m_acc.push_back(Tensor::zeros(p.rows(), p.cols()));
    state.v_acc.push_back(Tensor::zeros(p.rows(), p.cols()));
  }
  return state;
}

void adam_step(NamedTensors& params, OptimizerState& state, double lr) {
  if (params.size() != state.m_acc.size()) {
    throw ShapeError(
        "adam_step: optimizer state was built for a different parameter list");
  }
  double sq_norm = 0.0;
  for (const auto& [name, p] : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) {
        throw EvalError("adam_step: non-finite gradient in " + name);
      }
      sq_norm += g * g;
    }
  }
  double grad_scale = 1.0;
  if (state.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > state.clip_norm) grad_scale = state.clip_norm / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    const std::vector<double>& g = p.grad();
    std::vector<double> m = state.m_acc[i].values();
    std::vector<double> v = state.v_acc[i].values();
    std::vector<double> x = p.values();
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = g[k] * grad_scale;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      x[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.eps);
    }
    state.m_acc[i].assign_values(m);
    state.v_acc[i].assign_values(v);
    p.assign_values(x);
  }
}

namespace {

EncodedQuery pad_query(const std::vector<int>& ids, std::size_t n_max) {
  if (ids.empty() || ids.size() > n_max) {
    throw FormatError("pad_query: query of " + std::to_string(ids.size()) +
                      " tokens outside 1.." + std::to_string(n_max));
  }
  EncodedQuery q;
  q.ids = ids;
  q.ids.resize(n_max, Vocabulary::kPad);
  q.valid.assign(ids.size(), true);
  q.valid.resize(n_max, false);
  return q;
}

EncodedSession to_session(const PairExample& ex, std::size_t n_max) {
  if (ex.target.empty() || ex.target.size() > n_max) {
    throw FormatError("to_session: target of " + std::to_string(ex.target.size()) +
                      " tokens outside 1.." + std::to_string(n_max));
  }
  EncodedSession session;
  for (const auto& q : ex.source) session.queries.push_back(pad_query(q, n_max));
  session.target.reserve(ex.target.size() + 2);
  session.target.push_back(Vocabulary::kBos);
  session.target.insert(session.target.end(), ex.target.begin(), ex.target.end());
  session.target.push_back(Vocabulary::kEos);
  return session;
}

std::vector<int> expected_tokens(const std::vector<int>& target_with_bos) {
  return std::vector<int>(target_with_bos.begin() + 1, target_with_bos.end());
}

}  // namespace

double corpus_loss(const MtnModel& model,
                   const std::vector<PairExample>& examples) {
  if (examples.empty()) {
    throw EvalError("corpus_loss: no examples to score");
  }
  const std::size_t n_max = static_cast<std::size_t>(model.cfg.max_query_len);
  double total = 0.0;
  std::size_t tokens = 0;
  for (const PairExample& ex : examples) {
    Tape tape;
    EncodedSession session = to_session(ex, n_max);
    Tensor log_probs = mtn_forward(tape, session, model, RunMode::eval());
    std::vector<int> expected = expected_tokens(session.target);
    Tensor loss = label_smoothed_ce(tape, log_probs, expected, 0.0);
    total += loss(0, 0) * static_cast<double>(expected.size());
    tokens += expected.size();
  }
  return total / static_cast<double>(tokens);
}

TrainResult train_loop(MtnModel& model, const std::vector<PairExample>& train,
                       const std::vector<PairExample>& valid,
                       const TrainOptions& opts) {
  if (train.empty()) {
    throw ConfigError("train_loop: no training examples");
  }
  if (opts.epochs < 1) {
    throw ConfigError("train_loop: epochs must be at least 1");
  }
  const ModelConfig& cfg = model.cfg;
  const std::size_t n_max = static_cast<std::size_t>(cfg.max_query_len);

  NamedTensors params = named_parameters(model);
  OptimizerState state = make_optimizer(params);
  Rng dropout_rng(derive_seed(cfg.seed, 2));

  TrainResult result;
  result.best_valid = std::numeric_limits<double>::infinity();
  bool stop = false;
  for (int epoch = 1; epoch <= opts.epochs && !stop; ++epoch) {
    Rng batch_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<SessionBatch> batches =
        make_batches(train, opts.batch_capacity, n_max, batch_rng);

    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    std::int64_t epoch_steps = 0;
    for (const SessionBatch& batch : batches) {
      Tape tape;
      RunMode mode = RunMode::train(cfg.dropout, dropout_rng);
      std::vector<Tensor> weighted;
      std::size_t batch_tokens = 0;
      for (std::size_t i = 0; i < batch.sources.size(); ++i) {
        EncodedSession session;
        session.queries = batch.sources[i];
        session.target = batch.targets[i];
        Tensor log_probs = mtn_forward(tape, session, model, mode);
        std::vector<int> expected = expected_tokens(session.target);
        Tensor ex_loss =
            label_smoothed_ce(tape, log_probs, expected, opts.label_smoothing);
        weighted.push_back(
            scale(tape, ex_loss, static_cast<double>(expected.size())));
        batch_tokens += expected.size();
      }
      Tensor loss_sum = weighted[0];
      for (std::size_t i = 1; i < weighted.size(); ++i) {
        loss_sum = add(tape, loss_sum, weighted[i]);
      }
      Tensor loss =
          scale(tape, loss_sum, 1.0 / static_cast<double>(batch_tokens));
      const double loss_value = loss(0, 0);
      if (!std::isfinite(loss_value)) {
        throw EvalError("train_loop: non-finite loss at step " +
                        std::to_string(result.steps + 1));
      }

      for (auto& [name, p] : params) {
        (void)name;
        p.zero_grad();
      }
      backward(loss, tape);
      const double lr = opts.lr_override >= 0.0
                            ? opts.lr_override
                            : noam_lr(state.step + 1, cfg.d, cfg.warmup_steps);
      adam_step(params, state, lr);

      result.steps += 1;
      epoch_steps += 1;
      result.step_losses.push_back(loss_value);
      epoch_loss += loss_value * static_cast<double>(batch_tokens);
      epoch_tokens += batch_tokens;
      if (opts.max_steps > 0 && result.steps >= opts.max_steps) {
        stop = true;
        break;
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.steps = epoch_steps;
    stats.train_loss = epoch_loss / static_cast<double>(epoch_tokens);
    stats.valid_loss =
        valid.empty() ? stats.train_loss : corpus_loss(model, valid);
    if (stats.valid_loss < result.best_valid) {
      result.best_valid = stats.valid_loss;
      result.best_epoch = epoch;
      if (!opts.checkpoint_path.empty()) {
        TrainMeta meta;
        meta.rng_state = dropout_rng.save_state();
        meta.adam_step = state.step;
        meta.epochs_done = epoch;
        meta.vocab_size = model.vocab_size;
        save_checkpoint(opts.checkpoint_path, model, &state, meta);
      }
    }
    result.epochs.push_back(stats);
  }
  return result;
}

// --- Checkpoint format -----------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'T', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kCrcPoly = 0x42F0E1EBA9EA3693ULL;

const std::uint64_t* crc64_table() {
  static std::uint64_t table[256];
  static bool ready = false;
  if (!ready) {
    for (std::uint64_t i = 0; i < 256; ++i) {
      std::uint64_t c = i << 56;
      for (int bit = 0; bit < 8; ++bit) {
        c = (c & 0x8000000000000000ULL) ? (c << 1) ^ kCrcPoly : c << 1;
      }
      table[i] = c;
    }
    ready = true;
  }
  return table;
}

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t limit) : buf_(buf), limit_(limit) {}

  std::size_t offset() const { return offset_; }

  const unsigned char* take(std::size_t n) {
    if (offset_ + n > limit_) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint: file ends inside a record");
    }
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(buf_.data()) + offset_;
    offset_ += n;
    return p;
  }

  std::uint16_t u16() { return static_cast<std::uint16_t>(u_int(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u_int(4)); }
  std::uint64_t u64() { return u_int(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(*take(1)); }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  std::string str(std::size_t n) {
    const unsigned char* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

 private:
  std::uint64_t u_int(int bytes) {
    const unsigned char* p = take(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  const std::string& buf_;
  std::size_t limit_;
  std::size_t offset_ = 0;
};

}  // namespace

std::uint64_t crc64(const unsigned char* data, std::size_t size) {
  const std::uint64_t* table = crc64_table();
  std::uint64_t crc = 0;
  for (std::size_t i = 0; i < size; ++i) {
    crc = table[((crc >> 56) ^ data[i]) & 0xff] ^ (crc << 8);
  }
  return crc;
}

void save_checkpoint(const std::string& path, const MtnModel& model,
                     const OptimizerState* opt, const TrainMeta& meta) {
  NamedTensors table = named_parameters(const_cast<MtnModel&>(model));
  if (opt != nullptr) {
    if (opt->m_acc.size() != table.size()) {
      throw ShapeError(
          "save_checkpoint: optimizer state does not match the parameter list");
    }
    const std::size_t param_count = table.size();
    for (std::size_t i = 0; i < param_count; ++i) {
      table.emplace_back("opt.m/" + table[i].first, opt->m_acc[i]);
      table.emplace_back("opt.v/" + table[i].first, opt->v_acc[i]);
    }
  }

  json blob;
  blob["config"] = json::parse(model.cfg.to_json());
  blob["meta"] = {{"rng", meta.rng_state},
                  {"adam_step", meta.adam_step},
                  {"epochs_done", meta.epochs_done},
                  {"vocab_size", meta.vocab_size},
                  {"has_optimizer", opt != nullptr}};
  const std::string blob_text = blob.dump();

  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u64(out, blob_text.size());
  out += blob_text;
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, tensor] : table) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(2);  // rank
    put_u64(out, tensor.rows());
    put_u64(out, tensor.cols());
    for (double v : tensor.values()) put_f64(out, v);
  }
  put_u64(out, crc64(reinterpret_cast<const unsigned char*>(out.data()),
                     out.size()));

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file.is_open()) {
    throw IoError("save_checkpoint: cannot open " + path + " for writing");
  }
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  file.flush();
  if (!file.good()) {
    throw IoError("save_checkpoint: write failure on " + path);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file.is_open()) {
    throw IoError("load_checkpoint: cannot open " + path);
  }
  std::ostringstream buf_stream;
  buf_stream << file.rdbuf();
  if (file.bad()) {
    throw IoError("load_checkpoint: read failure on " + path);
  }
  const std::string buf = buf_stream.str();

  if (buf.size() < sizeof kMagic) {
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "checkpoint: file shorter than the magic bytes");
  }
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic,
                          "checkpoint: magic bytes are not MTNC");
  }
  if (buf.size() < sizeof kMagic + 4) {
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "checkpoint: file ends before the version field");
  }
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) {
    version |= static_cast<std::uint32_t>(
                   static_cast<unsigned char>(buf[sizeof kMagic + i]))
               << (8 * i);
  }
  if (version != kVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "checkpoint: version " + std::to_string(version) +
                              ", expected " + std::to_string(kVersion));
  }
  if (buf.size() < sizeof kMagic + 4 + 8) {
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "checkpoint: file ends before the checksum trailer");
  }

  const std::size_t body_end = buf.size() - 8;
  Reader reader(buf, body_end);
  reader.take(sizeof kMagic + 4);  // already validated

  const std::uint64_t blob_len = reader.u64();
  const std::string blob_text = reader.str(blob_len);
  const std::uint32_t tensor_count = reader.u32();

  NamedTensors table;
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    const std::uint16_t name_len = reader.u16();
    std::string name = reader.str(name_len);
    const std::uint8_t rank = reader.u8();
    if (rank != 2) {
      throw CheckpointError(CheckpointError::Kind::corrupt,
                            "checkpoint: tensor " + name + " has rank " +
                                std::to_string(rank) + ", expected 2");
    }
    const std::uint64_t rows = reader.u64();
    const std::uint64_t cols = reader.u64();
    if (rows == 0 || cols == 0 || rows > (1ULL << 31) || cols > (1ULL << 31)) {
      throw CheckpointError(CheckpointError::Kind::corrupt,
                            "checkpoint: tensor " + name +
                                " has implausible dimensions");
    }
    const std::uint64_t count = rows * cols;
    if (count > (body_end - reader.offset()) / 8) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint: file ends inside tensor " + name);
    }
    std::vector<double> values;
    values.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) values.push_back(reader.f64());
    table.emplace_back(std::move(name),
                       Tensor::from_data(rows, cols, std::move(values)));
  }
  if (reader.offset() != body_end) {
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          "checkpoint: trailing bytes after the tensor table");
  }

  std::uint64_t stored_crc = 0;
  for (int i = 0; i < 8; ++i) {
    stored_crc |= static_cast<std::uint64_t>(
                      static_cast<unsigned char>(buf[body_end + i]))
                  << (8 * i);
  }
  const std::uint64_t actual_crc =
      crc64(reinterpret_cast<const unsigned char*>(buf.data()), body_end);
  if (stored_crc != actual_crc) {
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          "checkpoint: CRC mismatch, file is damaged");
  }

  json blob;
  TrainMeta meta;
  ModelConfig config;
  bool has_optimizer = false;
  try {
    blob = json::parse(blob_text);
    config = ModelConfig::from_json(blob.at("config").dump());
    const json& m = blob.at("meta");
    meta.rng_state = m.at("rng").get<std::string>();
    meta.adam_step = m.at("adam_step").get<std::int64_t>();
    meta.epochs_done = m.at("epochs_done").get<int>();
    meta.vocab_size = m.at("vocab_size").get<std::size_t>();
    has_optimizer = m.at("has_optimizer").get<bool>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          std::string("checkpoint: bad config blob: ") +
                              e.what());
  }

  LoadedCheckpoint loaded{make_model(config, meta.vocab_size), false,
                          OptimizerState{}, meta};
  NamedTensors params = named_parameters(loaded.model);

  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : table) by_name.emplace(name, tensor);
  auto fetch = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointError(CheckpointError::Kind::corrupt,
                            "checkpoint: missing tensor " + name);
    }
    Tensor t = it->second;
    by_name.erase(it);
    return t;
  };
  auto assign = [](Tensor& dst, const Tensor& src, const std::string& name) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
      throw CheckpointError(CheckpointError::Kind::corrupt,
                            "checkpoint: tensor " + name + " is " +
                                src.shape_str() + ", expected " +
                                dst.shape_str());
    }
    dst.assign_values(src.values());
  };

  for (auto& [name, p] : params) assign(p, fetch(name), name);
  if (has_optimizer) {
    loaded.has_optimizer = true;
    loaded.opt = make_optimizer(params);
    loaded.opt.step = meta.adam_step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      assign(loaded.opt.m_acc[i], fetch("opt.m/" + params[i].first),
             "opt.m/" + params[i].first);
      assign(loaded.opt.v_acc[i], fetch("opt.v/" + params[i].first),
             "opt.v/" + params[i].first);
    }
  }
  if (!by_name.empty()) {
    throw CheckpointError(CheckpointError::Kind::corrupt,
                          "checkpoint: unexpected tensor " +
                              by_name.begin()->first);
  }
  return loaded;
}

}  // namespace mtn
