#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtn/mtn.hpp"
#include "mtn/rng.hpp"
#include "mtn/sessions_data.hpp"
#include "mtn/tensor.hpp"

namespace mtn {

// Cross entropy against a smoothed target distribution: 1-smoothing on the
// gold token, smoothing/(|V|-1) spread over the rest. Averaged over non-pad
// target positions; pad rows contribute nothing. log_probs is m x |V|, row i
// scoring targets[i]. An all-pad target set throws EvalError.
Tensor label_smoothed_ce(Tape& tape, const Tensor& log_probs,
                         const std::vector<int>& targets, double smoothing,
                         int pad_id = Vocabulary::kPad);

// d^-0.5 * min(step^-0.5, step * warmup^-1.5): linear warmup, then inverse
// square-root decay. Both branches meet at step == warmup.
double noam_lr(std::int64_t step, int d, int warmup);

// Adam accumulators, index-parallel to the parameter list they were built
// from.
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 0.0;  // max global grad norm; 0 disables clipping
  std::int64_t step = 0;
  std::vector<Tensor> m_acc;
  std::vector<Tensor> v_acc;
};

OptimizerState make_optimizer(const NamedTensors& params);

// One bias-corrected Adam update from the gradients currently stored on the
// parameters. A non-finite gradient aborts with the parameter's name.
void adam_step(NamedTensors& params, OptimizerState& state, double lr);

struct TrainOptions {
  int epochs = 5;
  std::size_t batch_capacity = 32;
  // Negative means "use the noam schedule"; any other value overrides it.
  double lr_override = -1.0;
  // Stop after this many optimizer steps; 0 means no cap.
  std::int64_t max_steps = 0;
  // When non-empty, the best-validation model (with optimizer state) is
  // written here every time validation improves.
  std::string checkpoint_path;
  // Smoothing used for training loss; validation always uses 0.
  double label_smoothing = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  std::int64_t steps = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
  double best_valid = 0.0;
  int best_epoch = -1;
  std::int64_t steps = 0;
};

// Teacher-forced training over growing-prefix examples. Batches are re-cut
// every epoch from a seed-derived stream, dropout draws from its own stream,
// so the whole trajectory is a pure function of the model config's seed.
// Validation loss (smoothing 0) is recorded per epoch when valid examples
// exist, otherwise the epoch's training loss stands in for it.
TrainResult train_loop(MtnModel& model, const std::vector<PairExample>& train,
                       const std::vector<PairExample>& valid,
                       const TrainOptions& opts);

// Token-weighted mean cross entropy (smoothing 0) over examples, eval mode.
double corpus_loss(const MtnModel& model, const std::vector<PairExample>& examples);

struct TrainMeta {
  std::string rng_state;
  std::int64_t adam_step = 0;
  int epochs_done = 0;
  std::size_t vocab_size = 0;
};

// Binary checkpoint: magic MTNC, version, JSON config+meta blob, named
// tensor table (parameters, then optional opt.m/ and opt.v/ entries), and a
// trailing CRC-64 over everything before it.
void save_checkpoint(const std::string& path, const MtnModel& model,
                     const OptimizerState* opt, const TrainMeta& meta);

struct LoadedCheckpoint {
  MtnModel model;
  bool has_optimizer = false;
  OptimizerState opt;
  TrainMeta meta;
};

// Validates magic, version, and the trailing CRC before trusting anything;
// throws CheckpointError with the matching kind (bad_magic, bad_version,
// truncated, corrupt).
LoadedCheckpoint load_checkpoint(const std::string& path);

// CRC-64/ECMA-182 (polynomial 0x42F0E1EBA9EA3693, MSB-first, zero init and
// xorout), used for the checkpoint trailer.
std::uint64_t crc64(const unsigned char* data, std::size_t size);

}  // namespace mtn
