#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mtn/config.hpp"
#include "mtn/tensor.hpp"
#include "mtn/transformer.hpp"

namespace mtn {

// One query padded to the model's fixed token width. `valid[j]` marks real
// tokens; padding positions keep id 0 and valid=false.
struct EncodedQuery {
  std::vector<int> ids;
  std::vector<bool> valid;
};

// How queries nest into higher-level units when the hierarchy has more than
// two levels. `group_sizes[i]` lists, in order, the sizes of the consecutive
// groups that merge level-(2+i) units into level-(3+i) units. Empty means
// every unit forms its own group.
struct NestedGrouping {
  std::vector<std::vector<int>> group_sizes;
};

// A training example: the context queries followed by the wrapped target
// token ids (sequence-start id first, sequence-end id last).
struct EncodedSession {
  std::vector<EncodedQuery> queries;
  std::vector<int> target;
  NestedGrouping grouping;
};

struct MtnModel {
  ModelConfig cfg;
  std::size_t vocab_size = 0;
  EmbeddingTable embedding;
  std::vector<EncoderLayerParams> query_encoder;
  // level_proj[i] pools a level-(1+i) unit matrix into one level-(2+i) code
  // row: level_proj[0] is 1 x max_query_len, later entries are 1 x group cap.
  std::vector<Tensor> level_proj;
  // code_encoders[i] runs over the level-(2+i) code rows under a causal mask.
  std::vector<std::vector<EncoderLayerParams>> code_encoders;
  LayerNormParams fuse_norm;
  std::vector<DecoderLayerParams> decoder;
};

MtnModel make_model(const ModelConfig& cfg, std::size_t vocab_size);

NamedTensors named_parameters(MtnModel& model);

// Deep copy with independent storage (same values, fresh gradients).
MtnModel clone_model(const MtnModel& model);

// Pools an n x d unit matrix into a single code row with a learned 1 x n row.
Tensor query_project(Tape& tape, const Tensor& proj_row, const Tensor& unit_rows);

// Adds one code row to every row of a query's token matrix, then normalizes.
Tensor fuse_add_norm(Tape& tape, const Tensor& query_rows, const Tensor& code_row,
                     const LayerNormParams& norm);

struct EncodeTrace {
  // Per query: token-level encoder output, max_query_len x d.
  std::vector<Tensor> query_outputs;
  // Stacked code rows per level 2..K, each after that level's own encoder.
  std::vector<Tensor> level_codes;
  // For each query, the row of the top-level code matrix it fuses with.
  std::vector<std::size_t> top_unit;
  // Per query: fused token matrix, max_query_len x d.
  std::vector<Tensor> fused;
};

// Encodes the context queries through every level of the hierarchy.
EncodeTrace k_level_encode(Tape& tape, const std::vector<EncodedQuery>& queries,
                           const NestedGrouping& grouping, const MtnModel& model,
                           const RunMode& mode);

// Two-level path: queries are the only grouping level.
EncodeTrace mtn_encode(Tape& tape, const std::vector<EncodedQuery>& queries,
                       const MtnModel& model, const RunMode& mode);

// Concatenated fused rows of all context queries, (|queries| * max_query_len) x d.
Tensor mtn_context(Tape& tape, const std::vector<EncodedQuery>& queries,
                   const NestedGrouping& grouping, const MtnModel& model,
                   const RunMode& mode);

// Teacher-forced pass: feeds target[0..m-2] to the decoder against the
// encoded context and returns the (m-1) x vocab matrix of next-token
// log-probabilities.
Tensor mtn_forward(Tape& tape, const EncodedSession& session, const MtnModel& model,
                   const RunMode& mode);

// Next-token log-probabilities (1 x vocab) after consuming `prefix_ids`
// (sequence-start id first) against a precomputed context.
Tensor decode_log_probs(Tape& tape, const Tensor& context,
                        const std::vector<int>& prefix_ids, const MtnModel& model);

}  // namespace mtn
