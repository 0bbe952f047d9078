#include "mtn/mtn.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "mtn/errors.hpp"
#include "mtn/rng.hpp"

namespace mtn {
namespace {

constexpr std::uint64_t kInitStream = 1;

void check_queries(const std::vector<EncodedQuery>& queries, std::size_t n_max) {
  if (queries.empty()) {
    throw ShapeError("encode: need at least one context query");
  }
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (queries[q].ids.size() != n_max || queries[q].valid.size() != n_max) {
      throw ShapeError("encode: query " + std::to_string(q) + " has " +
                       std::to_string(queries[q].ids.size()) +
                       " token slots, expected " + std::to_string(n_max));
    }
    bool any = false;
    for (bool v : queries[q].valid) any = any || v;
    if (!any) {
      throw ShapeError("encode: query " + std::to_string(q) +
                       " has no valid tokens");
    }
  }
}

// Expands an empty grouping to singleton groups and checks that every level
// partitions the units of the level below it.
NestedGrouping resolve_grouping(const NestedGrouping& grouping,
                                std::size_t num_queries, const ModelConfig& cfg) {
  NestedGrouping g = grouping;
  const std::size_t levels = static_cast<std::size_t>(cfg.K) - 2;
  if (g.group_sizes.empty()) {
    g.group_sizes.resize(levels);
    std::size_t units = num_queries;
    for (std::size_t i = 0; i < levels; ++i) {
      g.group_sizes[i].assign(units, 1);
      // Singleton groups keep the unit count unchanged.
    }
    return g;
  }
  if (g.group_sizes.size() != levels) {
    throw ShapeError("encode: grouping has " +
                     std::to_string(g.group_sizes.size()) +
                     " levels, expected " + std::to_string(levels));
  }
  std::size_t units = num_queries;
  for (std::size_t i = 0; i < levels; ++i) {
    const int cap = cfg.level_group_caps[i];
    std::size_t covered = 0;
    for (int size : g.group_sizes[i]) {
      if (size < 1 || size > cap) {
        throw ShapeError("encode: level " + std::to_string(i + 3) +
                         " group size " + std::to_string(size) +
                         " outside 1.." + std::to_string(cap));
      }
      covered += static_cast<std::size_t>(size);
    }
    if (covered != units) {
      throw ShapeError("encode: level " + std::to_string(i + 3) +
                       " grouping covers " + std::to_string(covered) +
                       " units but " + std::to_string(units) + " exist");
    }
    units = g.group_sizes[i].size();
  }
  return g;
}

Tensor add_positions(Tape& tape, const Tensor& rows) {
  Tensor pe = sinusoidal_pe(rows.rows(), rows.cols());
  return add(tape, rows, pe);
}

}  // namespace

MtnModel make_model(const ModelConfig& cfg, std::size_t vocab_size) {
  cfg.validate();
  if (vocab_size < 4) {
    throw ConfigError("make_model: vocab size must cover the reserved ids, got " +
                      std::to_string(vocab_size));
  }
  Rng rng(derive_seed(cfg.seed, kInitStream));

  MtnModel m;
  m.cfg = cfg;
  m.vocab_size = vocab_size;
  m.embedding = make_embedding(vocab_size, cfg.d_emb, cfg.d, rng);

  for (int l = 0; l < cfg.L; ++l) {
    m.query_encoder.push_back(
        make_encoder_layer(cfg.d, cfg.d_f, cfg.P, cfg.attention_mode, rng));
  }

  // Pooling rows start as plain means so early codes summarize their units.
  m.level_proj.push_back(Tensor::full(1, cfg.max_query_len,
                                      1.0 / cfg.max_query_len,
                                      /*requires_grad=*/true));
  for (int cap : cfg.level_group_caps) {
    m.level_proj.push_back(
        Tensor::full(1, cap, 1.0 / cap, /*requires_grad=*/true));
  }

  for (int layers : cfg.L_levels) {
    std::vector<EncoderLayerParams> stack;
    for (int l = 0; l < layers; ++l) {
      stack.push_back(make_encoder_layer(cfg.d, cfg.code_ffn_width(), cfg.P,
                                         cfg.attention_mode, rng));
    }
    m.code_encoders.push_back(std::move(stack));
  }

  m.fuse_norm = make_layer_norm(cfg.d);
  for (int l = 0; l < cfg.L_dec; ++l) {
    m.decoder.push_back(make_decoder_layer(cfg.d, cfg.d_f, cfg.P, rng));
  }
  return m;
}

NamedTensors named_parameters(MtnModel& model) {
  NamedTensors out;
  append_params("embedding", model.embedding, out);
  for (std::size_t l = 0; l < model.query_encoder.size(); ++l) {
    append_params("query_enc." + std::to_string(l), model.query_encoder[l], out);
  }
  for (std::size_t i = 0; i < model.level_proj.size(); ++i) {
    out.emplace_back("level." + std::to_string(i + 2) + ".proj",
                     model.level_proj[i]);
  }
  for (std::size_t i = 0; i < model.code_encoders.size(); ++i) {
    for (std::size_t l = 0; l < model.code_encoders[i].size(); ++l) {
      append_params("level." + std::to_string(i + 2) + ".enc." + std::to_string(l),
                    model.code_encoders[i][l], out);
    }
  }
  append_params("fuse_norm", model.fuse_norm, out);
  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    append_params("decoder." + std::to_string(l), model.decoder[l], out);
  }
  return out;
}

MtnModel clone_model(const MtnModel& model) {
  MtnModel copy = make_model(model.cfg, model.vocab_size);
  NamedTensors src = named_parameters(const_cast<MtnModel&>(model));
  NamedTensors dst = named_parameters(copy);
  if (src.size() != dst.size()) {
    throw ShapeError("clone_model: parameter lists diverge");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].second.assign_values(src[i].second.values());
  }
  return copy;
}

Tensor query_project(Tape& tape, const Tensor& proj_row, const Tensor& unit_rows) {
  if (proj_row.rows() != 1 || proj_row.cols() != unit_rows.rows()) {
    throw ShapeError("query_project: pooling row " + proj_row.shape_str() +
                     " does not fit unit matrix " + unit_rows.shape_str());
  }
  return matmul(tape, proj_row, unit_rows);
}

Tensor fuse_add_norm(Tape& tape, const Tensor& query_rows, const Tensor& code_row,
                     const LayerNormParams& norm) {
  return layer_norm_rows(tape, add_bias_rows(tape, query_rows, code_row),
                         norm.gain, norm.bias, kLayerNormEps);
}

EncodeTrace k_level_encode(Tape& tape, const std::vector<EncodedQuery>& queries,
                           const NestedGrouping& grouping, const MtnModel& model,
                           const RunMode& mode) {
  const ModelConfig& cfg = model.cfg;
  const std::size_t n_max = static_cast<std::size_t>(cfg.max_query_len);
  check_queries(queries, n_max);
  NestedGrouping g = resolve_grouping(grouping, queries.size(), cfg);

  EncodeTrace trace;

  // Token level: each query runs through the shared encoder with padding
  // positions removed from the attention support.
  std::vector<Tensor> codes;
  for (const EncodedQuery& query : queries) {
    Tensor e0 = embed_and_scale(tape, query.ids, model.embedding, cfg.d);
    e0 = dropout(tape, add_positions(tape, e0), mode.dropout, mode.rng,
                 mode.training);
    ValidityMask validity = ValidityMask::broadcast_row(n_max, query.valid);
    Tensor y_q = encoder_forward(tape, e0, model.query_encoder,
                                 cfg.attention_mode, &validity, mode);
    trace.query_outputs.push_back(y_q);
    codes.push_back(query_project(tape, model.level_proj[0], y_q));
  }

  // Code levels 2..K: encode the unit codes under a causal mask, then pool
  // groups into the next level. Positions are only added when the level has
  // its own encoder; a pass-through level keeps the raw codes so pooling
  // stays an exact average at initialization.
  std::vector<std::size_t> unit_of_query(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) unit_of_query[q] = q;

  for (std::size_t level = 0; level < model.code_encoders.size(); ++level) {
    Tensor stacked = concat_rows(tape, codes);
    if (!model.code_encoders[level].empty()) {
      stacked = dropout(tape, add_positions(tape, stacked), mode.dropout,
                        mode.rng, mode.training);
      ValidityMask causal = ValidityMask::causal(stacked.rows());
      stacked = encoder_forward(tape, stacked, model.code_encoders[level],
                                cfg.attention_mode, &causal, mode);
    }
    trace.level_codes.push_back(stacked);

    const bool top = level + 1 == model.code_encoders.size();
    if (top) break;

    // Pool consecutive groups; short groups are padded with zero rows so the
    // learned pooling row always sees its full width.
    const std::vector<int>& sizes = g.group_sizes[level];
    const int cap = cfg.level_group_caps[level];
    std::vector<Tensor> next_codes;
    std::vector<std::size_t> unit_to_group;
    std::size_t offset = 0;
    for (std::size_t gi = 0; gi < sizes.size(); ++gi) {
      const std::size_t size = static_cast<std::size_t>(sizes[gi]);
      Tensor rows = slice_rows(tape, stacked, offset, size);
      if (size < static_cast<std::size_t>(cap)) {
        Tensor pad = Tensor::zeros(cap - size, cfg.d);
        rows = concat_rows(tape, {rows, pad});
      }
      next_codes.push_back(query_project(tape, model.level_proj[level + 1], rows));
      for (std::size_t u = 0; u < size; ++u) unit_to_group.push_back(gi);
      offset += size;
    }
    codes = std::move(next_codes);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      unit_of_query[q] = unit_to_group[unit_of_query[q]];
    }
  }

  const Tensor& top_codes = trace.level_codes.back();
  for (std::size_t q = 0; q < queries.size(); ++q) {
    trace.top_unit.push_back(unit_of_query[q]);
    Tensor code_row = slice_rows(tape, top_codes, unit_of_query[q], 1);
    trace.fused.push_back(
        fuse_add_norm(tape, trace.query_outputs[q], code_row, model.fuse_norm));
  }
  return trace;
}

EncodeTrace mtn_encode(Tape& tape, const std::vector<EncodedQuery>& queries,
                       const MtnModel& model, const RunMode& mode) {
  return k_level_encode(tape, queries, NestedGrouping{}, model, mode);
}

Tensor mtn_context(Tape& tape, const std::vector<EncodedQuery>& queries,
                   const NestedGrouping& grouping, const MtnModel& model,
                   const RunMode& mode) {
  EncodeTrace trace = k_level_encode(tape, queries, grouping, model, mode);
  return concat_rows(tape, trace.fused);
}

Tensor mtn_forward(Tape& tape, const EncodedSession& session, const MtnModel& model,
                   const RunMode& mode) {
  if (session.target.size() < 2) {
    throw ShapeError("mtn_forward: target needs the wrapped sequence ids, got " +
                     std::to_string(session.target.size()));
  }
  Tensor context =
      mtn_context(tape, session.queries, session.grouping, model, mode);
  std::vector<int> input(session.target.begin(), session.target.end() - 1);
  Tensor d0 = embed_and_scale(tape, input, model.embedding, model.cfg.d);
  d0 = dropout(tape, add_positions(tape, d0), mode.dropout, mode.rng,
               mode.training);
  Tensor decoded = decoder_forward(tape, d0, context, model.decoder, mode);
  return output_log_distribution(tape, decoded, model.embedding);
}

Tensor decode_log_probs(Tape& tape, const Tensor& context,
                        const std::vector<int>& prefix_ids, const MtnModel& model) {
  if (prefix_ids.empty()) {
    throw ShapeError("decode_log_probs: prefix must start with the sequence-start id");
  }
  RunMode mode = RunMode::eval();
  Tensor d0 = embed_and_scale(tape, prefix_ids, model.embedding, model.cfg.d);
  d0 = add_positions(tape, d0);
  Tensor decoded = decoder_forward(tape, d0, context, model.decoder, mode);
  Tensor log_probs = output_log_distribution(tape, decoded, model.embedding);
  return slice_rows(tape, log_probs, log_probs.rows() - 1, 1);
}

}  // namespace mtn
