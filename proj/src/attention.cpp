#include "mtn/attention.hpp"

#include <cmath>

#include "mtn/errors.hpp"

namespace mtn {

namespace {

// softmax over (optionally masked) scaled logits, with attention-weight
// dropout in training mode.
Tensor attention_weights(Tape& tape, const Tensor& logits,
                         const ValidityMask* validity, double scale_width,
                         const RunMode& mode) {
  Tensor scaled = scale(tape, logits, 1.0 / std::sqrt(scale_width));
  if (validity != nullptr) {
    if (!validity->every_row_has_valid()) {
      throw MaskError("attention: a query row has no valid position to read");
    }
    scaled = masked_fill(tape, scaled, *validity);
  }
  Tensor w = softmax_rows(tape, scaled);
  return dropout(tape, w, mode.dropout, mode.rng, mode.training);
}

void check_square_head(const Tensor& proj, const Tensor& stream,
                       const char* name) {
  if (proj.rows() != stream.cols()) {
    throw ShapeError(std::string(name) + ": projection " + proj.shape_str() +
                     " does not accept stream width " +
                     std::to_string(stream.cols()));
  }
}

}  // namespace

Tensor self_attention_residual(Tape& tape, const Tensor& e, double scale_width,
                               const RunMode& mode) {
  Tensor w = attention_weights(tape, matmul(tape, e, transpose(tape, e)),
                               nullptr, scale_width, mode);
  return add(tape, e, matmul(tape, w, e));
}

Tensor masked_self_attention_residual(Tape& tape, const Tensor& x,
                                      const ValidityMask& validity,
                                      double scale_width,
                                      const RunMode& mode) {
  Tensor w = attention_weights(tape, matmul(tape, x, transpose(tape, x)),
                               &validity, scale_width, mode);
  return add(tape, x, matmul(tape, w, x));
}

Tensor cross_attention_residual(Tape& tape, const Tensor& queries,
                                const Tensor& keys_values, double scale_width,
                                const RunMode& mode) {
  if (queries.cols() != keys_values.cols()) {
    throw ShapeError("cross_attention_residual: width mismatch " +
                     queries.shape_str() + " vs " + keys_values.shape_str());
  }
  Tensor w = attention_weights(
      tape, matmul(tape, queries, transpose(tape, keys_values)), nullptr,
      scale_width, mode);
  return add(tape, queries, matmul(tape, w, keys_values));
}

Tensor multi_head_attention(Tape& tape, const Tensor& queries,
                            const Tensor& keys_values,
                            const std::vector<HeadProjections>& heads,
                            const Tensor& out_joint,
                            const ValidityMask* validity, double scale_width,
                            const RunMode& mode) {
  if (heads.empty()) throw ShapeError("multi_head_attention: no heads");
  const std::size_t d = queries.cols();
  const std::size_t d_p = heads.front().query_proj.cols();
  if (d_p * heads.size() != d) {
    throw ShapeError("multi_head_attention: " + std::to_string(heads.size()) +
                     " heads of width " + std::to_string(d_p) +
                     " do not tile stream width " + std::to_string(d));
  }
  std::vector<Tensor> parts;
  parts.reserve(heads.size());
  for (const auto& head : heads) {
    check_square_head(head.query_proj, queries, "multi_head_attention");
    Tensor q = matmul(tape, queries, head.query_proj);
    Tensor k = matmul(tape, keys_values, head.key_proj);
    Tensor w = attention_weights(tape, matmul(tape, q, transpose(tape, k)),
                                 validity, scale_width, mode);
    // Residual inside the head: (queries + w * keys_values) V_i.
    Tensor readout = add(tape, queries, matmul(tape, w, keys_values));
    parts.push_back(matmul(tape, readout, head.value_proj));
  }
  if (out_joint.rows() != d || out_joint.cols() != d) {
    throw ShapeError("multi_head_attention: joint projection must be " +
                     std::to_string(d) + "x" + std::to_string(d) + ", got " +
                     out_joint.shape_str());
  }
  return matmul(tape, concat_cols(tape, parts), out_joint);
}

Tensor weighted_multi_attention(Tape& tape, const Tensor& e,
                                const std::vector<HeadProjections>& heads,
                                const AttentionWeightsSimplex& weights,
                                const ValidityMask* validity,
                                double scale_width, const RunMode& mode) {
  if (heads.empty()) throw ShapeError("weighted_multi_attention: no heads");
  const std::size_t p = heads.size();
  if (weights.kappa_logits.cols() != p || weights.alpha_logits.cols() != p ||
      weights.kappa_logits.rows() != 1 || weights.alpha_logits.rows() != 1) {
    throw ShapeError("weighted_multi_attention: simplex logits must be 1x" +
                     std::to_string(p));
  }
  Tensor kappa = softmax_rows(tape, weights.kappa_logits);
  Tensor alpha = softmax_rows(tape, weights.alpha_logits);
  Tensor out;
  for (std::size_t i = 0; i < p; ++i) {
    const auto& head = heads[i];
    check_square_head(head.query_proj, e, "weighted_multi_attention");
    if (head.out_proj.empty()) {
      throw ShapeError("weighted_multi_attention: head " + std::to_string(i) +
                       " has no output projection");
    }
    Tensor q = matmul(tape, e, head.query_proj);
    Tensor k = matmul(tape, e, head.key_proj);
    Tensor w = attention_weights(tape, matmul(tape, q, transpose(tape, k)),
                                 validity, scale_width, mode);
    Tensor readout = add(tape, e, matmul(tape, w, e));
    Tensor lifted = matmul(tape, matmul(tape, readout, head.value_proj),
                           head.out_proj);
    Tensor scaled = scale_by(tape, lifted, slice_cols(tape, kappa, i, 1));
    Tensor mixed = scale_by(tape, scaled, slice_cols(tape, alpha, i, 1));
    out = i == 0 ? mixed : add(tape, out, mixed);
  }
  return out;
}

}  // namespace mtn
