#pragma once

#include <vector>

#include "mtn/tensor.hpp"

namespace mtn {

// Forward-pass context. Inference by default; training enables dropout,
// which then needs a random source.
struct RunMode {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  static RunMode eval() { return {}; }
  static RunMode train(double dropout_rate, Rng& rng) {
    return {true, dropout_rate, &rng};
  }
};

// Per-head projections. query/key/value map the d-wide stream into the
// d_p-wide head subspace. out_proj lifts one head back to d and is used only
// by the weighted combination mode; the concat mode has a single joint
// output projection per layer instead.
struct HeadProjections {
  Tensor query_proj;  // d x d_p
  Tensor key_proj;    // d x d_p
  Tensor value_proj;  // d x d_p
  Tensor out_proj;    // d_p x d (weighted mode only, empty otherwise)
};

// Learned simplex weights for the weighted combination mode. Softmax of each
// logit row yields the per-head scale (kappa) and mix (alpha) weights, both
// summing to one.
struct AttentionWeightsSimplex {
  Tensor kappa_logits;  // 1 x P
  Tensor alpha_logits;  // 1 x P
};

// All attention forms compute softmax(Q K^T / sqrt(scale_width)) V with the
// input itself as Q/K/V (plus projections in the multi-head forms) and keep
// the residual inside: row i of the result is input row i plus its attention
// readout. scale_width is the model width d, also when logits live in a
// head subspace.

// (I + softmax(e e^T / sqrt(d))) e
Tensor self_attention_residual(Tape& tape, const Tensor& e, double scale_width,
                               const RunMode& mode = RunMode::eval());

// Same, with invalid positions removed from the softmax support. Every row
// must keep at least one valid position (MaskError otherwise).
Tensor masked_self_attention_residual(Tape& tape, const Tensor& x,
                                      const ValidityMask& validity,
                                      double scale_width,
                                      const RunMode& mode = RunMode::eval());

// queries + softmax(queries keys^T / sqrt(d)) keys, reading from a separate
// key/value sequence.
Tensor cross_attention_residual(Tape& tape, const Tensor& queries,
                                const Tensor& keys_values, double scale_width,
                                const RunMode& mode = RunMode::eval());

// Concat combination: per head i, (queries + attn_i(keys_values)) V_i, heads
// concatenated and passed through the joint output projection (d x d).
// Self-attention when queries and keys_values are the same tensor; a null
// validity mask means "all positions visible".
Tensor multi_head_attention(Tape& tape, const Tensor& queries,
                            const Tensor& keys_values,
                            const std::vector<HeadProjections>& heads,
                            const Tensor& out_joint,
                            const ValidityMask* validity, double scale_width,
                            const RunMode& mode = RunMode::eval());

// Weighted combination (self-attention form): head i contributes
// kappa_i * (I + attn_i) e V_i O_i, and the results mix as sum_i alpha_i.
Tensor weighted_multi_attention(Tape& tape, const Tensor& e,
                                const std::vector<HeadProjections>& heads,
                                const AttentionWeightsSimplex& weights,
                                const ValidityMask* validity,
                                double scale_width,
                                const RunMode& mode = RunMode::eval());

}  // namespace mtn
