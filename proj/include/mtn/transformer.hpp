#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mtn/attention.hpp"
#include "mtn/config.hpp"

namespace mtn {

constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
  Tensor gain;  // 1 x d
  Tensor bias;  // 1 x d
};

// One encoder layer: residual multi-head attention then normalize, position
// feed-forward with ReLU then normalize. The same layer shape serves the
// code-level (session) encoders, which pass a causal validity mask.
struct EncoderLayerParams {
  std::vector<HeadProjections> heads;
  Tensor out_joint;             // concat mode joint projection, d x d
  AttentionWeightsSimplex mix;  // weighted mode simplex logits
  Tensor ffn_w1;                // d x d_f
  Tensor ffn_b1;                // 1 x d_f
  Tensor ffn_w2;                // d_f x d
  Tensor ffn_b2;                // 1 x d
  LayerNormParams attn_norm;
  LayerNormParams ffn_norm;
};

// One decoder layer: causal residual self-attention, cross-attention over
// the encoded context, feed-forward; each sublayer normalized.
struct DecoderLayerParams {
  std::vector<HeadProjections> self_heads;
  Tensor self_out_joint;
  std::vector<HeadProjections> cross_heads;
  Tensor cross_out_joint;
  Tensor ffn_w1;
  Tensor ffn_b1;
  Tensor ffn_w2;
  Tensor ffn_b2;
  LayerNormParams self_norm;
  LayerNormParams cross_norm;
  LayerNormParams ffn_norm;
};

// Token embeddings, shared between the input lookup and the output logits
// (tied weights). input_proj bridges d_emb to the model width when the two
// differ and is tied on the output side as well.
struct EmbeddingTable {
  Tensor table;       // |V| x d_emb
  Tensor input_proj;  // d_emb x d, empty when d_emb == d
};

// --- construction ----------------------------------------------------------

LayerNormParams make_layer_norm(std::size_t d);
HeadProjections make_head(std::size_t d, std::size_t d_p, Rng& rng,
                          bool with_out_proj);
EncoderLayerParams make_encoder_layer(std::size_t d, std::size_t d_f,
                                      std::size_t heads, AttentionMode mode,
                                      Rng& rng);
DecoderLayerParams make_decoder_layer(std::size_t d, std::size_t d_f,
                                      std::size_t heads, Rng& rng);
EmbeddingTable make_embedding(std::size_t vocab, std::size_t d_emb,
                              std::size_t d, Rng& rng);

// --- forward ----------------------------------------------------------------

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Tensor sinusoidal_pe(std::size_t max_pos, std::size_t d);

// Look up ids, apply the input projection when present, scale by sqrt(d).
Tensor embed_and_scale(Tape& tape, const std::vector<int>& ids,
                       const EmbeddingTable& emb, std::size_t d);

// Rows of softmax over tied logits (decoded * proj^T * table^T).
Tensor output_distribution(Tape& tape, const Tensor& decoded,
                           const EmbeddingTable& emb);
Tensor output_log_distribution(Tape& tape, const Tensor& decoded,
                               const EmbeddingTable& emb);

Tensor encoder_layer_forward(Tape& tape, const Tensor& e_prev,
                             const EncoderLayerParams& layer,
                             AttentionMode attention_mode,
                             const ValidityMask* validity,
                             const RunMode& mode);

Tensor encoder_forward(Tape& tape, const Tensor& e0,
                       const std::vector<EncoderLayerParams>& layers,
                       AttentionMode attention_mode,
                       const ValidityMask* validity, const RunMode& mode);

Tensor decoder_layer_forward(Tape& tape, const Tensor& d_prev,
                             const Tensor& y_enc,
                             const DecoderLayerParams& layer,
                             const RunMode& mode);

Tensor decoder_forward(Tape& tape, const Tensor& d0, const Tensor& y_enc,
                       const std::vector<DecoderLayerParams>& layers,
                       const RunMode& mode);

// --- parameter enumeration ---------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void append_params(const std::string& prefix, const LayerNormParams& p,
                   NamedTensors& out);
void append_params(const std::string& prefix, const HeadProjections& p,
                   NamedTensors& out);
void append_params(const std::string& prefix, const EncoderLayerParams& p,
                   NamedTensors& out);
void append_params(const std::string& prefix, const DecoderLayerParams& p,
                   NamedTensors& out);
void append_params(const std::string& prefix, const EmbeddingTable& p,
                   NamedTensors& out);

}  // namespace mtn
