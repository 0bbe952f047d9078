#include "mtn/transformer.hpp"

#include <cmath>

#include "mtn/errors.hpp"

namespace mtn {

LayerNormParams make_layer_norm(std::size_t d) {
  return {Tensor::full(1, d, 1.0, true), Tensor::zeros(1, d, true)};
}

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer range.
Tensor init_matrix(std::size_t fan_in, std::size_t rows, std::size_t cols,
                   Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(rows, cols, -bound, bound, rng, true);
}

}  // namespace

HeadProjections make_head(std::size_t d, std::size_t d_p, Rng& rng,
                          bool with_out_proj) {
  HeadProjections h;
  h.query_proj = init_matrix(d, d, d_p, rng);
  h.key_proj = init_matrix(d, d, d_p, rng);
  h.value_proj = init_matrix(d, d, d_p, rng);
  if (with_out_proj) h.out_proj = init_matrix(d_p, d_p, d, rng);
  return h;
}

EncoderLayerParams make_encoder_layer(std::size_t d, std::size_t d_f,
                                      std::size_t heads, AttentionMode mode,
                                      Rng& rng) {
  if (d % heads != 0) {
    throw ConfigError("encoder layer: head count " + std::to_string(heads) +
                      " does not divide width " + std::to_string(d));
  }
  EncoderLayerParams p;
  const std::size_t d_p = d / heads;
  const bool weighted = mode == AttentionMode::weighted;
  for (std::size_t i = 0; i < heads; ++i) {
    p.heads.push_back(make_head(d, d_p, rng, weighted));
  }
  if (weighted) {
    // Zero logits start every head at the same simplex weight.
    p.mix.kappa_logits = Tensor::zeros(1, heads, true);
    p.mix.alpha_logits = Tensor::zeros(1, heads, true);
  } else {
    p.out_joint = init_matrix(d, d, d, rng);
  }
  p.ffn_w1 = init_matrix(d, d, d_f, rng);
  p.ffn_b1 = init_matrix(d, 1, d_f, rng);
  p.ffn_w2 = init_matrix(d_f, d_f, d, rng);
  p.ffn_b2 = init_matrix(d_f, 1, d, rng);
  p.attn_norm = make_layer_norm(d);
  p.ffn_norm = make_layer_norm(d);
  return p;
}

DecoderLayerParams make_decoder_layer(std::size_t d, std::size_t d_f,
                                      std::size_t heads, Rng& rng) {
  if (d % heads != 0) {
    throw ConfigError("decoder layer: head count " + std::to_string(heads) +
                      " does not divide width " + std::to_string(d));
  }
  DecoderLayerParams p;
  const std::size_t d_p = d / heads;
  for (std::size_t i = 0; i < heads; ++i) {
    p.self_heads.push_back(make_head(d, d_p, rng, false));
  }
  p.self_out_joint = init_matrix(d, d, d, rng);
  for (std::size_t i = 0; i < heads; ++i) {
    p.cross_heads.push_back(make_head(d, d_p, rng, false));
  }
  p.cross_out_joint = init_matrix(d, d, d, rng);
  p.ffn_w1 = init_matrix(d, d, d_f, rng);
  p.ffn_b1 = init_matrix(d, 1, d_f, rng);
  p.ffn_w2 = init_matrix(d_f, d_f, d, rng);
  p.ffn_b2 = init_matrix(d_f, 1, d, rng);
  p.self_norm = make_layer_norm(d);
  p.cross_norm = make_layer_norm(d);
  p.ffn_norm = make_layer_norm(d);
  return p;
}

EmbeddingTable make_embedding(std::size_t vocab, std::size_t d_emb,
                              std::size_t d, Rng& rng) {
  EmbeddingTable e;
  e.table = init_matrix(d_emb, vocab, d_emb, rng);
  if (d_emb != d) e.input_proj = init_matrix(d_emb, d_emb, d, rng);
  return e;
}

Tensor sinusoidal_pe(std::size_t max_pos, std::size_t d) {
  std::vector<double> v(max_pos * d);
  for (std::size_t pos = 0; pos < max_pos; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double rate =
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / rate;
      v[pos * d + i] = std::sin(angle);
      if (i + 1 < d) v[pos * d + i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data(max_pos, d, std::move(v));
}

Tensor embed_and_scale(Tape& tape, const std::vector<int>& ids,
                       const EmbeddingTable& emb, std::size_t d) {
  Tensor x = lookup_rows(tape, emb.table, ids);
  if (!emb.input_proj.empty()) x = matmul(tape, x, emb.input_proj);
  if (x.cols() != d) {
    throw ShapeError("embed_and_scale: embedding width " +
                     std::to_string(x.cols()) + " does not match model width " +
                     std::to_string(d));
  }
  return scale(tape, x, std::sqrt(static_cast<double>(d)));
}

namespace {

Tensor tied_logits(Tape& tape, const Tensor& decoded,
                   const EmbeddingTable& emb) {
  Tensor x = decoded;
  if (!emb.input_proj.empty()) {
    x = matmul(tape, x, transpose(tape, emb.input_proj));
  }
  return matmul(tape, x, transpose(tape, emb.table));
}

}  // namespace

Tensor output_distribution(Tape& tape, const Tensor& decoded,
                           const EmbeddingTable& emb) {
  return softmax_rows(tape, tied_logits(tape, decoded, emb));
}

Tensor output_log_distribution(Tape& tape, const Tensor& decoded,
                               const EmbeddingTable& emb) {
  return log_softmax_rows(tape, tied_logits(tape, decoded, emb));
}

namespace {

// x + dropout(FFN(x)), normalized. Shared by encoder and decoder layers.
Tensor ffn_sublayer(Tape& tape, const Tensor& x, const Tensor& w1,
                    const Tensor& b1, const Tensor& w2, const Tensor& b2,
                    const LayerNormParams& norm, const RunMode& mode) {
  Tensor hidden = relu(tape, add_bias_rows(tape, matmul(tape, x, w1), b1));
  Tensor out = add_bias_rows(tape, matmul(tape, hidden, w2), b2);
  out = dropout(tape, out, mode.dropout, mode.rng, mode.training);
  return layer_norm_rows(tape, add(tape, x, out), norm.gain, norm.bias,
                         kLayerNormEps);
}

}  // namespace

Tensor encoder_layer_forward(Tape& tape, const Tensor& e_prev,
                             const EncoderLayerParams& layer,
                             AttentionMode attention_mode,
                             const ValidityMask* validity,
                             const RunMode& mode) {
  const double d = static_cast<double>(e_prev.cols());
  Tensor attended =
      attention_mode == AttentionMode::weighted
          ? weighted_multi_attention(tape, e_prev, layer.heads, layer.mix,
                                     validity, d, mode)
          : multi_head_attention(tape, e_prev, e_prev, layer.heads,
                                 layer.out_joint, validity, d, mode);
  Tensor x = layer_norm_rows(tape, attended, layer.attn_norm.gain,
                             layer.attn_norm.bias, kLayerNormEps);
  return ffn_sublayer(tape, x, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2,
                      layer.ffn_b2, layer.ffn_norm, mode);
}

Tensor encoder_forward(Tape& tape, const Tensor& e0,
                       const std::vector<EncoderLayerParams>& layers,
                       AttentionMode attention_mode,
                       const ValidityMask* validity, const RunMode& mode) {
  Tensor e = e0;
  for (const auto& layer : layers) {
    e = encoder_layer_forward(tape, e, layer, attention_mode, validity, mode);
  }
  return e;
}

Tensor decoder_layer_forward(Tape& tape, const Tensor& d_prev,
                             const Tensor& y_enc,
                             const DecoderLayerParams& layer,
                             const RunMode& mode) {
  const double d = static_cast<double>(d_prev.cols());
  ValidityMask causal = ValidityMask::causal(d_prev.rows());
  Tensor self_att =
      multi_head_attention(tape, d_prev, d_prev, layer.self_heads,
                           layer.self_out_joint, &causal, d, mode);
  Tensor d_hat = layer_norm_rows(tape, self_att, layer.self_norm.gain,
                                 layer.self_norm.bias, kLayerNormEps);
  Tensor cross_att =
      multi_head_attention(tape, d_hat, y_enc, layer.cross_heads,
                           layer.cross_out_joint, nullptr, d, mode);
  Tensor d_tilde = layer_norm_rows(tape, cross_att, layer.cross_norm.gain,
                                   layer.cross_norm.bias, kLayerNormEps);
  return ffn_sublayer(tape, d_tilde, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2,
                      layer.ffn_b2, layer.ffn_norm, mode);
}

Tensor decoder_forward(Tape& tape, const Tensor& d0, const Tensor& y_enc,
                       const std::vector<DecoderLayerParams>& layers,
                       const RunMode& mode) {
  Tensor x = d0;
  for (const auto& layer : layers) {
    x = decoder_layer_forward(tape, x, y_enc, layer, mode);
  }
  return x;
}

void append_params(const std::string& prefix, const LayerNormParams& p,
                   NamedTensors& out) {
  out.emplace_back(prefix + ".gain", p.gain);
  out.emplace_back(prefix + ".bias", p.bias);
}

void append_params(const std::string& prefix, const HeadProjections& p,
                   NamedTensors& out) {
  out.emplace_back(prefix + ".query", p.query_proj);
  out.emplace_back(prefix + ".key", p.key_proj);
  out.emplace_back(prefix + ".value", p.value_proj);
  if (!p.out_proj.empty()) out.emplace_back(prefix + ".out", p.out_proj);
}

void append_params(const std::string& prefix, const EncoderLayerParams& p,
                   NamedTensors& out) {
  for (std::size_t i = 0; i < p.heads.size(); ++i) {
    append_params(prefix + ".head." + std::to_string(i), p.heads[i], out);
  }
  if (!p.out_joint.empty()) out.emplace_back(prefix + ".out_joint", p.out_joint);
  if (!p.mix.kappa_logits.empty()) {
    out.emplace_back(prefix + ".mix.kappa", p.mix.kappa_logits);
    out.emplace_back(prefix + ".mix.alpha", p.mix.alpha_logits);
  }
  out.emplace_back(prefix + ".ffn.w1", p.ffn_w1);
  out.emplace_back(prefix + ".ffn.b1", p.ffn_b1);
  out.emplace_back(prefix + ".ffn.w2", p.ffn_w2);
  out.emplace_back(prefix + ".ffn.b2", p.ffn_b2);
  append_params(prefix + ".attn_norm", p.attn_norm, out);
  append_params(prefix + ".ffn_norm", p.ffn_norm, out);
}

void append_params(const std::string& prefix, const DecoderLayerParams& p,
                   NamedTensors& out) {
  for (std::size_t i = 0; i < p.self_heads.size(); ++i) {
    append_params(prefix + ".self_head." + std::to_string(i), p.self_heads[i],
                  out);
  }
  out.emplace_back(prefix + ".self_out_joint", p.self_out_joint);
  for (std::size_t i = 0; i < p.cross_heads.size(); ++i) {
    append_params(prefix + ".cross_head." + std::to_string(i),
                  p.cross_heads[i], out);
  }
  out.emplace_back(prefix + ".cross_out_joint", p.cross_out_joint);
  out.emplace_back(prefix + ".ffn.w1", p.ffn_w1);
  out.emplace_back(prefix + ".ffn.b1", p.ffn_b1);
  out.emplace_back(prefix + ".ffn.w2", p.ffn_w2);
  out.emplace_back(prefix + ".ffn.b2", p.ffn_b2);
  append_params(prefix + ".self_norm", p.self_norm, out);
  append_params(prefix + ".cross_norm", p.cross_norm, out);
  append_params(prefix + ".ffn_norm", p.ffn_norm, out);
}

void append_params(const std::string& prefix, const EmbeddingTable& p,
                   NamedTensors& out) {
  out.emplace_back(prefix + ".table", p.table);
  if (!p.input_proj.empty()) {
    out.emplace_back(prefix + ".input_proj", p.input_proj);
  }
}

}  // namespace mtn
