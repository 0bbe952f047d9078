#include "mtn/dynamics_oracle.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "mtn/errors.hpp"
#include "mtn/recurrent.hpp"
#include "mtn/rng.hpp"

namespace mtn {
namespace {

// Self-contained dense matrix arithmetic. Everything below is written as
// literal loops over materialized matrices on purpose; see the header note.

struct OMat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  OMat() = default;
  OMat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

OMat from_tensor(const Tensor& t) {
  OMat m(t.rows(), t.cols());
  m.a = t.values();
  return m;
}

Tensor to_tensor(const OMat& m) {
  return Tensor::from_data(m.rows, m.cols, m.a);
}

OMat omul(const OMat& x, const OMat& y) {
  if (x.cols != y.rows) {
    throw ShapeError("oracle: cannot multiply " + std::to_string(x.rows) + "x" +
                     std::to_string(x.cols) + " by " + std::to_string(y.rows) +
                     "x" + std::to_string(y.cols));
  }
  OMat r(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double v = x.at(i, k);
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < y.cols; ++j) {
        r.at(i, j) += v * y.at(k, j);
      }
    }
  }
  return r;
}

OMat otrans(const OMat& x) {
  OMat r(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) r.at(j, i) = x.at(i, j);
  }
  return r;
}

OMat oadd(const OMat& x, const OMat& y) {
  if (x.rows != y.rows || x.cols != y.cols) {
    throw ShapeError("oracle: shape mismatch in addition");
  }
  OMat r = x;
  for (std::size_t i = 0; i < r.a.size(); ++i) r.a[i] += y.a[i];
  return r;
}

OMat oscale(const OMat& x, double s) {
  OMat r = x;
  for (double& v : r.a) v *= s;
  return r;
}

OMat orelu(const OMat& x) {
  OMat r = x;
  for (double& v : r.a) v = v > 0.0 ? v : 0.0;
  return r;
}

OMat oident(std::size_t n) {
  OMat r(n, n);
  for (std::size_t i = 0; i < n; ++i) r.at(i, i) = 1.0;
  return r;
}

OMat oones_col(std::size_t n) {
  OMat r(n, 1);
  for (double& v : r.a) v = 1.0;
  return r;
}

// M_t: t x n row-selection matrix, row r selects input row r.
OMat oselection(std::size_t t, std::size_t n) {
  OMat r(t, n);
  for (std::size_t i = 0; i < t; ++i) r.at(i, i) = 1.0;
  return r;
}

// C_t: n x s copy matrix with ones in column t, so C_t X stacks n copies of
// row t of X.
OMat ocopy_column(std::size_t n, std::size_t s, std::size_t t) {
  OMat r(n, s);
  for (std::size_t i = 0; i < n; ++i) r.at(i, t) = 1.0;
  return r;
}

// e_q: 1 x s unit row.
OMat ounit_row(std::size_t s, std::size_t q) {
  OMat r(1, s);
  r.at(0, q) = 1.0;
  return r;
}

// R: ones on and below the diagonal. Entries above it send the masked
// logits to -infinity, the value whose softmax weight is exactly zero.
OMat olower_tri(std::size_t n) {
  OMat r(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      r.at(i, j) = j <= i ? 1.0 : -std::numeric_limits<double>::infinity();
    }
  }
  return r;
}

OMat oapply_mask(const OMat& logits, const OMat& mask) {
  if (logits.rows != mask.rows || logits.cols != mask.cols) {
    throw ShapeError("oracle: mask shape mismatch");
  }
  OMat r = logits;
  for (std::size_t i = 0; i < r.a.size(); ++i) {
    if (mask.a[i] != 1.0) r.a[i] = -std::numeric_limits<double>::infinity();
  }
  return r;
}

OMat osoftmax_rows(const OMat& x) {
  OMat r(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      r.at(i, j) = std::exp(x.at(i, j) - mx);
      z += r.at(i, j);
    }
    for (std::size_t j = 0; j < x.cols; ++j) r.at(i, j) /= z;
  }
  return r;
}

OMat olayer_norm(const OMat& x, const OMat& gain, const OMat& bias, double eps) {
  OMat r(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double c = x.at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(x.cols);
    const double istd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols; ++j) {
      r.at(i, j) = gain.at(0, j) * (x.at(i, j) - mean) * istd + bias.at(0, j);
    }
  }
  return r;
}

OMat oconcat_cols(const std::vector<OMat>& parts) {
  std::size_t cols = 0;
  for (const OMat& p : parts) cols += p.cols;
  OMat r(parts[0].rows, cols);
  std::size_t off = 0;
  for (const OMat& p : parts) {
    for (std::size_t i = 0; i < p.rows; ++i) {
      for (std::size_t j = 0; j < p.cols; ++j) r.at(i, off + j) = p.at(i, j);
    }
    off += p.cols;
  }
  return r;
}

OMat ostack_rows(const std::vector<OMat>& parts) {
  std::size_t rows = 0;
  for (const OMat& p : parts) rows += p.rows;
  OMat r(rows, parts[0].cols);
  std::size_t off = 0;
  for (const OMat& p : parts) {
    for (std::size_t i = 0; i < p.rows; ++i) {
      for (std::size_t j = 0; j < p.cols; ++j) r.at(off + i, j) = p.at(i, j);
    }
    off += p.rows;
  }
  return r;
}

OMat osoftmax_simplex(const Tensor& logits) {
  return osoftmax_rows(from_tensor(logits));
}

// phi(x W1 + 1_n b1) W2 + 1_n b2, with the biases written as ones-vector
// outer products exactly as they appear once folded back out of the weights.
OMat offn_apply(const OMat& x, const OMat& w1, const OMat& b1, const OMat& w2,
                const OMat& b2) {
  OMat ones = oones_col(x.rows);
  OMat hidden = orelu(oadd(omul(x, w1), omul(ones, b1)));
  return oadd(omul(hidden, w2), omul(ones, b2));
}

// (I_n + sigma(E Z1 Z2^T E^T / sqrt(d))) E Z3, optionally masked.
OMat ohead_self(const OMat& e, const HeadProjections& h, double scale_width,
                const OMat* mask) {
  OMat q = omul(e, from_tensor(h.query_proj));
  OMat k = omul(e, from_tensor(h.key_proj));
  OMat logits = oscale(omul(q, otrans(k)), 1.0 / std::sqrt(scale_width));
  if (mask) logits = oapply_mask(logits, *mask);
  OMat attended = omul(oadd(oident(e.rows), osoftmax_rows(logits)), e);
  return omul(attended, from_tensor(h.value_proj));
}

// (queries + sigma(queries Z1 (kv Z2)^T / sqrt(d)) kv) Z3: the query-side
// residual rides through the value projection, which reduces to the
// single-head cross form when Z3 is the identity.
OMat ohead_cross(const OMat& queries, const OMat& kv, const HeadProjections& h,
                 double scale_width) {
  OMat q = omul(queries, from_tensor(h.query_proj));
  OMat k = omul(kv, from_tensor(h.key_proj));
  OMat logits = oscale(omul(q, otrans(k)), 1.0 / std::sqrt(scale_width));
  OMat readout = oadd(queries, omul(osoftmax_rows(logits), kv));
  return omul(readout, from_tensor(h.value_proj));
}

OMat oencoder_attention(const OMat& e, const EncoderLayerParams& layer,
                        AttentionMode mode, const OMat* mask,
                        double scale_width) {
  if (mode == AttentionMode::concat) {
    std::vector<OMat> parts;
    for (const HeadProjections& h : layer.heads) {
      parts.push_back(ohead_self(e, h, scale_width, mask));
    }
    return omul(oconcat_cols(parts), from_tensor(layer.out_joint));
  }
  OMat kappa = osoftmax_simplex(layer.mix.kappa_logits);
  OMat alpha = osoftmax_simplex(layer.mix.alpha_logits);
  OMat sum(e.rows, e.cols);
  for (std::size_t i = 0; i < layer.heads.size(); ++i) {
    OMat head = ohead_self(e, layer.heads[i], scale_width, mask);
    head = omul(head, from_tensor(layer.heads[i].out_proj));
    head = oscale(head, kappa.at(0, i));
    head = oscale(head, alpha.at(0, i));
    sum = oadd(sum, head);
  }
  return sum;
}

// One encoder layer: E_l = psi(^E_l + FFN(^E_l)) with ^E_l = psi(attention).
OMat oencoder_layer(const OMat& e_prev, const EncoderLayerParams& layer,
                    AttentionMode mode, const OMat* mask) {
  const double scale_width = static_cast<double>(e_prev.cols);
  OMat attn = oencoder_attention(e_prev, layer, mode, mask, scale_width);
  OMat e_hat = olayer_norm(attn, from_tensor(layer.attn_norm.gain),
                           from_tensor(layer.attn_norm.bias), kLayerNormEps);
  OMat ffn = offn_apply(e_hat, from_tensor(layer.ffn_w1),
                        from_tensor(layer.ffn_b1), from_tensor(layer.ffn_w2),
                        from_tensor(layer.ffn_b2));
  return olayer_norm(oadd(e_hat, ffn), from_tensor(layer.ffn_norm.gain),
                     from_tensor(layer.ffn_norm.bias), kLayerNormEps);
}

OMat osinusoidal_pe(std::size_t max_pos, std::size_t d) {
  OMat r(max_pos, d);
  for (std::size_t pos = 0; pos < max_pos; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double rate =
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) / rate;
      r.at(pos, i) = std::sin(angle);
      if (i + 1 < d) r.at(pos, i + 1) = std::cos(angle);
    }
  }
  return r;
}

}  // namespace

std::vector<Tensor> prop2_unrolled(const Tensor& x,
                                   const std::vector<EncoderLayerParams>& layers,
                                   AttentionMode mode) {
  OMat e = from_tensor(x);
  std::vector<Tensor> outputs;
  for (const EncoderLayerParams& layer : layers) {
    e = oencoder_layer(e, layer, mode, nullptr);
    outputs.push_back(to_tensor(e));
  }
  return outputs;
}

std::vector<std::vector<Tensor>> prop3_unrolled(
    const Tensor& x_target, const Tensor& y_enc,
    const std::vector<DecoderLayerParams>& layers) {
  const std::size_t m = x_target.rows();
  if (m == 0) throw ShapeError("prop3_unrolled: empty target");
  OMat r_mask = olower_tri(m);
  OMat d_prev = from_tensor(x_target);
  OMat enc = from_tensor(y_enc);

  std::vector<std::vector<Tensor>> per_layer;
  for (const DecoderLayerParams& layer : layers) {
    const double scale_width = static_cast<double>(d_prev.cols);

    std::vector<OMat> self_parts;
    for (const HeadProjections& h : layer.self_heads) {
      self_parts.push_back(ohead_self(d_prev, h, scale_width, &r_mask));
    }
    OMat d_hat = olayer_norm(
        omul(oconcat_cols(self_parts), from_tensor(layer.self_out_joint)),
        from_tensor(layer.self_norm.gain), from_tensor(layer.self_norm.bias),
        kLayerNormEps);

    std::vector<OMat> cross_parts;
    for (const HeadProjections& h : layer.cross_heads) {
      cross_parts.push_back(ohead_cross(d_hat, enc, h, scale_width));
    }
    OMat d_tilde = olayer_norm(
        omul(oconcat_cols(cross_parts), from_tensor(layer.cross_out_joint)),
        from_tensor(layer.cross_norm.gain), from_tensor(layer.cross_norm.bias),
        kLayerNormEps);

    // Y_{l,t} = psi(M_t ~D_l + M_t FFN(~D_l)) for each t.
    OMat ffn = offn_apply(d_tilde, from_tensor(layer.ffn_w1),
                          from_tensor(layer.ffn_b1), from_tensor(layer.ffn_w2),
                          from_tensor(layer.ffn_b2));
    std::vector<Tensor> per_time;
    for (std::size_t t = 1; t <= m; ++t) {
      OMat sel = oselection(t, m);
      OMat y = olayer_norm(oadd(omul(sel, d_tilde), omul(sel, ffn)),
                           from_tensor(layer.ffn_norm.gain),
                           from_tensor(layer.ffn_norm.bias), kLayerNormEps);
      per_time.push_back(to_tensor(y));
    }
    per_layer.push_back(std::move(per_time));

    d_prev = olayer_norm(oadd(d_tilde, ffn), from_tensor(layer.ffn_norm.gain),
                         from_tensor(layer.ffn_norm.bias), kLayerNormEps);
  }
  return per_layer;
}

std::vector<Tensor> prop4_unrolled(const std::vector<EncodedQuery>& queries,
                                   const MtnModel& model) {
  const ModelConfig& cfg = model.cfg;
  if (cfg.K != 2) {
    throw ConfigError("prop4_unrolled: the session evolution is two-level, got K=" +
                      std::to_string(cfg.K));
  }
  if (queries.empty()) throw ShapeError("prop4_unrolled: no queries");
  const std::size_t n = static_cast<std::size_t>(cfg.max_query_len);
  const std::size_t s = queries.size();
  for (const EncodedQuery& q : queries) {
    if (q.ids.size() != n) {
      throw ShapeError("prop4_unrolled: query does not span the token width");
    }
    for (bool v : q.valid) {
      if (!v) {
        throw ShapeError(
            "prop4_unrolled: padded queries are out of scope, tokens must all "
            "be valid");
      }
    }
  }

  OMat table = from_tensor(model.embedding.table);
  OMat token_pe = osinusoidal_pe(n, cfg.d);

  // Query level: X_q -> Y_{1,L1,q} and its pooled code w_proj Y_{1,L1,q}.
  std::vector<OMat> query_outputs;
  std::vector<OMat> code_rows;
  for (const EncodedQuery& query : queries) {
    OMat x(n, table.cols);
    for (std::size_t i = 0; i < n; ++i) {
      const int id = query.ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= table.rows) {
        throw VocabError("prop4_unrolled: token id out of range");
      }
      for (std::size_t j = 0; j < table.cols; ++j) {
        x.at(i, j) = table.at(static_cast<std::size_t>(id), j);
      }
    }
    if (!model.embedding.input_proj.empty()) {
      x = omul(x, from_tensor(model.embedding.input_proj));
    }
    x = oadd(oscale(x, std::sqrt(static_cast<double>(cfg.d))), token_pe);
    for (const EncoderLayerParams& layer : model.query_encoder) {
      x = oencoder_layer(x, layer, cfg.attention_mode, nullptr);
    }
    query_outputs.push_back(x);
    code_rows.push_back(omul(from_tensor(model.level_proj[0]), x));
  }

  // Session level: position-adjusted codes through the masked encoder.
  OMat codes = ostack_rows(code_rows);
  if (!model.code_encoders[0].empty()) {
    codes = oadd(codes, osinusoidal_pe(s, cfg.d));
    OMat r_mask = olower_tri(s);
    for (const EncoderLayerParams& layer : model.code_encoders[0]) {
      codes = oencoder_layer(codes, layer, cfg.attention_mode, &r_mask);
    }
  }

  // ^Y_{2,L2,q} = C_{t(q)} E_{2,L2} stacks n copies of the code for q, and
  // must agree row for row with the unit-row extraction e_q E_{2,L2}.
  std::vector<OMat> y1_blocks;
  std::vector<OMat> y2_blocks;
  for (std::size_t q = 0; q < s; ++q) {
    y1_blocks.push_back(query_outputs[q]);
    OMat copies = omul(ocopy_column(n, s, q), codes);
    OMat one = omul(ounit_row(s, q), codes);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < copies.cols; ++j) {
        if (copies.at(i, j) != one.at(0, j)) {
          throw ShapeError("prop4_unrolled: copy matrix disagrees with unit row");
        }
      }
    }
    y2_blocks.push_back(std::move(copies));
  }
  OMat y1 = ostack_rows(y1_blocks);
  OMat y2 = ostack_rows(y2_blocks);
  OMat summed = oadd(y1, y2);

  OMat gain = from_tensor(model.fuse_norm.gain);
  OMat bias = from_tensor(model.fuse_norm.bias);
  std::vector<Tensor> outputs;
  for (std::size_t q = 0; q < s; ++q) {
    OMat sel = oselection(n * (q + 1), n * s);
    outputs.push_back(
        to_tensor(olayer_norm(omul(sel, summed), gain, bias, kLayerNormEps)));
  }
  return outputs;
}

namespace {

constexpr double kPropTol[4] = {1e-12, 1e-10, 1e-10, 1e-10};

Tensor sign_flipped(const Tensor& t) {
  std::vector<double> v = t.values();
  for (double& x : v) x = -x;
  return Tensor::from_data(t.rows(), t.cols(), v);
}

Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  return Tensor::uniform(rows, cols, -1.0, 1.0, rng);
}

double worst_entry_diff(const Tensor& a, const Tensor& b, std::size_t rows) {
  double worst = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)));
    }
  }
  return worst;
}

double check_prop1(Rng& rng, bool fault) {
  const std::size_t d_in = 1 + rng.below(6);
  const std::size_t d_h = 1 + rng.below(6);
  const std::size_t d_y = 1 + rng.below(6);
  const std::size_t n = 1 + rng.below(8);
  const Activation acts[] = {Activation::identity, Activation::relu,
                             Activation::tanh};
  // Under fault injection the activations are pinned to ones that cannot
  // mask a flipped output weight behind a clipped-to-zero region.
  Activation act_h = fault ? Activation::tanh : acts[rng.below(3)];
  Activation act_y = fault ? Activation::identity : acts[rng.below(3)];

  RnnParams p = make_rnn(d_in, d_h, d_y, rng, act_h, act_y);
  p.b_h.assign_values(Tensor::uniform(1, d_h, -0.5, 0.5, rng).values());
  p.b_y.assign_values(Tensor::uniform(1, d_y, -0.5, 0.5, rng).values());
  Tensor inputs = random_matrix(n, d_in, rng);
  Tensor h0 = random_matrix(1, d_h, rng);

  RnnParams masked_params = p;
  if (fault) masked_params.w_out = sign_flipped(p.w_out);

  Tape tape;
  RnnTrace trace = rnn_unroll(tape, inputs, h0, p);
  Tensor full = rnn_masked_form(tape, inputs, h0, masked_params, n);
  double err = max_abs_diff(trace.outputs, full);

  const std::size_t t = 1 + rng.below(n);
  Tensor prefix = rnn_masked_form(tape, inputs, h0, masked_params, t);
  err = std::max(err, worst_entry_diff(trace.outputs, prefix, t));
  return err;
}

double check_prop2(Rng& rng, bool fault, int trial) {
  const std::size_t heads = 1 + rng.below(2);
  const std::size_t d = heads * (2 + rng.below(3));
  const std::size_t d_f = d + 1 + rng.below(8);
  const std::size_t n = 1 + rng.below(6);
  const std::size_t layer_count = 1 + rng.below(2);
  const AttentionMode mode =
      trial % 2 == 0 ? AttentionMode::concat : AttentionMode::weighted;

  std::vector<EncoderLayerParams> layers;
  for (std::size_t l = 0; l < layer_count; ++l) {
    layers.push_back(make_encoder_layer(d, d_f, heads, mode, rng));
  }
  Tensor x = random_matrix(n, d, rng);

  std::vector<EncoderLayerParams> oracle_layers = layers;
  if (fault) {
    oracle_layers[0].heads[0].value_proj =
        sign_flipped(layers[0].heads[0].value_proj);
  }
  std::vector<Tensor> unrolled = prop2_unrolled(x, oracle_layers, mode);

  double err = 0.0;
  Tape tape;
  Tensor e = x;
  for (std::size_t l = 0; l < layer_count; ++l) {
    e = encoder_layer_forward(tape, e, layers[l], mode, nullptr,
                              RunMode::eval());
    err = std::max(err, max_abs_diff(e, unrolled[l]));
  }
  return err;
}

double check_prop3(Rng& rng, bool fault) {
  const std::size_t heads = 1 + rng.below(2);
  const std::size_t d = heads * (2 + rng.below(3));
  const std::size_t d_f = d + 1 + rng.below(6);
  const std::size_t m = 1 + rng.below(5);
  const std::size_t enc_rows = 1 + rng.below(6);
  const std::size_t layer_count = 1 + rng.below(2);

  std::vector<DecoderLayerParams> layers;
  for (std::size_t l = 0; l < layer_count; ++l) {
    layers.push_back(make_decoder_layer(d, d_f, heads, rng));
  }
  Tensor x_target = random_matrix(m, d, rng);
  Tensor y_enc = random_matrix(enc_rows, d, rng);

  std::vector<DecoderLayerParams> oracle_layers = layers;
  if (fault) {
    oracle_layers[0].cross_heads[0].value_proj =
        sign_flipped(layers[0].cross_heads[0].value_proj);
  }
  auto unrolled = prop3_unrolled(x_target, y_enc, oracle_layers);

  double err = 0.0;
  Tape tape;
  Tensor d_stream = x_target;
  for (std::size_t l = 0; l < layer_count; ++l) {
    d_stream =
        decoder_layer_forward(tape, d_stream, y_enc, layers[l], RunMode::eval());
    err = std::max(err, max_abs_diff(d_stream, unrolled[l][m - 1]));
  }

  // Every per-time output must match a fresh library run on the truncated
  // target, which exercises the selection matrices against true prefix runs.
  for (std::size_t t = 1; t <= m; ++t) {
    Tape local;
    Tensor prefix_run =
        decoder_forward(local, slice_rows(local, x_target, 0, t), y_enc, layers,
                        RunMode::eval());
    err = std::max(err, max_abs_diff(prefix_run, unrolled[layer_count - 1][t - 1]));
  }

  // Causality probe: moving the last target row may not move earlier rows.
  if (m >= 2) {
    std::vector<double> bumped = x_target.values();
    for (std::size_t j = 0; j < d; ++j) bumped[(m - 1) * d + j] += 0.8;
    Tape t1, t2;
    Tensor out1 = decoder_forward(t1, x_target, y_enc, layers, RunMode::eval());
    Tensor out2 = decoder_forward(t2, Tensor::from_data(m, d, bumped), y_enc,
                                  layers, RunMode::eval());
    err = std::max(err, worst_entry_diff(out1, out2, m - 1));
  }
  return err;
}

double check_prop4(Rng& rng, bool fault, int trial) {
  ModelConfig cfg;
  cfg.P = 1 + static_cast<int>(rng.below(2));
  cfg.d = cfg.P * (2 + static_cast<int>(rng.below(3)));
  cfg.d_f = cfg.d + 2 + static_cast<int>(rng.below(6));
  cfg.d_emb = trial % 3 == 0 ? cfg.d + 1 : cfg.d;
  cfg.L = 1 + static_cast<int>(rng.below(2));
  cfg.L_dec = 1;
  cfg.K = 2;
  cfg.L_levels = {1 + static_cast<int>(rng.below(2))};
  cfg.level_group_caps = {};
  cfg.dropout = 0.0;
  cfg.max_query_len = 2 + static_cast<int>(rng.below(3));
  cfg.attention_mode =
      trial % 2 == 0 ? AttentionMode::concat : AttentionMode::weighted;
  cfg.seed = rng.next();
  const std::size_t vocab = 10 + rng.below(6);
  MtnModel model = make_model(cfg, vocab);

  const std::size_t s = 1 + rng.below(4);
  const std::size_t n = static_cast<std::size_t>(cfg.max_query_len);
  std::vector<EncodedQuery> queries(s);
  for (EncodedQuery& q : queries) {
    q.valid.assign(n, true);
    for (std::size_t i = 0; i < n; ++i) {
      q.ids.push_back(static_cast<int>(rng.below(vocab)));
    }
  }

  MtnModel oracle_model = clone_model(model);
  if (fault) {
    oracle_model.code_encoders[0][0].heads[0].value_proj =
        sign_flipped(model.code_encoders[0][0].heads[0].value_proj);
  }
  std::vector<Tensor> unrolled = prop4_unrolled(queries, oracle_model);

  Tape tape;
  EncodeTrace trace = mtn_encode(tape, queries, model, RunMode::eval());
  double err = 0.0;
  for (std::size_t q = 0; q < s; ++q) {
    const Tensor& stacked = unrolled[q];
    for (std::size_t block = 0; block <= q; ++block) {
      const Tensor& fused = trace.fused[block];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < fused.cols(); ++j) {
          err = std::max(err,
                         std::abs(stacked(block * n + i, j) - fused(i, j)));
        }
      }
    }
  }

  // Causality probe: rewriting the last query may not move earlier queries'
  // fused outputs.
  if (s >= 2) {
    std::vector<EncodedQuery> moved = queries;
    for (std::size_t i = 0; i < n; ++i) {
      moved[s - 1].ids[i] = static_cast<int>(rng.below(vocab));
    }
    Tape t2;
    EncodeTrace after = mtn_encode(t2, moved, model, RunMode::eval());
    for (std::size_t q = 0; q + 1 < s; ++q) {
      err = std::max(err, max_abs_diff(trace.fused[q], after.fused[q]));
    }
  }
  return err;
}

}  // namespace

std::string VerificationReport::to_text() const {
  std::string out;
  char line[128];
  for (const PropertyResult& r : results) {
    std::snprintf(line, sizeof(line), "PROP%d trial=%d max_abs_err=%.3e %s\n",
                  r.prop, r.trial, r.max_abs_err, r.pass ? "PASS" : "FAIL");
    out += line;
  }
  out += pass ? "SUITE PASS\n" : "SUITE FAIL\n";
  return out;
}

VerificationReport run_verification_suite(std::uint64_t seed, int trials,
                                          FaultSite fault) {
  if (trials < 1) {
    throw ConfigError("run_verification_suite: trials must be at least 1, got " +
                      std::to_string(trials));
  }
  VerificationReport report;
  for (int prop = 1; prop <= 4; ++prop) {
    for (int trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(prop) * 1000000 +
                                    static_cast<std::uint64_t>(trial)));
      double err = 0.0;
      switch (prop) {
        case 1:
          err = check_prop1(rng, fault == FaultSite::recurrence);
          break;
        case 2:
          err = check_prop2(rng, fault == FaultSite::encoder, trial);
          break;
        case 3:
          err = check_prop3(rng, fault == FaultSite::decoder);
          break;
        case 4:
          err = check_prop4(rng, fault == FaultSite::session, trial);
          break;
      }
      PropertyResult result;
      result.prop = prop;
      result.trial = trial;
      result.max_abs_err = err;
      result.pass = err <= kPropTol[prop - 1];
      report.pass = report.pass && result.pass;
      report.results.push_back(result);
    }
  }
  return report;
}

}  // namespace mtn
