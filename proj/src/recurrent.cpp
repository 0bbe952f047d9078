#include "mtn/recurrent.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "mtn/errors.hpp"

namespace mtn {
namespace {

Tensor uniform_fan_in(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  return Tensor::uniform(rows, cols, -bound, bound, rng, /*requires_grad=*/true);
}

void check_step_shapes(const Tensor& x_t, const Tensor& h_prev,
                       const RnnParams& p) {
  if (x_t.rows() != 1 || h_prev.rows() != 1) {
    throw ShapeError("rnn_step: x_t and h_prev must be single rows, got " +
                     x_t.shape_str() + " and " + h_prev.shape_str());
  }
  if (x_t.cols() != p.w_in.rows()) {
    throw ShapeError("rnn_step: input width " + std::to_string(x_t.cols()) +
                     " does not match w_in rows " +
                     std::to_string(p.w_in.rows()));
  }
  if (h_prev.cols() != p.u_rec.rows()) {
    throw ShapeError("rnn_step: state width " + std::to_string(h_prev.cols()) +
                     " does not match u_rec rows " +
                     std::to_string(p.u_rec.rows()));
  }
}

}  // namespace

Tensor apply_activation(Tape& tape, const Tensor& x, Activation act) {
  switch (act) {
    case Activation::identity:
      return x;
    case Activation::relu:
      return relu(tape, x);
    case Activation::tanh:
      return tanh(tape, x);
  }
  throw ConfigError("apply_activation: unknown activation");
}

RnnParams make_rnn(std::size_t d_in, std::size_t d_h, std::size_t d_y,
                   Rng& rng, Activation act_h, Activation act_y) {
  RnnParams p;
  p.w_in = uniform_fan_in(d_in, d_h, rng);
  p.u_rec = uniform_fan_in(d_h, d_h, rng);
  p.b_h = Tensor::zeros(1, d_h, /*requires_grad=*/true);
  p.w_out = uniform_fan_in(d_h, d_y, rng);
  p.b_y = Tensor::zeros(1, d_y, /*requires_grad=*/true);
  p.act_h = act_h;
  p.act_y = act_y;
  return p;
}

std::pair<Tensor, Tensor> rnn_step(Tape& tape, const Tensor& x_t,
                                   const Tensor& h_prev, const RnnParams& p) {
  check_step_shapes(x_t, h_prev, p);
  Tensor pre = add(tape, add(tape, matmul(tape, x_t, p.w_in),
                             matmul(tape, h_prev, p.u_rec)),
                   p.b_h);
  Tensor h_t = apply_activation(tape, pre, p.act_h);
  Tensor y_t = apply_activation(
      tape, add(tape, matmul(tape, h_t, p.w_out), p.b_y), p.act_y);
  return {y_t, h_t};
}

RnnTrace rnn_unroll(Tape& tape, const Tensor& inputs, const Tensor& h0,
                    const RnnParams& p) {
  if (inputs.rows() == 0) {
    throw ShapeError("rnn_unroll: inputs must have at least one row");
  }
  std::vector<Tensor> outputs;
  std::vector<Tensor> states;
  Tensor h = h0;
  for (std::size_t t = 0; t < inputs.rows(); ++t) {
    auto [y_t, h_t] = rnn_step(tape, slice_rows(tape, inputs, t, 1), h, p);
    outputs.push_back(y_t);
    states.push_back(h_t);
    h = h_t;
  }
  return {concat_rows(tape, outputs), concat_rows(tape, states)};
}

Tensor rnn_masked_form(Tape& tape, const Tensor& inputs, const Tensor& h0,
                       const RnnParams& p, std::size_t t) {
  const std::size_t n = inputs.rows();
  if (n == 0) {
    throw ShapeError("rnn_masked_form: inputs must have at least one row");
  }
  if (t == 0 || t > n) {
    throw ShapeError("rnn_masked_form: step " + std::to_string(t) +
                     " out of range for " + std::to_string(n) + " inputs");
  }

  // States still come from the recurrence (each xtilde row needs h_{r-1});
  // what changes is how the outputs are assembled from them.
  std::vector<Tensor> prev_states;
  Tensor h = h0;
  for (std::size_t r = 0; r < n; ++r) {
    prev_states.push_back(h);
    Tensor pre = add(tape,
                     add(tape, matmul(tape, slice_rows(tape, inputs, r, 1), p.w_in),
                         matmul(tape, h, p.u_rec)),
                     p.b_h);
    h = apply_activation(tape, pre, p.act_h);
  }

  Tensor xt = concat_cols(tape, {inputs, concat_rows(tape, prev_states)});
  Tensor wt = concat_rows(tape, {p.w_in, p.u_rec});
  Tensor ones_n = Tensor::full(n, 1, 1.0);
  Tensor h_all = apply_activation(
      tape, add(tape, matmul(tape, xt, wt), matmul(tape, ones_n, p.b_h)),
      p.act_h);

  Tensor m_t = Tensor::zeros(t, n);
  {
    std::vector<double> sel(t * n, 0.0);
    for (std::size_t i = 0; i < t; ++i) sel[i * n + i] = 1.0;
    m_t.assign_values(sel);
  }
  Tensor ones_t = Tensor::full(t, 1, 1.0);
  Tensor selected = matmul(tape, m_t, h_all);
  return apply_activation(
      tape,
      add(tape, matmul(tape, selected, p.w_out), matmul(tape, ones_t, p.b_y)),
      p.act_y);
}

}  // namespace mtn
