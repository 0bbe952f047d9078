#pragma once

#include <utility>

#include "mtn/tensor.hpp"

namespace mtn {

enum class Activation { identity, relu, tanh };

Tensor apply_activation(Tape& tape, const Tensor& x, Activation act);

// Elman-style recurrent cell:
//   h_t = act_h(x_t W_in + h_{t-1} U_rec + b_h)
//   y_t = act_y(h_t W_out + b_y)
struct RnnParams {
  Tensor w_in;   // d_in x d_h
  Tensor u_rec;  // d_h x d_h
  Tensor b_h;    // 1 x d_h
  Tensor w_out;  // d_h x d_y
  Tensor b_y;    // 1 x d_y
  Activation act_h = Activation::tanh;
  Activation act_y = Activation::identity;
};

RnnParams make_rnn(std::size_t d_in, std::size_t d_h, std::size_t d_y,
                   Rng& rng, Activation act_h = Activation::tanh,
                   Activation act_y = Activation::identity);

// One step: returns (y_t, h_t).
std::pair<Tensor, Tensor> rnn_step(Tape& tape, const Tensor& x_t,
                                   const Tensor& h_prev, const RnnParams& p);

struct RnnTrace {
  Tensor outputs;  // n x d_y, row t is y_{t+1}
  Tensor states;   // n x d_h, row t is h_{t+1}
};

RnnTrace rnn_unroll(Tape& tape, const Tensor& inputs, const Tensor& h0,
                    const RnnParams& p);

// Single-expression restatement of the recurrence: with rows
// xtilde_r = [x_r, h_{r-1}] stacked into Xt and Wt = [W_in; U_rec],
//   Y_t = act_y(M_t act_h(Xt Wt + 1 b_h) W_out + 1 b_y)
// where M_t is the explicit t x n row-selection matrix. Returns the first t
// output rows. The selection matrix and the ones-vector bias broadcasts are
// materialized literally rather than shortcut, so this path exercises the
// block-matrix form end to end.
Tensor rnn_masked_form(Tape& tape, const Tensor& inputs, const Tensor& h0,
                       const RnnParams& p, std::size_t t);

}  // namespace mtn
