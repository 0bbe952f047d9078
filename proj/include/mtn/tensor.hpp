#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "mtn/rng.hpp"

namespace mtn {

class Tape;

namespace detail {

struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that created this tensor, if any
};

struct TensorAccess;

}  // namespace detail

// Dense 2-D matrix of doubles, row-major. Values are immutable after
// construction; the gradient buffer is the only mutable part. Copying a
// Tensor copies a handle, not the storage.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}

  static Tensor zeros(std::size_t rows, std::size_t cols,
                      bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double value,
                     bool requires_grad = false);
  static Tensor identity(std::size_t n);
  static Tensor from_data(std::size_t rows, std::size_t cols,
                          std::vector<double> values,
                          bool requires_grad = false);
  static Tensor row(std::initializer_list<double> values);
  static Tensor from_rows(
      std::initializer_list<std::initializer_list<double>> rows);
  // Entries drawn independently from U[lo, hi).
  static Tensor uniform(std::size_t rows, std::size_t cols, double lo,
                        double hi, Rng& rng, bool requires_grad = false);

  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t size() const { return d_->values.size(); }
  bool empty() const { return d_->values.empty(); }
  std::string shape_str() const;

  double operator()(std::size_t i, std::size_t j) const {
    return d_->values[i * d_->cols + j];
  }
  const std::vector<double>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  const std::vector<double>& grad() const;
  Tensor grad_as_tensor() const;
  void zero_grad();

  // Deep copy of the values into a fresh leaf tensor.
  Tensor clone(bool requires_grad = false) const;

  // Replace the values in place, preserving shape. This is the single
  // mutation path, reserved for optimizer updates and checkpoint restore;
  // graph results must never be the target.
  void assign_values(const std::vector<double>& values);

  bool all_finite() const;
  bool same_data(const Tensor& other) const { return d_ == other.d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;

  friend class Tape;
  friend struct detail::TensorAccess;
};

// Per-position validity for attention masking. True marks a position a
// query row is allowed to attend to.
class ValidityMask {
 public:
  ValidityMask(std::size_t rows, std::size_t cols, bool valid = true)
      : rows_(rows), cols_(cols), valid_(rows * cols, valid ? 1 : 0) {}

  static ValidityMask all_valid(std::size_t rows, std::size_t cols) {
    return ValidityMask(rows, cols, true);
  }
  // Row i may attend to columns 0..i (inclusive).
  static ValidityMask causal(std::size_t n);
  // Every row sees the same validity pattern (keys valid per column).
  static ValidityMask broadcast_row(std::size_t rows,
                                    const std::vector<bool>& key_valid);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool at(std::size_t i, std::size_t j) const {
    return valid_[i * cols_ + j] != 0;
  }
  void set(std::size_t i, std::size_t j, bool v) {
    valid_[i * cols_ + j] = v ? 1 : 0;
  }
  // Rows with no valid entry would make softmax degenerate; callers reject
  // such masks up front.
  bool every_row_has_valid() const;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> valid_;
};

// Records the forward pass and replays it backwards. A tape and the tensors
// built through it belong to one logical thread; gradients accumulate into
// leaf tensors additively across backward() calls.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse. The loss
  // must be a 1x1 tensor produced through this tape.
  void backward(const Tensor& loss);

  std::size_t recorded_ops() const { return back_ops_.size(); }

  // Internal: ops call these to register results and their backward steps.
  void mark_result(const std::shared_ptr<detail::TensorData>& result);
  void record(std::function<void()> back_op);

 private:
  std::vector<std::function<void()>> back_ops_;
  std::vector<std::shared_ptr<detail::TensorData>> results_;
};

void backward(const Tensor& loss, Tape& tape);

// --- Differentiable operations -------------------------------------------
//
// Every op validates shapes (ShapeError on mismatch), computes its result
// eagerly, and registers a backward step on the tape only when some input
// requires a gradient.

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
// Elementwise product.
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double c);
// Multiply by a 1x1 tensor (used for learned scalar weights).
Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& scalar);
// Add a 1xN row to every row of x. Also serves as "broadcast a code vector
// over all rows".
Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor relu(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
// Row-wise softmax. Entries at -inf get weight exactly zero; a row with no
// finite entry raises MaskError.
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor log_softmax_rows(Tape& tape, const Tensor& x);
// Row-wise standardization with learned gain/bias (1xN each). Uses the
// population variance; eps keeps the denominator positive.
Tensor layer_norm_rows(Tape& tape, const Tensor& x, const Tensor& gain,
                       const Tensor& bias, double eps);
// Keep valid positions, set the rest to -inf. Gradients flow only through
// valid positions.
Tensor masked_fill(Tape& tape, const Tensor& x, const ValidityMask& mask);
// Gather rows of a table by id; repeated ids accumulate gradient.
Tensor lookup_rows(Tape& tape, const Tensor& table,
                   const std::vector<int>& ids);
Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin,
                  std::size_t count);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin,
                  std::size_t count);
// Sum of all entries as a 1x1 tensor.
Tensor sum_all(Tape& tape, const Tensor& x);

// Inverted dropout: keep with probability 1-rate and rescale by 1/(1-rate).
// Identity when not training or rate == 0.
Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng* rng,
               bool training);

// --- Non-differentiable helpers ------------------------------------------

std::size_t argmax_in_row(const Tensor& x, std::size_t row);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mtn
