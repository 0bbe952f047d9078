#include "mtn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mtn/errors.hpp"

namespace mtn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using DataPtr = std::shared_ptr<detail::TensorData>;

std::string shape_of(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a,
                             const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   a.shape_str() + " and " + b.shape_str());
}

DataPtr make_data(std::size_t rows, std::size_t cols,
                  std::vector<double> values, bool requires_grad) {
  auto d = std::make_shared<detail::TensorData>();
  d->rows = rows;
  d->cols = cols;
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  if (requires_grad) d->grad.assign(rows * cols, 0.0);
  return d;
}

}  // namespace

// Tensor exposes its storage to the op implementations through one private
// accessor, keeping the op code honest about what it touches.
namespace detail {
struct TensorAccess {
  static const std::shared_ptr<TensorData>& data(const Tensor& t) {
    return t.d_;
  }
  static Tensor wrap(std::shared_ptr<TensorData> d) {
    Tensor t;
    t.d_ = std::move(d);
    return t;
  }
};
}  // namespace detail

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return from_data(rows, cols, std::vector<double>(rows * cols, 0.0),
                   requires_grad);
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value,
                    bool requires_grad) {
  return from_data(rows, cols, std::vector<double>(rows * cols, value),
                   requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from_data(n, n, std::move(v));
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols,
                         std::vector<double> values, bool requires_grad) {
  if (values.size() != rows * cols) {
    throw ShapeError("from_data: " + std::to_string(values.size()) +
                     " values for shape " + shape_of(rows, cols));
  }
  Tensor t;
  t.d_ = make_data(rows, cols, std::move(values), requires_grad);
  return t;
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return from_data(1, values.size(), std::vector<double>(values));
}

Tensor Tensor::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    v.insert(v.end(), row.begin(), row.end());
  }
  return from_data(r, c, std::move(v));
}

Tensor Tensor::uniform(std::size_t rows, std::size_t cols, double lo,
                       double hi, Rng& rng, bool requires_grad) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return from_data(rows, cols, std::move(v), requires_grad);
}

std::string Tensor::shape_str() const { return shape_of(rows(), cols()); }

const std::vector<double>& Tensor::grad() const {
  if (!d_->requires_grad) {
    throw TapeError("grad: tensor does not require gradients");
  }
  return d_->grad;
}

Tensor Tensor::grad_as_tensor() const {
  return from_data(rows(), cols(), grad());
}

void Tensor::zero_grad() {
  std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  return from_data(rows(), cols(), d_->values, requires_grad);
}

void Tensor::assign_values(const std::vector<double>& values) {
  if (values.size() != d_->values.size()) {
    throw ShapeError("assign_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str());
  }
  if (d_->producer != nullptr) {
    throw TapeError("assign_values: refusing to mutate a graph result");
  }
  d_->values = values;
}

bool Tensor::all_finite() const {
  for (double v : d_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

ValidityMask ValidityMask::causal(std::size_t n) {
  ValidityMask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  }
  return m;
}

ValidityMask ValidityMask::broadcast_row(std::size_t rows,
                                         const std::vector<bool>& key_valid) {
  ValidityMask m(rows, key_valid.size(), false);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < key_valid.size(); ++j) {
      m.set(i, j, key_valid[j]);
    }
  }
  return m;
}

bool ValidityMask::every_row_has_valid() const {
  for (std::size_t i = 0; i < rows_; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < cols_ && !any; ++j) any = at(i, j);
    if (!any) return false;
  }
  return true;
}

void Tape::mark_result(const DataPtr& result) {
  result->producer = this;
  results_.push_back(result);
}

void Tape::record(std::function<void()> back_op) {
  back_ops_.push_back(std::move(back_op));
}

void Tape::backward(const Tensor& loss) {
  const auto& d = detail::TensorAccess::data(loss);
  if (d->rows != 1 || d->cols != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + loss.shape_str());
  }
  if (d->producer != this) {
    throw TapeError("backward: loss was not produced through this tape");
  }
  if (!d->requires_grad) return;  // nothing on the tape needs gradients
  // Intermediate gradients are scratch space per backward pass. Leaves are
  // untouched here, so their gradients keep accumulating across calls.
  for (const auto& r : results_) {
    std::fill(r->grad.begin(), r->grad.end(), 0.0);
  }
  d->grad[0] = 1.0;
  for (auto it = back_ops_.rbegin(); it != back_ops_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace {

const DataPtr& dat(const Tensor& t) { return detail::TensorAccess::data(t); }

// Finalize an op result: wrap storage, mark provenance, optionally record
// the backward step.
Tensor finish(Tape& tape, DataPtr result, bool recorded,
              std::function<void()> back_op) {
  tape.mark_result(result);
  if (recorded) tape.record(std::move(back_op));
  return detail::TensorAccess::wrap(std::move(result));
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto da = dat(a);
  const auto db = dat(b);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da->values[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &db->values[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const bool rec = da->requires_grad || db->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [da, db, res, m, k, n] {
    if (da->requires_grad) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = &res->grad[i * n];
          const double* brow = &db->values[p * n];
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da->grad[i * k + p] += acc;
        }
      }
    }
    if (db->requires_grad) {
      // dB = A^T * G
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < m; ++i) {
          const double av = da->values[i * k + p];
          if (av == 0.0) continue;
          const double* grow = &res->grad[i * n];
          double* brow = &db->grad[p * n];
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(Tape& tape, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  const auto dx = dat(x);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = dx->values[i * n + j];
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(n, m, std::move(out), rec);
  return finish(tape, res, rec, [dx, res, m, n] {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        dx->grad[i * n + j] += res->grad[j * m + i];
      }
    }
  });
}

namespace {

Tensor elementwise_pair(Tape& tape, const Tensor& a, const Tensor& b,
                        const char* name, double (*fwd)(double, double),
                        void (*bwd)(const DataPtr&, const DataPtr&,
                                    const DataPtr&)) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(name, a, b);
  const auto da = dat(a);
  const auto db = dat(b);
  std::vector<double> out(da->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(da->values[i], db->values[i]);
  }
  const bool rec = da->requires_grad || db->requires_grad;
  auto res = make_data(a.rows(), a.cols(), std::move(out), rec);
  return finish(tape, res, rec, [da, db, res, bwd] { bwd(da, db, res); });
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      tape, a, b, "add", [](double x, double y) { return x + y; },
      [](const DataPtr& da, const DataPtr& db, const DataPtr& res) {
        if (da->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            da->grad[i] += res->grad[i];
          }
        }
        if (db->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            db->grad[i] += res->grad[i];
          }
        }
      });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      tape, a, b, "sub", [](double x, double y) { return x - y; },
      [](const DataPtr& da, const DataPtr& db, const DataPtr& res) {
        if (da->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            da->grad[i] += res->grad[i];
          }
        }
        if (db->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            db->grad[i] -= res->grad[i];
          }
        }
      });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_pair(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](const DataPtr& da, const DataPtr& db, const DataPtr& res) {
        if (da->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            da->grad[i] += res->grad[i] * db->values[i];
          }
        }
        if (db->requires_grad) {
          for (std::size_t i = 0; i < res->grad.size(); ++i) {
            db->grad[i] += res->grad[i] * da->values[i];
          }
        }
      });
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
  const auto dx = dat(x);
  std::vector<double> out(dx->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx->values[i] * c;
  const bool rec = dx->requires_grad;
  auto res = make_data(x.rows(), x.cols(), std::move(out), rec);
  return finish(tape, res, rec, [dx, res, c] {
    for (std::size_t i = 0; i < res->grad.size(); ++i) {
      dx->grad[i] += c * res->grad[i];
    }
  });
}

Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& scalar) {
  if (scalar.rows() != 1 || scalar.cols() != 1) {
    throw ShapeError("scale_by: weight must be 1x1, got " +
                     scalar.shape_str());
  }
  const auto dx = dat(x);
  const auto ds = dat(scalar);
  const double c = ds->values[0];
  std::vector<double> out(dx->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx->values[i] * c;
  const bool rec = dx->requires_grad || ds->requires_grad;
  auto res = make_data(x.rows(), x.cols(), std::move(out), rec);
  return finish(tape, res, rec, [dx, ds, res, c] {
    if (dx->requires_grad) {
      for (std::size_t i = 0; i < res->grad.size(); ++i) {
        dx->grad[i] += c * res->grad[i];
      }
    }
    if (ds->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < res->grad.size(); ++i) {
        acc += res->grad[i] * dx->values[i];
      }
      ds->grad[0] += acc;
    }
  });
}

Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    shape_fail("add_bias_rows", x, bias);
  }
  const std::size_t m = x.rows(), n = x.cols();
  const auto dx = dat(x);
  const auto db = dat(bias);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = dx->values[i * n + j] + db->values[j];
    }
  }
  const bool rec = dx->requires_grad || db->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [dx, db, res, m, n] {
    if (dx->requires_grad) {
      for (std::size_t i = 0; i < m * n; ++i) dx->grad[i] += res->grad[i];
    }
    if (db->requires_grad) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          db->grad[j] += res->grad[i * n + j];
        }
      }
    }
  });
}

Tensor relu(Tape& tape, const Tensor& x) {
  const auto dx = dat(x);
  std::vector<double> out(dx->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = dx->values[i] > 0.0 ? dx->values[i] : 0.0;
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(x.rows(), x.cols(), std::move(out), rec);
  return finish(tape, res, rec, [dx, res] {
    for (std::size_t i = 0; i < res->grad.size(); ++i) {
      if (dx->values[i] > 0.0) dx->grad[i] += res->grad[i];
    }
  });
}

Tensor tanh(Tape& tape, const Tensor& x) {
  const auto dx = dat(x);
  std::vector<double> out(dx->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::tanh(dx->values[i]);
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(x.rows(), x.cols(), std::move(out), rec);
  return finish(tape, res, rec, [dx, res] {
    for (std::size_t i = 0; i < res->grad.size(); ++i) {
      const double y = res->values[i];
      dx->grad[i] += (1.0 - y * y) * res->grad[i];
    }
  });
}

namespace {

// Shared stable-softmax row pass. Writes exp(x - rowmax) normalized; rows
// with no finite entry raise MaskError. -inf entries come out exactly 0.
void softmax_row(const double* x, double* y, std::size_t n,
                 std::size_t row_index) {
  double mx = kNegInf;
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  if (!std::isfinite(mx)) {
    throw MaskError("softmax_rows: row " + std::to_string(row_index) +
                    " has no finite entry");
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= z;
}

}  // namespace

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("softmax_rows: empty rows in " + x.shape_str());
  const auto dx = dat(x);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    softmax_row(&dx->values[i * n], &out[i * n], n, i);
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [dx, res, m, n] {
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = &res->values[i * n];
      const double* g = &res->grad[i * n];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) {
        dx->grad[i * n + j] += y[j] * (g[j] - dot);
      }
    }
  });
}

Tensor log_softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) {
    throw ShapeError("log_softmax_rows: empty rows in " + x.shape_str());
  }
  const auto dx = dat(x);
  std::vector<double> out(m * n);
  std::vector<double> soft(m * n);  // saved for the backward pass
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = &dx->values[i * n];
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xi[j]);
    if (!std::isfinite(mx)) {
      throw MaskError("log_softmax_rows: row " + std::to_string(i) +
                      " has no finite entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = xi[j] - lse;
      soft[i * n + j] = std::exp(xi[j] - lse);
    }
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec,
                [dx, res, soft = std::move(soft), m, n] {
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* g = &res->grad[i * n];
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < n; ++j) gsum += g[j];
                    for (std::size_t j = 0; j < n; ++j) {
                      dx->grad[i * n + j] += g[j] - soft[i * n + j] * gsum;
                    }
                  }
                });
}

Tensor layer_norm_rows(Tape& tape, const Tensor& x, const Tensor& gain,
                       const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 2) {
    throw ShapeError("layer_norm_rows: need at least 2 columns, got " +
                     x.shape_str());
  }
  if (gain.rows() != 1 || gain.cols() != n) shape_fail("layer_norm_rows", x, gain);
  if (bias.rows() != 1 || bias.cols() != n) shape_fail("layer_norm_rows", x, bias);
  const auto dx = dat(x);
  const auto dg = dat(gain);
  const auto db = dat(bias);
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> istd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = &dx->values[i * n];
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xi[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);
    istd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mean) * istd[i];
      out[i * n + j] = dg->values[j] * xhat[i * n + j] + db->values[j];
    }
  }
  const bool rec =
      dx->requires_grad || dg->requires_grad || db->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(
      tape, res, rec,
      [dx, dg, db, res, xhat = std::move(xhat), istd = std::move(istd), m,
       n] {
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = &res->grad[i * n];
          const double* xh = &xhat[i * n];
          if (dx->requires_grad) {
            // dx = istd * (gh - mean(gh) - xhat * mean(gh .* xhat)),
            // with gh = g .* gain.
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[j] * dg->values[j];
              s1 += gh;
              s2 += gh * xh[j];
            }
            s1 /= dn;
            s2 /= dn;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = g[j] * dg->values[j];
              dx->grad[i * n + j] += istd[i] * (gh - s1 - xh[j] * s2);
            }
          }
          if (dg->requires_grad) {
            for (std::size_t j = 0; j < n; ++j) {
              dg->grad[j] += g[j] * xh[j];
            }
          }
          if (db->requires_grad) {
            for (std::size_t j = 0; j < n; ++j) db->grad[j] += g[j];
          }
        }
      });
}

Tensor masked_fill(Tape& tape, const Tensor& x, const ValidityMask& mask) {
  const std::size_t m = x.rows(), n = x.cols();
  if (mask.rows() != m || mask.cols() != n) {
    throw ShapeError("masked_fill: mask " + std::to_string(mask.rows()) +
                     "x" + std::to_string(mask.cols()) + " for tensor " +
                     x.shape_str());
  }
  const auto dx = dat(x);
  std::vector<double> out(m * n);
  std::vector<std::uint8_t> keep(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool v = mask.at(i, j);
      keep[i * n + j] = v ? 1 : 0;
      out[i * n + j] = v ? dx->values[i * n + j] : kNegInf;
    }
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [dx, res, keep = std::move(keep)] {
    for (std::size_t i = 0; i < res->grad.size(); ++i) {
      if (keep[i]) dx->grad[i] += res->grad[i];
    }
  });
}

Tensor lookup_rows(Tape& tape, const Tensor& table,
                   const std::vector<int>& ids) {
  const std::size_t v = table.rows(), n = table.cols();
  const auto dt = dat(table);
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw VocabError("lookup_rows: id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(v) + " rows");
    }
    const double* src = &dt->values[static_cast<std::size_t>(ids[i]) * n];
    std::copy(src, src + n, &out[i * n]);
  }
  const bool rec = dt->requires_grad;
  auto res = make_data(ids.size(), n, std::move(out), rec);
  return finish(tape, res, rec, [dt, res, ids, n] {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = &dt->grad[static_cast<std::size_t>(ids[i]) * n];
      const double* g = &res->grad[i * n];
      for (std::size_t j = 0; j < n; ++j) dst[j] += g[j];
    }
  });
}

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) shape_fail("concat_rows", parts.front(), p);
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  bool rec = false;
  std::vector<DataPtr> srcs;
  srcs.reserve(parts.size());
  for (const auto& p : parts) {
    const auto dp = dat(p);
    out.insert(out.end(), dp->values.begin(), dp->values.end());
    rec = rec || dp->requires_grad;
    srcs.push_back(dp);
  }
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [srcs = std::move(srcs), res] {
    std::size_t off = 0;
    for (const auto& s : srcs) {
      if (s->requires_grad) {
        for (std::size_t i = 0; i < s->grad.size(); ++i) {
          s->grad[i] += res->grad[off + i];
        }
      }
      off += s->values.size();
    }
  });
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) shape_fail("concat_cols", parts.front(), p);
    n += p.cols();
  }
  std::vector<double> out(m * n);
  bool rec = false;
  std::vector<DataPtr> srcs;
  srcs.reserve(parts.size());
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto dp = dat(p);
    for (std::size_t i = 0; i < m; ++i) {
      std::copy(&dp->values[i * p.cols()], &dp->values[(i + 1) * p.cols()],
                &out[i * n + off]);
    }
    off += p.cols();
    rec = rec || dp->requires_grad;
    srcs.push_back(dp);
  }
  auto res = make_data(m, n, std::move(out), rec);
  return finish(tape, res, rec, [srcs = std::move(srcs), res, m, n] {
    std::size_t off2 = 0;
    for (const auto& s : srcs) {
      const std::size_t c = s->cols;
      if (s->requires_grad) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            s->grad[i * c + j] += res->grad[i * n + off2 + j];
          }
        }
      }
      off2 += c;
    }
  });
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin,
                  std::size_t count) {
  if (begin + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " +
                     x.shape_str());
  }
  const std::size_t n = x.cols();
  const auto dx = dat(x);
  std::vector<double> out(dx->values.begin() + begin * n,
                          dx->values.begin() + (begin + count) * n);
  const bool rec = dx->requires_grad;
  auto res = make_data(count, n, std::move(out), rec);
  return finish(tape, res, rec, [dx, res, begin, n] {
    for (std::size_t i = 0; i < res->grad.size(); ++i) {
      dx->grad[begin * n + i] += res->grad[i];
    }
  });
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin,
                  std::size_t count) {
  if (begin + count > x.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " +
                     x.shape_str());
  }
  const std::size_t m = x.rows(), n = x.cols();
  const auto dx = dat(x);
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(&dx->values[i * n + begin], &dx->values[i * n + begin + count],
              &out[i * count]);
  }
  const bool rec = dx->requires_grad;
  auto res = make_data(m, count, std::move(out), rec);
  return finish(tape, res, rec, [dx, res, begin, count, m, n] {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < count; ++j) {
        dx->grad[i * n + begin + j] += res->grad[i * count + j];
      }
    }
  });
}

Tensor sum_all(Tape& tape, const Tensor& x) {
  const auto dx = dat(x);
  double acc = 0.0;
  for (double v : dx->values) acc += v;
  const bool rec = dx->requires_grad;
  auto res = make_data(1, 1, {acc}, rec);
  return finish(tape, res, rec, [dx, res] {
    const double g = res->grad[0];
    for (std::size_t i = 0; i < dx->grad.size(); ++i) dx->grad[i] += g;
  });
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng* rng,
               bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) {
    throw ConfigError("dropout: rate must be < 1, got " +
                      std::to_string(rate));
  }
  if (rng == nullptr) {
    throw EvalError("dropout: training mode needs a random source");
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& v : mask) v = rng->uniform() < rate ? 0.0 : keep_scale;
  return mul(tape, x, Tensor::from_data(x.rows(), x.cols(), std::move(mask)));
}

std::size_t argmax_in_row(const Tensor& x, std::size_t row) {
  std::size_t best = 0;
  double bv = x(row, 0);
  for (std::size_t j = 1; j < x.cols(); ++j) {
    if (x(row, j) > bv) {  // strict: ties keep the lowest index
      bv = x(row, j);
      best = j;
    }
  }
  return best;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  }
  return m;
}

}  // namespace mtn
