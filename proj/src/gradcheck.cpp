#include "mtn/gradcheck.hpp"

#include <cmath>

#include "mtn/errors.hpp"

namespace mtn {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Tensor y = f(tape, x);
  if (y.rows() != 1 || y.cols() != 1) {
    throw EvalError("finite_diff_check: f must return 1x1, got " +
                    y.shape_str());
  }
  const double v = y(0, 0);
  if (!std::isfinite(v)) {
    throw EvalError("finite_diff_check: f evaluated to a non-finite value");
  }
  return v;
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  Tensor leaf = x.clone(/*requires_grad=*/true);
  Tape tape;
  Tensor loss = f(tape, leaf);
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw EvalError("finite_diff_check: f must return 1x1, got " +
                    loss.shape_str());
  }
  if (!std::isfinite(loss(0, 0))) {
    throw EvalError("finite_diff_check: f evaluated to a non-finite value");
  }
  tape.backward(loss);
  const std::vector<double> analytic = leaf.grad();

  double worst = 0.0;
  std::vector<double> probe = x.values();
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const double up = eval_scalar(f, Tensor::from_data(x.rows(), x.cols(), probe));
    probe[k] = orig - h;
    const double dn = eval_scalar(f, Tensor::from_data(x.rows(), x.cols(), probe));
    probe[k] = orig;
    const double numeric = (up - dn) / (2.0 * h);
    const double err = std::abs(analytic[k] - numeric) /
                       (std::abs(analytic[k]) + std::abs(numeric) + 1e-12);
    if (err > worst) worst = err;
  }
  return worst;
}

}  // namespace mtn
