#pragma once

#include <stdexcept>
#include <string>

namespace mtn {

// Dimension disagreement between operands. Messages name both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A softmax row with no finite entry, i.e. a fully masked attention row.
struct MaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// backward() called on a tensor that the given tape did not produce.
struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// Rejected model configuration (unknown key, inconsistent arities, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token id outside the vocabulary, or a broken vocabulary file.
struct VocabError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input text not in the expected format (query logs, dataset files).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Records out of order where time-sorted input is required.
struct OrderingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric evaluation produced a non-finite value where a finite one is
// required (loss values, finite-difference probes).
struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint file problems keep their cause machine-readable so callers can
// distinguish a wrong file from a damaged one.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, bad_version, truncated, corrupt };

  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mtn
