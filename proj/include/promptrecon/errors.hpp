#pragma once

#include <stdexcept>
#include <string>

namespace promptrecon {

/// Invalid rotations, degenerate alignments and similar geometric failures.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or grid shapes that do not agree with the configured layout.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration values, unknown keys, unsatisfiable policies.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or corrupt files on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Evaluation preconditions that do not hold (empty sets, mismatched lengths).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss terms during optimization. `term()` names the culprit.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

}  // namespace promptrecon
