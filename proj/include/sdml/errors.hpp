#pragma once

#include <stdexcept>
#include <string>

namespace sdml {

// Shape/dimension mismatch between tensors; message names both shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameter or model/data dimensioning.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Out-of-range class index or token id.
struct LabelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed manifest line; message carries the 1-based line number.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Semantically invalid data (degenerate ground-truth rectangle, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint cannot be loaded (bad magic, version or precision mismatch).
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Metric undefined on the given inputs (e.g. single-class AUC).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training aborted (non-finite loss); message carries the diagnostic dump.
struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sdml
