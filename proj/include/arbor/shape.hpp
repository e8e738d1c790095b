// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace arbor {

struct TerminalSpec;

// Feature mode. Im features are 3-dimensional (C,H,W); Col features are
// 2-dimensional (S,D). The batch dimension is never part of a ShapeState.
enum class Mode { Im, Col };

const char* mode_name(Mode m);

// Target image shape remembered between an im2col and the col2im that
// folds the tokens back. Only the spatial extent is stored; the channel
// count of the folded tensor comes from the token dimension at fold time.
struct PendingIm {
  std::int64_t h_out = 0;
  std::int64_t w_out = 0;
  bool operator==(const PendingIm&) const = default;
};

// The parameter triple threaded through sampling: tensor shape (batchless),
// feature mode, and the innermost enclosing branching factor.
struct ShapeState {
  std::vector<std::int64_t> shape;
  Mode mode = Mode::Im;
  int branching_factor = 1;
  std::optional<PendingIm> pending;

  std::int64_t elements() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  bool well_formed() const {
    if (mode == Mode::Im && shape.size() != 3) return false;
    if (mode == Mode::Col && shape.size() != 2) return false;
    for (auto d : shape)
      if (d < 1) return false;
    return true;
  }
  bool operator==(const ShapeState&) const = default;
  std::string to_string() const;
};

ShapeState make_im_state(std::int64_t c, std::int64_t h, std::int64_t w);
ShapeState make_col_state(std::int64_t s, std::int64_t d);

// Distinct causes so the sampler can backtrack (and tests can assert) on
// the exact failure.
enum class ShapeErrorCode {
  None,
  FeatureCollapsed,   // im2col/conv1d output extent <= 0
  Divisibility,       // group split does not divide evenly
  ShapeMismatch,      // aggregation inputs incompatible
  ModeViolation,      // op not defined in this mode
  PendingImViolation, // col2im without a usable fold target
  ArityMismatch,      // aggregation input count vs branching factor
  LimitExceeded,      // feature-element budget
};

const char* shape_error_name(ShapeErrorCode c);

struct ShapeError {
  ShapeErrorCode code = ShapeErrorCode::None;
  std::string message;
};

// Minimal expected-or-error carrier; shape failures are ordinary control
// flow during sampling, not exceptions.
template <typename T>
class ShapeResult {
 public:
  ShapeResult(T value) : value_(std::move(value)) {}
  ShapeResult(ShapeError err) : error_(std::move(err)) {}

  bool ok() const { return value_.has_value(); }
  explicit operator bool() const { return ok(); }
  const T& value() const { return *value_; }
  T& value() { return *value_; }
  const ShapeError& error() const { return error_; }

 private:
  std::optional<T> value_;
  ShapeError error_;
};

struct TransferResult {
  // One state per stored child: two for branching with b=2, one otherwise.
  std::vector<ShapeState> output_states;
  std::int64_t param_count = 0;
};

// Output geometry of im2col: number of column vectors l and the spatial
// extent (h_out, w_out) with l = h_out * w_out.
struct Im2colGeometry {
  std::int64_t l = 0;
  std::int64_t h_out = 0;
  std::int64_t w_out = 0;
};

std::int64_t conv_out_extent(std::int64_t in, int k, int s, int p);

ShapeResult<Im2colGeometry> im2col_output(std::int64_t h, std::int64_t w, int k,
                                          int s, int p);

// Per-terminal shape/mode transfer. `op` must be a one-to-one or branching
// terminal; aggregations go through aggregate_shape.
ShapeResult<TransferResult> transfer(const TerminalSpec& op,
                                     const ShapeState& input_state);

// Merge the branch output states through an aggregation terminal. `states`
// holds one entry per branch (replicated branches expanded by the caller).
ShapeResult<ShapeState> aggregate_shape(const TerminalSpec& op,
                                        const std::vector<ShapeState>& states);

}  // namespace arbor
