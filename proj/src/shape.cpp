// SPDX-License-Identifier: Apache-2.0
#include "arbor/shape.hpp"

#include <algorithm>
#include <sstream>

#include "arbor/grammar.hpp"

namespace arbor {

const char* mode_name(Mode m) { return m == Mode::Im ? "im" : "col"; }

std::string ShapeState::to_string() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")/" << mode_name(mode) << "/b=" << branching_factor;
  if (pending) os << "/pending=" << pending->h_out << "x" << pending->w_out;
  return os.str();
}

ShapeState make_im_state(std::int64_t c, std::int64_t h, std::int64_t w) {
  ShapeState s;
  s.shape = {c, h, w};
  s.mode = Mode::Im;
  return s;
}

ShapeState make_col_state(std::int64_t seq, std::int64_t d) {
  ShapeState s;
  s.shape = {seq, d};
  s.mode = Mode::Col;
  return s;
}

const char* shape_error_name(ShapeErrorCode c) {
  switch (c) {
    case ShapeErrorCode::None: return "none";
    case ShapeErrorCode::FeatureCollapsed: return "feature_collapsed";
    case ShapeErrorCode::Divisibility: return "divisibility";
    case ShapeErrorCode::ShapeMismatch: return "shape_mismatch";
    case ShapeErrorCode::ModeViolation: return "mode_violation";
    case ShapeErrorCode::PendingImViolation: return "pending_im_violation";
    case ShapeErrorCode::ArityMismatch: return "arity_mismatch";
    case ShapeErrorCode::LimitExceeded: return "limit_exceeded";
  }
  return "unknown";
}

namespace {

ShapeError err(ShapeErrorCode code, std::string msg) {
  return ShapeError{code, std::move(msg)};
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, int k, int s, int p) {
  return (in + 2 * p - (k - 1) - 1) / s + 1;
}

ShapeResult<Im2colGeometry> im2col_output(std::int64_t h, std::int64_t w, int k,
                                          int s, int p) {
  Im2colGeometry g;
  g.h_out = conv_out_extent(h, k, s, p);
  g.w_out = conv_out_extent(w, k, s, p);
  if (g.h_out <= 0 || g.w_out <= 0) {
    return err(ShapeErrorCode::FeatureCollapsed,
               "im2col collapses " + std::to_string(h) + "x" + std::to_string(w) +
                   " with k=" + std::to_string(k) + ",s=" + std::to_string(s) +
                   ",p=" + std::to_string(p));
  }
  g.l = g.h_out * g.w_out;
  return g;
}

ShapeResult<TransferResult> transfer(const TerminalSpec& op,
                                     const ShapeState& in) {
  TransferResult res;
  ShapeState out = in;

  switch (op.kind) {
    case OpKind::Identity:
    case OpKind::Relu:
    case OpKind::Softmax:
      res.output_states = {out};
      return res;

    case OpKind::Norm:
      // Batch-norm over channels in Im mode, layer-norm over the token
      // dimension in Col mode; scale and shift each.
      res.param_count =
          2 * (in.mode == Mode::Im ? in.shape[0] : in.shape[in.shape.size() - 1]);
      res.output_states = {out};
      return res;

    case OpKind::PosEnc:
      res.param_count = in.elements();
      res.output_states = {out};
      return res;

    case OpKind::Linear: {
      if (in.mode == Mode::Col) {
        std::int64_t d_in = in.shape[1];
        out.shape[1] = op.d;
        res.param_count = d_in * op.d + op.d;
      } else {
        // Channel map, pointwise across H and W (a 1x1 convolution).
        std::int64_t c_in = in.shape[0];
        out.shape[0] = op.d;
        res.param_count = c_in * op.d + op.d;
      }
      res.output_states = {out};
      return res;
    }

    case OpKind::Im2col: {
      if (in.mode != Mode::Im)
        return err(ShapeErrorCode::ModeViolation, "im2col requires im mode");
      auto g = im2col_output(in.shape[1], in.shape[2], op.k, op.s, op.p);
      if (!g) return g.error();
      out.shape = {g.value().l,
                   in.shape[0] * static_cast<std::int64_t>(op.k) * op.k};
      out.mode = Mode::Col;
      out.pending = PendingIm{g.value().h_out, g.value().w_out};
      res.output_states = {out};
      return res;
    }

    case OpKind::Col2im: {
      if (in.mode != Mode::Col)
        return err(ShapeErrorCode::ModeViolation, "col2im requires col mode");
      if (!in.pending)
        return err(ShapeErrorCode::PendingImViolation,
                   "col2im without an open im2col");
      std::int64_t l = in.shape[0];
      if (l != in.pending->h_out * in.pending->w_out)
        return err(ShapeErrorCode::PendingImViolation,
                   "col2im fold target " + std::to_string(in.pending->h_out) + "x" +
                       std::to_string(in.pending->w_out) + " does not match l=" +
                       std::to_string(l));
      out.shape = {in.shape[1], in.pending->h_out, in.pending->w_out};
      out.mode = Mode::Im;
      out.pending.reset();
      res.output_states = {out};
      return res;
    }

    case OpKind::Permute: {
      if (op.order.size() != in.shape.size())
        return err(ShapeErrorCode::ModeViolation,
                   "permute order rank does not match mode");
      out.shape.clear();
      for (int axis : op.order) out.shape.push_back(in.shape[axis - 1]);
      res.output_states = {out};
      return res;
    }

    case OpKind::Clone: {
      out.branching_factor = op.b;
      res.output_states.assign(op.b == 2 ? 2 : 1, out);
      return res;
    }

    case OpKind::Group: {
      if (op.dim < 1 || static_cast<std::size_t>(op.dim) > in.shape.size())
        return err(ShapeErrorCode::ModeViolation, "group dimension absent in mode");
      std::int64_t extent = in.shape[op.dim - 1];
      if (extent % op.b != 0)
        return err(ShapeErrorCode::Divisibility,
                   "group(dim=" + std::to_string(op.dim) + ",b=" +
                       std::to_string(op.b) + ") on extent " +
                       std::to_string(extent));
      out.shape[op.dim - 1] = extent / op.b;
      out.branching_factor = op.b;
      res.output_states.assign(op.b == 2 ? 2 : 1, out);
      return res;
    }

    case OpKind::Conv1d: {
      if (in.mode != Mode::Col)
        return err(ShapeErrorCode::ModeViolation, "conv1d requires col mode");
      std::int64_t s_out = conv_out_extent(in.shape[0], op.k, op.s, op.p);
      if (s_out <= 0)
        return err(ShapeErrorCode::FeatureCollapsed, "conv1d collapses sequence");
      std::int64_t d_in = in.shape[1];
      out.shape = {s_out, op.d};
      res.param_count = d_in * static_cast<std::int64_t>(op.k) * op.d + op.d;
      res.output_states = {out};
      return res;
    }

    case OpKind::Matmul:
    case OpKind::Add:
    case OpKind::Concat:
      return err(ShapeErrorCode::ModeViolation,
                 "aggregation op passed to transfer");
  }
  return err(ShapeErrorCode::ModeViolation, "unhandled op");
}

ShapeResult<ShapeState> aggregate_shape(const TerminalSpec& op,
                                        const std::vector<ShapeState>& states) {
  if (states.empty())
    return err(ShapeErrorCode::ArityMismatch, "aggregation of zero branches");
  const ShapeState& first = states[0];
  for (const auto& s : states) {
    if (s.mode != first.mode)
      return err(ShapeErrorCode::ShapeMismatch, "aggregation across modes");
  }

  // Fold targets survive aggregation only when all branches agree.
  auto merged_pending = first.pending;
  for (const auto& s : states) {
    if (s.pending != merged_pending) {
      merged_pending.reset();
      break;
    }
  }

  ShapeState out = first;
  out.pending = merged_pending;

  switch (op.kind) {
    case OpKind::Add: {
      for (const auto& s : states) {
        if (s.shape != first.shape)
          return err(ShapeErrorCode::ShapeMismatch,
                     "add over differing shapes " + first.to_string() + " vs " +
                         s.to_string());
      }
      return out;
    }

    case OpKind::Concat: {
      if (static_cast<int>(states.size()) != op.b)
        return err(ShapeErrorCode::ArityMismatch,
                   "concat(b=" + std::to_string(op.b) + ") over " +
                       std::to_string(states.size()) + " branches");
      if (op.dim < 1 || static_cast<std::size_t>(op.dim) > first.shape.size())
        return err(ShapeErrorCode::ModeViolation, "concat dimension absent in mode");
      std::int64_t total = 0;
      for (const auto& s : states) {
        if (s.shape.size() != first.shape.size())
          return err(ShapeErrorCode::ShapeMismatch, "concat rank mismatch");
        for (std::size_t i = 0; i < first.shape.size(); ++i) {
          if (static_cast<int>(i) == op.dim - 1) continue;
          if (s.shape[i] != first.shape[i])
            return err(ShapeErrorCode::ShapeMismatch,
                       "concat shapes differ off the concat dimension");
        }
        total += s.shape[op.dim - 1];
      }
      out.shape[op.dim - 1] = total;
      return out;
    }

    case OpKind::Matmul: {
      if (states.size() != 2)
        return err(ShapeErrorCode::ArityMismatch, "matmul requires two branches");
      if (first.mode != Mode::Col)
        return err(ShapeErrorCode::ModeViolation, "matmul requires col mode");
      const auto& a = states[0].shape;
      const auto& b = states[1].shape;
      if (a[1] == b[0]) {
        // Ordinary product (A,B)x(B,C) -> (A,C).
        out.shape = {a[0], b[1]};
        return out;
      }
      if (a == b) {
        // Same shape: implicit transpose of the second operand,
        // (S,D)x(S,D) -> (S,S), the q.k^T attention pattern.
        out.shape = {a[0], b[0]};
        return out;
      }
      return err(ShapeErrorCode::ShapeMismatch,
                 "matmul on incompatible shapes " + states[0].to_string() +
                     " vs " + states[1].to_string());
    }

    default:
      return err(ShapeErrorCode::ModeViolation,
                 "non-aggregation op passed to aggregate_shape");
  }
}

}  // namespace arbor
