// SPDX-License-Identifier: Apache-2.0
#include "arbor/interp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "arbor/kernels.hpp"

namespace arbor {

namespace {

constexpr double kLeakySlope = 0.01;
constexpr double kNormEps = 1e-5;
constexpr double kRunningMomentum = 0.1;

namespace kn = arbor::kernels;

std::string replica_key(int node_id, const std::vector<int>& replicas) {
  std::string key = std::to_string(node_id);
  for (int r : replicas) {
    key += '@';
    key += std::to_string(r);
  }
  return key;
}

const TerminalSpec* family_leaf(const DerivationNode& node) {
  if (node.children.size() == 1 && node.children[0].is_leaf())
    return &node.children[0].terminal();
  return nullptr;
}

bool is_branching_module(const DerivationNode& node) {
  return !node.is_leaf() && node.children.size() >= 3 &&
         !node.children[0].is_leaf() &&
         node.children[0].nonterminal() == Nonterminal::B;
}

void walk_leaves(const DerivationNode& node, std::vector<int>& replicas,
                 const std::function<void(const DerivationNode&,
                                          const std::string&,
                                          const ShapeState&)>& fn) {
  if (node.is_leaf()) {
    if (!node.in_state)
      throw std::logic_error("leaf without inferred state; run infer_shapes");
    fn(node, replica_key(node.node_id, replicas), *node.in_state);
    return;
  }
  if (is_branching_module(node)) {
    const auto& ch = node.children;
    walk_leaves(ch[0], replicas, fn);
    const TerminalSpec* bterm = family_leaf(ch[0]);
    const int b = bterm ? bterm->b : 2;
    if (ch.size() == 3) {
      for (int r = 0; r < b; ++r) {
        replicas.push_back(r);
        walk_leaves(ch[1], replicas, fn);
        replicas.pop_back();
      }
    } else {
      walk_leaves(ch[1], replicas, fn);
      walk_leaves(ch[2], replicas, fn);
    }
    walk_leaves(ch.back(), replicas, fn);
    return;
  }
  for (const auto& c : node.children) walk_leaves(c, replicas, fn);
}

}  // namespace

void for_each_leaf_instance(
    const ArchitectureTree& tree,
    const std::function<void(const DerivationNode&, const std::string&,
                             const ShapeState&)>& fn) {
  std::vector<int> replicas;
  walk_leaves(tree.root, replicas, fn);
}

std::int64_t ParamStore::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& [key, set] : sets)
    for (const auto& [name, t] : set.tensors) total += t.size();
  return total;
}

namespace {

Tensor uniform_init(std::vector<std::int64_t> dims, std::int64_t fan_in,
                    Rng& rng) {
  Tensor t(std::move(dims));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& x : t.data) x = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

Tensor const_tensor(std::vector<std::int64_t> dims, double value) {
  Tensor t(std::move(dims));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

void init_leaf_params(const TerminalSpec& op, const ShapeState& in,
                      ParamSet& set, Rng& rng) {
  switch (op.kind) {
    case OpKind::Linear: {
      const std::int64_t d_in = in.mode == Mode::Col ? in.shape[1] : in.shape[0];
      set.tensors["weight"] = uniform_init({op.d, d_in}, d_in, rng);
      set.tensors["bias"] = const_tensor({op.d}, 0.0);
      break;
    }
    case OpKind::Conv1d: {
      const std::int64_t d_in = in.shape[1] * op.k;
      set.tensors["weight"] = uniform_init({op.d, d_in}, d_in, rng);
      set.tensors["bias"] = const_tensor({op.d}, 0.0);
      break;
    }
    case OpKind::Norm: {
      const std::int64_t n =
          in.mode == Mode::Im ? in.shape[0] : in.shape[in.shape.size() - 1];
      set.tensors["scale"] = const_tensor({n}, 1.0);
      set.tensors["shift"] = const_tensor({n}, 0.0);
      if (in.mode == Mode::Im) {
        set.buffers["running_mean"] = const_tensor({n}, 0.0);
        set.buffers["running_var"] = const_tensor({n}, 1.0);
      }
      break;
    }
    case OpKind::PosEnc: {
      Tensor t(in.shape);
      for (auto& x : t.data) x = rng.normal(0.0, 0.02);
      set.tensors["pos"] = std::move(t);
      break;
    }
    default:
      break;
  }
}

}  // namespace

ParamStore init_params(const ArchitectureTree& tree, Rng& rng) {
  if (!tree.root.out_state)
    throw std::logic_error("init_params requires inferred shapes");
  ParamStore store;
  for_each_leaf_instance(tree, [&](const DerivationNode& leaf,
                                   const std::string& key,
                                   const ShapeState& in) {
    ParamSet set;
    init_leaf_params(leaf.terminal(), in, set, rng);
    if (!set.tensors.empty() || !set.buffers.empty())
      store.sets[key] = std::move(set);
  });

  // Head parameters.
  const ShapeState& feat = *tree.root.out_state;
  ParamSet head;
  if (tree.head.kind == TaskKind::Classification) {
    const std::int64_t d = feat.mode == Mode::Im ? feat.shape[0] : feat.shape[1];
    head.tensors["weight"] = uniform_init({tree.head.num_classes, d}, d, rng);
    head.tensors["bias"] = const_tensor({tree.head.num_classes}, 0.0);
  } else {
    const std::int64_t c_in = feat.mode == Mode::Im ? feat.shape[0] : 1;
    const std::int64_t c_out =
        tree.head.target_shape.empty() ? 1 : tree.head.target_shape[0];
    head.tensors["weight"] = uniform_init({c_out, c_in}, c_in, rng);
    head.tensors["bias"] = const_tensor({c_out}, 0.0);
  }
  store.sets["head"] = std::move(head);
  return store;
}

namespace {

// ---------------------------------------------------------------------------
// Forward evaluation of individual tape ops.
// ---------------------------------------------------------------------------

std::int64_t rows_of(const Tensor& t) {
  return t.size() / t.dims.back();
}

void linear_rows_forward(const Tensor& x, const Tensor& w, const Tensor& bias,
                         Tensor& out) {
  const std::int64_t r = rows_of(x);
  const std::int64_t d_in = x.dims.back();
  const std::int64_t d_out = w.dims[0];
  kn::active().gemm_nt(x.ptr(), w.ptr(), out.ptr(), r, d_in, d_out, false);
  for (std::int64_t i = 0; i < r; ++i)
    kn::active().add(out.ptr() + i * d_out, bias.ptr(), out.ptr() + i * d_out,
                     d_out);
}

void linear_rows_backward(const Tensor& x, const Tensor& w, const Tensor& gout,
                          Tensor& gx, Tensor& gw, Tensor& gbias) {
  const std::int64_t r = rows_of(x);
  const std::int64_t d_in = x.dims.back();
  const std::int64_t d_out = w.dims[0];
  kn::active().gemm_nn(gout.ptr(), w.ptr(), gx.ptr(), r, d_out, d_in, true);
  kn::active().gemm_tn(gout.ptr(), x.ptr(), gw.ptr(), r, d_out, d_in, true);
  for (std::int64_t i = 0; i < r; ++i)
    kn::active().add(gbias.ptr(), gout.ptr() + i * d_out, gbias.ptr(), d_out);
}

void channel_linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias,
                            Tensor& out) {
  const std::int64_t batch = x.dims[0];
  const std::int64_t c_in = x.dims[1];
  const std::int64_t hw = x.inner() / c_in;
  const std::int64_t c_out = w.dims[0];
  for (std::int64_t b = 0; b < batch; ++b) {
    double* o = out.ptr() + b * c_out * hw;
    kn::active().gemm_nn(w.ptr(), x.ptr() + b * c_in * hw, o, c_out, c_in, hw,
                         false);
    for (std::int64_t c = 0; c < c_out; ++c) {
      const double bv = bias.data[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < hw; ++i) o[c * hw + i] += bv;
    }
  }
}

void channel_linear_backward(const Tensor& x, const Tensor& w,
                             const Tensor& gout, Tensor& gx, Tensor& gw,
                             Tensor& gbias) {
  const std::int64_t batch = x.dims[0];
  const std::int64_t c_in = x.dims[1];
  const std::int64_t hw = x.inner() / c_in;
  const std::int64_t c_out = w.dims[0];
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* go = gout.ptr() + b * c_out * hw;
    kn::active().gemm_tn(w.ptr(), go, gx.ptr() + b * c_in * hw, c_out, c_in, hw,
                         true);
    kn::active().gemm_nt(go, x.ptr() + b * c_in * hw, gw.ptr(), c_out, hw, c_in,
                         true);
    for (std::int64_t c = 0; c < c_out; ++c)
      gbias.data[static_cast<std::size_t>(c)] += kn::active().sum(go + c * hw, hw);
  }
}

struct Pool1dRegion {
  std::int64_t lo, hi;
};

Pool1dRegion pool_region(std::int64_t i, std::int64_t in, std::int64_t out) {
  return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

}  // namespace

// ---------------------------------------------------------------------------
// Executor
// ---------------------------------------------------------------------------

namespace {

class Executor {
 public:
  Executor(const ArchitectureTree& tree, ParamStore& params, Phase phase)
      : tree_(tree), params_(params), phase_(phase) {
    if (!tree_.root.out_state)
      throw std::logic_error("forward requires inferred shapes");
  }

  Execution run(const Tensor& input, bool with_head) {
    exec_.phase = phase_;
    exec_.input_slot = add_value(input);
    int out = exec_node(tree_.root, exec_.input_slot);
    if (with_head) out = head(out);
    exec_.output_slot = out;
    return std::move(exec_);
  }

 private:
  const ArchitectureTree& tree_;
  ParamStore& params_;
  Phase phase_;
  Execution exec_;
  std::vector<int> replicas_;

  int add_value(Tensor t) {
    exec_.values.push_back(std::move(t));
    return static_cast<int>(exec_.values.size()) - 1;
  }

  Tensor& value(int slot) { return exec_.values[static_cast<std::size_t>(slot)]; }

  ParamSet& param_set(const std::string& key) {
    auto it = params_.sets.find(key);
    if (it == params_.sets.end())
      throw std::logic_error("missing parameter set " + key);
    return it->second;
  }

  int emit(TapeOp op) {
    eval_op(op);
    const int out = op.out;
    exec_.ops.push_back(std::move(op));
    return out;
  }

  // Computes op.out's value (op.out already allocated by the caller) --
  // shared with nothing; the backward pass reads saved values from slots.
  void eval_op(TapeOp& op);

  int exec_node(const DerivationNode& node, int in_slot) {
    if (node.is_leaf()) return exec_terminal(node, in_slot);
    if (is_branching_module(node)) return exec_branching(node, in_slot);
    const auto& ch = node.children;
    switch (ch.size()) {
      case 1:
        return exec_node(ch[0], in_slot);
      case 2: {
        int mid = exec_node(ch[0], in_slot);
        return exec_node(ch[1], mid);
      }
      default: {
        int a = exec_node(ch[0], in_slot);
        int b = exec_node(ch[1], a);
        return exec_node(ch[2], b);
      }
    }
  }

  int exec_branching(const DerivationNode& node, int in_slot) {
    const auto& ch = node.children;
    const TerminalSpec& bterm = *family_leaf(ch[0]);
    const TerminalSpec& aterm = *family_leaf(ch.back());
    const int b = bterm.b;

    std::vector<int> branch_inputs;
    if (bterm.kind == OpKind::Clone) {
      branch_inputs.assign(static_cast<std::size_t>(b), in_slot);
    } else {
      const Tensor& x = value(in_slot);
      const int axis = bterm.dim;  // batch is axis 0
      for (int r = 0; r < b; ++r) {
        TapeOp op;
        op.code = OpCode::Slice;
        op.in = {in_slot};
        op.dim = axis;
        op.index = r;
        op.parts = b;
        std::vector<std::int64_t> dims = x.dims;
        dims[static_cast<std::size_t>(axis)] /= b;
        op.out = add_value(Tensor(dims));
        branch_inputs.push_back(emit(std::move(op)));
      }
    }

    std::vector<int> branch_outputs;
    if (ch.size() == 4) {
      branch_outputs.push_back(exec_node(ch[1], branch_inputs[0]));
      branch_outputs.push_back(exec_node(ch[2], branch_inputs[1]));
    } else {
      for (int r = 0; r < b; ++r) {
        replicas_.push_back(r);
        branch_outputs.push_back(exec_node(ch[1], branch_inputs[static_cast<std::size_t>(r)]));
        replicas_.pop_back();
      }
    }

    switch (aterm.kind) {
      case OpKind::Add: {
        TapeOp op;
        op.code = OpCode::AddN;
        op.in = branch_outputs;
        op.out = add_value(Tensor(value(branch_outputs[0]).dims));
        return emit(std::move(op));
      }
      case OpKind::Concat: {
        TapeOp op;
        op.code = OpCode::ConcatN;
        op.in = branch_outputs;
        op.dim = aterm.dim;
        std::vector<std::int64_t> dims = value(branch_outputs[0]).dims;
        std::int64_t total = 0;
        for (int slot : branch_outputs)
          total += value(slot).dims[static_cast<std::size_t>(aterm.dim)];
        dims[static_cast<std::size_t>(aterm.dim)] = total;
        op.out = add_value(Tensor(dims));
        return emit(std::move(op));
      }
      default: {  // matmul
        const Tensor& a = value(branch_outputs[0]);
        const Tensor& bb = value(branch_outputs[1]);
        TapeOp op;
        op.code = OpCode::Matmul;
        op.in = branch_outputs;
        op.trans_b = !(a.dims[2] == bb.dims[1]);
        const std::int64_t m = a.dims[1];
        const std::int64_t n = op.trans_b ? bb.dims[1] : bb.dims[2];
        op.scale = aterm.scaled
                       ? 1.0 / std::sqrt(static_cast<double>(bb.dims[2]))
                       : 1.0;
        op.out = add_value(Tensor({a.dims[0], m, n}));
        return emit(std::move(op));
      }
    }
  }

  int exec_terminal(const DerivationNode& leaf, int in_slot) {
    const TerminalSpec& t = leaf.terminal();
    const ShapeState& in_state = *leaf.in_state;
    const ShapeState& out_state = *leaf.out_state;
    const Tensor& x = value(in_slot);

    auto out_dims = [&]() {
      std::vector<std::int64_t> dims = {x.dims[0]};
      dims.insert(dims.end(), out_state.shape.begin(), out_state.shape.end());
      return dims;
    };

    switch (t.kind) {
      case OpKind::Identity:
        return in_slot;
      case OpKind::Relu: {
        TapeOp op;
        op.code = OpCode::LeakyRelu;
        op.in = {in_slot};
        op.out = add_value(Tensor(x.dims));
        return emit(std::move(op));
      }
      case OpKind::Softmax: {
        TapeOp op;
        op.code = OpCode::Softmax;
        op.in = {in_slot};
        op.out = add_value(Tensor(x.dims));
        return emit(std::move(op));
      }
      case OpKind::Norm: {
        TapeOp op;
        op.code = in_state.mode == Mode::Im ? OpCode::BatchNorm : OpCode::LayerNorm;
        op.in = {in_slot};
        op.key = replica_key(leaf.node_id, replicas_);
        op.out = add_value(Tensor(x.dims));
        return emit(std::move(op));
      }
      case OpKind::PosEnc: {
        TapeOp op;
        op.code = OpCode::PosEnc;
        op.in = {in_slot};
        op.key = replica_key(leaf.node_id, replicas_);
        op.out = add_value(Tensor(x.dims));
        return emit(std::move(op));
      }
      case OpKind::Linear: {
        TapeOp op;
        op.code = in_state.mode == Mode::Col ? OpCode::LinearCol : OpCode::LinearIm;
        op.in = {in_slot};
        op.key = replica_key(leaf.node_id, replicas_);
        op.out = add_value(Tensor(out_dims()));
        return emit(std::move(op));
      }
      case OpKind::Conv1d: {
        TapeOp op;
        op.code = OpCode::Conv1d;
        op.in = {in_slot};
        op.key = replica_key(leaf.node_id, replicas_);
        op.k = t.k;
        op.s = t.s;
        op.p = t.p;
        op.out = add_value(Tensor(out_dims()));
        return emit(std::move(op));
      }
      case OpKind::Im2col: {
        TapeOp op;
        op.code = OpCode::Im2col;
        op.in = {in_slot};
        op.k = t.k;
        op.s = t.s;
        op.p = t.p;
        op.out = add_value(Tensor(out_dims()));
        return emit(std::move(op));
      }
      case OpKind::Col2im: {
        TapeOp op;
        op.code = OpCode::Col2im;
        op.in = {in_slot};
        op.out = add_value(Tensor(out_dims()));
        return emit(std::move(op));
      }
      case OpKind::Permute: {
        TapeOp op;
        op.code = OpCode::Permute;
        op.in = {in_slot};
        op.order = {0};
        for (int axis : t.order) op.order.push_back(axis);
        op.out = add_value(Tensor(out_dims()));
        return emit(std::move(op));
      }
      default:
        throw std::logic_error("unexpected terminal in execution: " + t.name());
    }
  }

  int head(int feat_slot) {
    const ShapeState& feat = *tree_.root.out_state;
    if (tree_.head.kind == TaskKind::Classification) {
      const Tensor& x = value(feat_slot);
      TapeOp reduce;
      reduce.code = OpCode::HeadReduce;
      reduce.in = {feat_slot};
      // Im: mean over H,W keeping channels; Col: mean over S keeping tokens.
      reduce.dim = feat.mode == Mode::Im ? 1 : 2;
      const std::int64_t d =
          feat.mode == Mode::Im ? x.dims[1] : x.dims[2];
      reduce.out = add_value(Tensor({x.dims[0], d}));
      int pooled = emit(std::move(reduce));

      TapeOp lin;
      lin.code = OpCode::HeadLinear;
      lin.in = {pooled};
      lin.key = "head";
      lin.out = add_value(Tensor({value(pooled).dims[0], tree_.head.num_classes}));
      return emit(std::move(lin));
    }

    // Dense head: pool the trailing two axes to the target size, then map
    // channels. Col features first gain a singleton channel axis.
    const Tensor& x = value(feat_slot);
    TapeOp pool;
    pool.code = OpCode::HeadPool;
    pool.in = {feat_slot};
    pool.col_insert = feat.mode == Mode::Col;
    const std::int64_t c_in = pool.col_insert ? 1 : x.dims[1];
    const std::int64_t h_t = tree_.head.target_shape[1];
    const std::int64_t w_t = tree_.head.target_shape[2];
    pool.out = add_value(Tensor({x.dims[0], c_in, h_t, w_t}));
    int pooled = emit(std::move(pool));

    TapeOp lin;
    lin.code = OpCode::HeadChannelLinear;
    lin.in = {pooled};
    lin.key = "head";
    lin.out = add_value(
        Tensor({x.dims[0], tree_.head.target_shape[0], h_t, w_t}));
    return emit(std::move(lin));
  }
};

void Executor::eval_op(TapeOp& op) {
  Tensor& out = value(op.out);
  const Tensor& x = value(op.in[0]);

  switch (op.code) {
    case OpCode::LinearCol:
    case OpCode::HeadLinear: {
      ParamSet& ps = param_set(op.key);
      linear_rows_forward(x, ps.tensors["weight"], ps.tensors["bias"], out);
      return;
    }
    case OpCode::LinearIm:
    case OpCode::HeadChannelLinear: {
      ParamSet& ps = param_set(op.key);
      channel_linear_forward(x, ps.tensors["weight"], ps.tensors["bias"], out);
      return;
    }
    case OpCode::Conv1d: {
      ParamSet& ps = param_set(op.key);
      const std::int64_t batch = x.dims[0];
      const std::int64_t s_in = x.dims[1];
      const std::int64_t d_in = x.dims[2];
      const std::int64_t s_out = out.dims[1];
      Tensor patches({batch * s_out, d_in * op.k});
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < s_out; ++i) {
          double* row = patches.ptr() + (b * s_out + i) * d_in * op.k;
          for (int dk = 0; dk < op.k; ++dk) {
            const std::int64_t src = i * op.s + dk - op.p;
            if (src < 0 || src >= s_in) continue;
            std::memcpy(row + dk * d_in, x.ptr() + (b * s_in + src) * d_in,
                        static_cast<std::size_t>(d_in) * sizeof(double));
          }
        }
      // Weight layout (d, k*d_in) with kernel-major columns matching the
      // patch rows built above.
      linear_rows_forward(patches, ps.tensors["weight"], ps.tensors["bias"], out);
      op.aux1 = std::move(patches);
      return;
    }
    case OpCode::Im2col: {
      const std::int64_t batch = x.dims[0];
      const std::int64_t c = x.dims[1];
      const std::int64_t h = x.dims[2];
      const std::int64_t w = x.dims[3];
      const std::int64_t h_out = conv_out_extent(h, op.k, op.s, op.p);
      const std::int64_t w_out = conv_out_extent(w, op.k, op.s, op.p);
      const std::int64_t d = c * op.k * op.k;
      std::fill(out.data.begin(), out.data.end(), 0.0);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t oy = 0; oy < h_out; ++oy)
          for (std::int64_t ox = 0; ox < w_out; ++ox) {
            double* row = out.ptr() + ((b * h_out + oy) * w_out + ox) * d;
            for (std::int64_t cc = 0; cc < c; ++cc)
              for (int dy = 0; dy < op.k; ++dy) {
                const std::int64_t sy = oy * op.s + dy - op.p;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < op.k; ++dx) {
                  const std::int64_t sx = ox * op.s + dx - op.p;
                  if (sx < 0 || sx >= w) continue;
                  row[(cc * op.k + dy) * op.k + dx] =
                      x.data[static_cast<std::size_t>(((b * c + cc) * h + sy) * w + sx)];
                }
              }
          }
      return;
    }
    case OpCode::Col2im: {
      const std::int64_t batch = x.dims[0];
      const std::int64_t d = x.dims[2];
      const std::int64_t h = out.dims[2];
      const std::int64_t w = out.dims[3];
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t xx = 0; xx < w; ++xx)
            for (std::int64_t dd = 0; dd < d; ++dd)
              out.data[static_cast<std::size_t>(((b * d + dd) * h + y) * w + xx)] =
                  x.data[static_cast<std::size_t>((b * h * w + y * w + xx) * d + dd)];
      return;
    }
    case OpCode::Permute: {
      const std::size_t rank = x.dims.size();
      std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
      for (std::size_t i = rank - 1; i > 0; --i)
        in_strides[i - 1] = in_strides[i] * x.dims[i];
      for (std::size_t i = rank - 1; i > 0; --i)
        out_strides[i - 1] = out_strides[i] * out.dims[i];
      std::vector<std::int64_t> idx(rank, 0);
      const std::int64_t n = x.size();
      for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t rem = flat;
        std::int64_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) {
          const std::int64_t coord = rem / out_strides[i];
          rem %= out_strides[i];
          src += coord * in_strides[static_cast<std::size_t>(op.order[i])];
        }
        out.data[static_cast<std::size_t>(flat)] = x.data[static_cast<std::size_t>(src)];
      }
      return;
    }
    case OpCode::BatchNorm: {
      ParamSet& ps = param_set(op.key);
      const std::int64_t batch = x.dims[0];
      const std::int64_t c = x.dims[1];
      const std::int64_t hw = x.inner() / c;
      const std::int64_t n = batch * hw;
      Tensor mean({c}), invstd({c});
      if (phase_ == Phase::Train) {
        for (std::int64_t cc = 0; cc < c; ++cc) {
          double acc = 0.0;
          for (std::int64_t b = 0; b < batch; ++b)
            acc += kn::active().sum(x.ptr() + (b * c + cc) * hw, hw);
          mean.data[static_cast<std::size_t>(cc)] = acc / static_cast<double>(n);
        }
        for (std::int64_t cc = 0; cc < c; ++cc) {
          const double mu = mean.data[static_cast<std::size_t>(cc)];
          double acc = 0.0;
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* px = x.ptr() + (b * c + cc) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              const double dxv = px[i] - mu;
              acc += dxv * dxv;
            }
          }
          const double var = acc / static_cast<double>(n);
          invstd.data[static_cast<std::size_t>(cc)] = 1.0 / std::sqrt(var + kNormEps);
          Tensor& rm = ps.buffers["running_mean"];
          Tensor& rv = ps.buffers["running_var"];
          rm.data[static_cast<std::size_t>(cc)] =
              (1.0 - kRunningMomentum) * rm.data[static_cast<std::size_t>(cc)] +
              kRunningMomentum * mu;
          rv.data[static_cast<std::size_t>(cc)] =
              (1.0 - kRunningMomentum) * rv.data[static_cast<std::size_t>(cc)] +
              kRunningMomentum * var;
        }
      } else {
        const Tensor& rm = ps.buffers["running_mean"];
        const Tensor& rv = ps.buffers["running_var"];
        for (std::int64_t cc = 0; cc < c; ++cc) {
          mean.data[static_cast<std::size_t>(cc)] = rm.data[static_cast<std::size_t>(cc)];
          invstd.data[static_cast<std::size_t>(cc)] =
              1.0 / std::sqrt(rv.data[static_cast<std::size_t>(cc)] + kNormEps);
        }
      }
      const Tensor& scale = ps.tensors["scale"];
      const Tensor& shift = ps.tensors["shift"];
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t cc = 0; cc < c; ++cc) {
          const double mu = mean.data[static_cast<std::size_t>(cc)];
          const double is = invstd.data[static_cast<std::size_t>(cc)];
          const double g = scale.data[static_cast<std::size_t>(cc)];
          const double s = shift.data[static_cast<std::size_t>(cc)];
          const double* px = x.ptr() + (b * c + cc) * hw;
          double* po = out.ptr() + (b * c + cc) * hw;
          for (std::int64_t i = 0; i < hw; ++i) po[i] = g * (px[i] - mu) * is + s;
        }
      op.aux1 = std::move(mean);
      op.aux2 = std::move(invstd);
      return;
    }
    case OpCode::LayerNorm: {
      ParamSet& ps = param_set(op.key);
      const std::int64_t d = x.dims.back();
      const std::int64_t rows = rows_of(x);
      Tensor mean({rows}), invstd({rows});
      const Tensor& scale = ps.tensors["scale"];
      const Tensor& shift = ps.tensors["shift"];
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* px = x.ptr() + r * d;
        double* po = out.ptr() + r * d;
        const double mu = kn::active().sum(px, d) / static_cast<double>(d);
        double acc = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
          const double dv = px[i] - mu;
          acc += dv * dv;
        }
        const double is = 1.0 / std::sqrt(acc / static_cast<double>(d) + kNormEps);
        mean.data[static_cast<std::size_t>(r)] = mu;
        invstd.data[static_cast<std::size_t>(r)] = is;
        for (std::int64_t i = 0; i < d; ++i)
          po[i] = scale.data[static_cast<std::size_t>(i)] * (px[i] - mu) * is +
                  shift.data[static_cast<std::size_t>(i)];
      }
      op.aux1 = std::move(mean);
      op.aux2 = std::move(invstd);
      return;
    }
    case OpCode::LeakyRelu:
      kn::active().leaky_relu(x.ptr(), out.ptr(), x.size(), kLeakySlope);
      return;
    case OpCode::Softmax:
      kn::active().softmax_rows(x.ptr(), out.ptr(), rows_of(x), x.dims.back());
      return;
    case OpCode::PosEnc: {
      ParamSet& ps = param_set(op.key);
      const Tensor& pos = ps.tensors["pos"];
      const std::int64_t batch = x.dims[0];
      const std::int64_t inner = x.inner();
      for (std::int64_t b = 0; b < batch; ++b)
        kn::active().add(x.ptr() + b * inner, pos.ptr(), out.ptr() + b * inner,
                         inner);
      return;
    }
    case OpCode::AddN: {
      out.data = x.data;
      for (std::size_t i = 1; i < op.in.size(); ++i)
        kn::active().add(out.ptr(), value(op.in[i]).ptr(), out.ptr(), out.size());
      return;
    }
    case OpCode::ConcatN: {
      const std::size_t axis = static_cast<std::size_t>(op.dim);
      std::int64_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= out.dims[i];
      for (std::size_t i = axis + 1; i < out.dims.size(); ++i)
        inner *= out.dims[i];
      const std::int64_t out_axis = out.dims[axis];
      std::int64_t offset = 0;
      for (int slot : op.in) {
        const Tensor& part = value(slot);
        const std::int64_t part_axis = part.dims[axis];
        for (std::int64_t o = 0; o < outer; ++o)
          std::memcpy(out.ptr() + (o * out_axis + offset) * inner,
                      part.ptr() + o * part_axis * inner,
                      static_cast<std::size_t>(part_axis * inner) * sizeof(double));
        offset += part_axis;
      }
      return;
    }
    case OpCode::Slice: {
      const std::size_t axis = static_cast<std::size_t>(op.dim);
      std::int64_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < axis; ++i) outer *= x.dims[i];
      for (std::size_t i = axis + 1; i < x.dims.size(); ++i) inner *= x.dims[i];
      const std::int64_t in_axis = x.dims[axis];
      const std::int64_t part_axis = in_axis / op.parts;
      const std::int64_t offset = part_axis * op.index;
      for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(out.ptr() + o * part_axis * inner,
                    x.ptr() + (o * in_axis + offset) * inner,
                    static_cast<std::size_t>(part_axis * inner) * sizeof(double));
      return;
    }
    case OpCode::Matmul: {
      const Tensor& a = x;
      const Tensor& b = value(op.in[1]);
      const std::int64_t batch = a.dims[0];
      const std::int64_t m = a.dims[1];
      const std::int64_t kk = a.dims[2];
      const std::int64_t n = out.dims[2];
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const double* pa = a.ptr() + bi * m * kk;
        const double* pb = b.ptr() + bi * b.inner();
        double* po = out.ptr() + bi * m * n;
        if (op.trans_b)
          kn::active().gemm_nt(pa, pb, po, m, kk, n, false);
        else
          kn::active().gemm_nn(pa, pb, po, m, kk, n, false);
      }
      if (op.scale != 1.0) kn::active().scale(op.scale, out.ptr(), out.size());
      return;
    }
    case OpCode::HeadReduce: {
      if (op.dim == 1) {  // Im: mean over H,W per channel
        const std::int64_t batch = x.dims[0];
        const std::int64_t c = x.dims[1];
        const std::int64_t hw = x.inner() / c;
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t cc = 0; cc < c; ++cc)
            out.data[static_cast<std::size_t>(b * c + cc)] =
                kn::active().sum(x.ptr() + (b * c + cc) * hw, hw) /
                static_cast<double>(hw);
      } else {  // Col: mean over S per token dimension
        const std::int64_t batch = x.dims[0];
        const std::int64_t s = x.dims[1];
        const std::int64_t d = x.dims[2];
        for (std::int64_t b = 0; b < batch; ++b) {
          double* po = out.ptr() + b * d;
          std::fill(po, po + d, 0.0);
          for (std::int64_t i = 0; i < s; ++i)
            kn::active().add(po, x.ptr() + (b * s + i) * d, po, d);
          kn::active().scale(1.0 / static_cast<double>(s), po, d);
        }
      }
      return;
    }
    case OpCode::HeadPool: {
      // Area-interpolation resampling of the final two axes.
      const std::int64_t batch = x.dims[0];
      const std::int64_t c = op.col_insert ? 1 : x.dims[1];
      const std::int64_t h = op.col_insert ? x.dims[1] : x.dims[2];
      const std::int64_t w = op.col_insert ? x.dims[2] : x.dims[3];
      const std::int64_t h_t = out.dims[2];
      const std::int64_t w_t = out.dims[3];
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t cc = 0; cc < c; ++cc) {
          const double* px = x.ptr() + (b * c + cc) * h * w;
          double* po = out.ptr() + (b * c + cc) * h_t * w_t;
          for (std::int64_t oy = 0; oy < h_t; ++oy) {
            const auto ry = pool_region(oy, h, h_t);
            for (std::int64_t ox = 0; ox < w_t; ++ox) {
              const auto rx = pool_region(ox, w, w_t);
              double acc = 0.0;
              for (std::int64_t y = ry.lo; y < ry.hi; ++y)
                for (std::int64_t xx = rx.lo; xx < rx.hi; ++xx)
                  acc += px[y * w + xx];
              po[oy * w_t + ox] =
                  acc / static_cast<double>((ry.hi - ry.lo) * (rx.hi - rx.lo));
            }
          }
        }
      return;
    }
    default:
      throw std::logic_error("eval_op: unhandled opcode");
  }
}

}  // namespace

Execution forward(const ArchitectureTree& tree, ParamStore& params,
                  const Tensor& input, Phase phase) {
  Executor ex(tree, params, phase);
  return ex.run(input, false);
}

Execution forward_with_head(const ArchitectureTree& tree, ParamStore& params,
                            const Tensor& input, Phase phase) {
  Executor ex(tree, params, phase);
  return ex.run(input, true);
}

const Tensor& output_of(const Execution& exec) {
  return exec.values[static_cast<std::size_t>(exec.output_slot)];
}

namespace {

struct BackwardPass {
  const ParamStore& params;
  const Execution& exec;
  Gradients& grads;
  std::vector<Tensor> slot_grads;

  Tensor& grad(int slot) {
    Tensor& g = slot_grads[static_cast<std::size_t>(slot)];
    if (g.dims.empty())
      g = Tensor(exec.values[static_cast<std::size_t>(slot)].dims);
    return g;
  }

  Tensor& param_grad(const std::string& key, const std::string& name) {
    auto& slot = grads.params[key][name];
    if (slot.dims.empty())
      slot = Tensor(params.sets.at(key).tensors.at(name).dims);
    return slot;
  }

  const Tensor& param(const std::string& key, const std::string& name) {
    return params.sets.at(key).tensors.at(name);
  }

  void run(const Tensor& output_gradient) {
    slot_grads.resize(exec.values.size());
    grad(exec.output_slot).data = output_gradient.data;
    for (auto it = exec.ops.rbegin(); it != exec.ops.rend(); ++it) step(*it);
  }

  void step(const TapeOp& op) {
    const Tensor& gout = grad(op.out);
    const Tensor& x = exec.values[static_cast<std::size_t>(op.in[0])];

    switch (op.code) {
      case OpCode::LinearCol:
      case OpCode::HeadLinear: {
        linear_rows_backward(x, param(op.key, "weight"), gout, grad(op.in[0]),
                             param_grad(op.key, "weight"),
                             param_grad(op.key, "bias"));
        return;
      }
      case OpCode::LinearIm:
      case OpCode::HeadChannelLinear: {
        channel_linear_backward(x, param(op.key, "weight"), gout, grad(op.in[0]),
                                param_grad(op.key, "weight"),
                                param_grad(op.key, "bias"));
        return;
      }
      case OpCode::Conv1d: {
        const Tensor& patches = op.aux1;
        const std::int64_t batch = x.dims[0];
        const std::int64_t s_in = x.dims[1];
        const std::int64_t d_in = x.dims[2];
        const std::int64_t s_out = gout.dims[1];
        Tensor gpatches(patches.dims);
        linear_rows_backward(patches, param(op.key, "weight"), gout, gpatches,
                             param_grad(op.key, "weight"),
                             param_grad(op.key, "bias"));
        Tensor& gx = grad(op.in[0]);
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t i = 0; i < s_out; ++i) {
            const double* row = gpatches.ptr() + (b * s_out + i) * d_in * op.k;
            for (int dk = 0; dk < op.k; ++dk) {
              const std::int64_t src = i * op.s + dk - op.p;
              if (src < 0 || src >= s_in) continue;
              kn::active().add(gx.ptr() + (b * s_in + src) * d_in, row + dk * d_in,
                               gx.ptr() + (b * s_in + src) * d_in, d_in);
            }
          }
        return;
      }
      case OpCode::Im2col: {
        Tensor& gx = grad(op.in[0]);
        const std::int64_t batch = gx.dims[0];
        const std::int64_t c = gx.dims[1];
        const std::int64_t h = gx.dims[2];
        const std::int64_t w = gx.dims[3];
        const std::int64_t h_out = conv_out_extent(h, op.k, op.s, op.p);
        const std::int64_t w_out = conv_out_extent(w, op.k, op.s, op.p);
        const std::int64_t d = c * op.k * op.k;
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t oy = 0; oy < h_out; ++oy)
            for (std::int64_t ox = 0; ox < w_out; ++ox) {
              const double* row = gout.ptr() + ((b * h_out + oy) * w_out + ox) * d;
              for (std::int64_t cc = 0; cc < c; ++cc)
                for (int dy = 0; dy < op.k; ++dy) {
                  const std::int64_t sy = oy * op.s + dy - op.p;
                  if (sy < 0 || sy >= h) continue;
                  for (int dx = 0; dx < op.k; ++dx) {
                    const std::int64_t sx = ox * op.s + dx - op.p;
                    if (sx < 0 || sx >= w) continue;
                    gx.data[static_cast<std::size_t>(((b * c + cc) * h + sy) * w + sx)] +=
                        row[(cc * op.k + dy) * op.k + dx];
                  }
                }
            }
        return;
      }
      case OpCode::Col2im: {
        Tensor& gx = grad(op.in[0]);
        const std::int64_t batch = gx.dims[0];
        const std::int64_t d = gx.dims[2];
        const std::int64_t h = gout.dims[2];
        const std::int64_t w = gout.dims[3];
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t xx = 0; xx < w; ++xx)
              for (std::int64_t dd = 0; dd < d; ++dd)
                gx.data[static_cast<std::size_t>((b * h * w + y * w + xx) * d + dd)] +=
                    gout.data[static_cast<std::size_t>(((b * d + dd) * h + y) * w + xx)];
        return;
      }
      case OpCode::Permute: {
        Tensor& gx = grad(op.in[0]);
        const std::size_t rank = gx.dims.size();
        std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
        for (std::size_t i = rank - 1; i > 0; --i)
          in_strides[i - 1] = in_strides[i] * gx.dims[i];
        for (std::size_t i = rank - 1; i > 0; --i)
          out_strides[i - 1] = out_strides[i] * gout.dims[i];
        const std::int64_t n = gout.size();
        for (std::int64_t flat = 0; flat < n; ++flat) {
          std::int64_t rem = flat;
          std::int64_t src = 0;
          for (std::size_t i = 0; i < rank; ++i) {
            const std::int64_t coord = rem / out_strides[i];
            rem %= out_strides[i];
            src += coord * in_strides[static_cast<std::size_t>(op.order[i])];
          }
          gx.data[static_cast<std::size_t>(src)] +=
              gout.data[static_cast<std::size_t>(flat)];
        }
        return;
      }
      case OpCode::BatchNorm: {
        const Tensor& mean = op.aux1;
        const Tensor& invstd = op.aux2;
        const Tensor& scale = param(op.key, "scale");
        Tensor& gscale = param_grad(op.key, "scale");
        Tensor& gshift = param_grad(op.key, "shift");
        Tensor& gx = grad(op.in[0]);
        const std::int64_t batch = x.dims[0];
        const std::int64_t c = x.dims[1];
        const std::int64_t hw = x.inner() / c;
        const double n = static_cast<double>(batch * hw);
        for (std::int64_t cc = 0; cc < c; ++cc) {
          const double mu = mean.data[static_cast<std::size_t>(cc)];
          const double is = invstd.data[static_cast<std::size_t>(cc)];
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* pg = gout.ptr() + (b * c + cc) * hw;
            const double* px = x.ptr() + (b * c + cc) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_g += pg[i];
              sum_gx += pg[i] * (px[i] - mu) * is;
            }
          }
          gshift.data[static_cast<std::size_t>(cc)] += sum_g;
          gscale.data[static_cast<std::size_t>(cc)] += sum_gx;
          const double g = scale.data[static_cast<std::size_t>(cc)];
          for (std::int64_t b = 0; b < batch; ++b) {
            const double* pg = gout.ptr() + (b * c + cc) * hw;
            const double* px = x.ptr() + (b * c + cc) * hw;
            double* pgx = gx.ptr() + (b * c + cc) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              const double xhat = (px[i] - mu) * is;
              pgx[i] += g * is * (pg[i] - sum_g / n - xhat * sum_gx / n);
            }
          }
        }
        return;
      }
      case OpCode::LayerNorm: {
        const Tensor& mean = op.aux1;
        const Tensor& invstd = op.aux2;
        const Tensor& scale = param(op.key, "scale");
        Tensor& gscale = param_grad(op.key, "scale");
        Tensor& gshift = param_grad(op.key, "shift");
        Tensor& gx = grad(op.in[0]);
        const std::int64_t d = x.dims.back();
        const std::int64_t rows = rows_of(x);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double mu = mean.data[static_cast<std::size_t>(r)];
          const double is = invstd.data[static_cast<std::size_t>(r)];
          const double* pg = gout.ptr() + r * d;
          const double* px = x.ptr() + r * d;
          double* pgx = gx.ptr() + r * d;
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t i = 0; i < d; ++i) {
            const double gs = pg[i] * scale.data[static_cast<std::size_t>(i)];
            const double xhat = (px[i] - mu) * is;
            gshift.data[static_cast<std::size_t>(i)] += pg[i];
            gscale.data[static_cast<std::size_t>(i)] += pg[i] * xhat;
            sum_g += gs;
            sum_gx += gs * xhat;
          }
          const double dn = static_cast<double>(d);
          for (std::int64_t i = 0; i < d; ++i) {
            const double gs = pg[i] * scale.data[static_cast<std::size_t>(i)];
            const double xhat = (px[i] - mu) * is;
            pgx[i] += is * (gs - sum_g / dn - xhat * sum_gx / dn);
          }
        }
        return;
      }
      case OpCode::LeakyRelu:
        kn::active().leaky_relu_grad(x.ptr(), gout.ptr(), grad(op.in[0]).ptr(),
                                     x.size(), kLeakySlope);
        return;
      case OpCode::Softmax: {
        const Tensor& y = exec.values[static_cast<std::size_t>(op.out)];
        Tensor& gx = grad(op.in[0]);
        const std::int64_t cols = y.dims.back();
        const std::int64_t rows = rows_of(y);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* py = y.ptr() + r * cols;
          const double* pg = gout.ptr() + r * cols;
          double* pgx = gx.ptr() + r * cols;
          const double dotv = kn::active().dot(py, pg, cols);
          for (std::int64_t i = 0; i < cols; ++i)
            pgx[i] += py[i] * (pg[i] - dotv);
        }
        return;
      }
      case OpCode::PosEnc: {
        Tensor& gpos = param_grad(op.key, "pos");
        Tensor& gx = grad(op.in[0]);
        const std::int64_t batch = x.dims[0];
        const std::int64_t inner = x.inner();
        kn::active().add(gx.ptr(), gout.ptr(), gx.ptr(), gx.size());
        for (std::int64_t b = 0; b < batch; ++b)
          kn::active().add(gpos.ptr(), gout.ptr() + b * inner, gpos.ptr(), inner);
        return;
      }
      case OpCode::AddN: {
        for (int slot : op.in) {
          Tensor& g = grad(slot);
          kn::active().add(g.ptr(), gout.ptr(), g.ptr(), g.size());
        }
        return;
      }
      case OpCode::ConcatN: {
        const std::size_t axis = static_cast<std::size_t>(op.dim);
        std::int64_t outer = 1, inner = 1;
        const Tensor& y = exec.values[static_cast<std::size_t>(op.out)];
        for (std::size_t i = 0; i < axis; ++i) outer *= y.dims[i];
        for (std::size_t i = axis + 1; i < y.dims.size(); ++i) inner *= y.dims[i];
        const std::int64_t out_axis = y.dims[axis];
        std::int64_t offset = 0;
        for (int slot : op.in) {
          Tensor& g = grad(slot);
          const std::int64_t part_axis = g.dims[axis];
          for (std::int64_t o = 0; o < outer; ++o)
            kn::active().add(g.ptr() + o * part_axis * inner,
                             gout.ptr() + (o * out_axis + offset) * inner,
                             g.ptr() + o * part_axis * inner, part_axis * inner);
          offset += part_axis;
        }
        return;
      }
      case OpCode::Slice: {
        Tensor& gx = grad(op.in[0]);
        const std::size_t axis = static_cast<std::size_t>(op.dim);
        std::int64_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= gx.dims[i];
        for (std::size_t i = axis + 1; i < gx.dims.size(); ++i)
          inner *= gx.dims[i];
        const std::int64_t in_axis = gx.dims[axis];
        const std::int64_t part_axis = in_axis / op.parts;
        const std::int64_t offset = part_axis * op.index;
        for (std::int64_t o = 0; o < outer; ++o)
          kn::active().add(gx.ptr() + (o * in_axis + offset) * inner,
                           gout.ptr() + o * part_axis * inner,
                           gx.ptr() + (o * in_axis + offset) * inner,
                           part_axis * inner);
        return;
      }
      case OpCode::Matmul: {
        const Tensor& a = x;
        const Tensor& b = exec.values[static_cast<std::size_t>(op.in[1])];
        Tensor& ga = grad(op.in[0]);
        Tensor& gb = grad(op.in[1]);
        const std::int64_t batch = a.dims[0];
        const std::int64_t m = a.dims[1];
        const std::int64_t kk = a.dims[2];
        const std::int64_t n = gout.dims[2];
        Tensor gscaled = gout;
        if (op.scale != 1.0)
          kn::active().scale(op.scale, gscaled.ptr(), gscaled.size());
        for (std::int64_t bi = 0; bi < batch; ++bi) {
          const double* pa = a.ptr() + bi * m * kk;
          const double* pb = b.ptr() + bi * b.inner();
          const double* pg = gscaled.ptr() + bi * m * n;
          double* pga = ga.ptr() + bi * m * kk;
          double* pgb = gb.ptr() + bi * b.inner();
          if (op.trans_b) {
            // out = A B^T: dA = G B, dB = G^T A.
            kn::active().gemm_nn(pg, pb, pga, m, n, kk, true);
            kn::active().gemm_tn(pg, pa, pgb, m, n, kk, true);
          } else {
            // out = A B: dA = G B^T, dB = A^T G.
            kn::active().gemm_nt(pg, pb, pga, m, n, kk, true);
            kn::active().gemm_tn(pa, pg, pgb, m, kk, n, true);
          }
        }
        return;
      }
      case OpCode::HeadReduce: {
        Tensor& gx = grad(op.in[0]);
        if (op.dim == 1) {
          const std::int64_t batch = gx.dims[0];
          const std::int64_t c = gx.dims[1];
          const std::int64_t hw = gx.inner() / c;
          const double inv = 1.0 / static_cast<double>(hw);
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t cc = 0; cc < c; ++cc) {
              const double gv = gout.data[static_cast<std::size_t>(b * c + cc)] * inv;
              double* pgx = gx.ptr() + (b * c + cc) * hw;
              for (std::int64_t i = 0; i < hw; ++i) pgx[i] += gv;
            }
        } else {
          const std::int64_t batch = gx.dims[0];
          const std::int64_t s = gx.dims[1];
          const std::int64_t d = gx.dims[2];
          const double inv = 1.0 / static_cast<double>(s);
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < s; ++i)
              kn::active().axpy(inv, gout.ptr() + b * d,
                                gx.ptr() + (b * s + i) * d, d);
        }
        return;
      }
      case OpCode::HeadPool: {
        Tensor& gx = grad(op.in[0]);
        const Tensor& y = exec.values[static_cast<std::size_t>(op.out)];
        const std::int64_t batch = y.dims[0];
        const std::int64_t c = y.dims[1];
        const std::int64_t h_t = y.dims[2];
        const std::int64_t w_t = y.dims[3];
        const std::int64_t h = op.col_insert ? gx.dims[1] : gx.dims[2];
        const std::int64_t w = op.col_insert ? gx.dims[2] : gx.dims[3];
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t cc = 0; cc < c; ++cc) {
            double* pgx = gx.ptr() + (b * c + cc) * h * w;
            const double* pg = gout.ptr() + (b * c + cc) * h_t * w_t;
            for (std::int64_t oy = 0; oy < h_t; ++oy) {
              const auto ry = pool_region(oy, h, h_t);
              for (std::int64_t ox = 0; ox < w_t; ++ox) {
                const auto rx = pool_region(ox, w, w_t);
                const double gv = pg[oy * w_t + ox] /
                                  static_cast<double>((ry.hi - ry.lo) * (rx.hi - rx.lo));
                for (std::int64_t yy = ry.lo; yy < ry.hi; ++yy)
                  for (std::int64_t xx = rx.lo; xx < rx.hi; ++xx)
                    pgx[yy * w + xx] += gv;
              }
            }
          }
        return;
      }
    }
    throw std::logic_error("backward: unhandled opcode");
  }
};

}  // namespace

Gradients backward(const ArchitectureTree& tree, const ParamStore& params,
                   const Execution& exec, const Tensor& output_gradient) {
  (void)tree;
  if (exec.phase != Phase::Train)
    throw std::logic_error("backward requires a train-phase cache");
  if (output_gradient.dims != output_of(exec).dims)
    throw std::invalid_argument("output gradient shape mismatch");
  Gradients grads;
  BackwardPass pass{params, exec, grads, {}};
  pass.run(output_gradient);
  grads.input = std::move(pass.slot_grads[static_cast<std::size_t>(exec.input_slot)]);
  if (grads.input.dims.empty())
    grads.input = Tensor(exec.values[static_cast<std::size_t>(exec.input_slot)].dims);
  return grads;
}

Tensor apply_head(const Tensor& features, Mode mode, const HeadDescriptor& head,
                  const ParamSet& head_params) {
  const Tensor& w = head_params.tensors.at("weight");
  const Tensor& bias = head_params.tensors.at("bias");
  if (head.kind == TaskKind::Classification) {
    const std::int64_t batch = features.dims[0];
    const std::int64_t d = mode == Mode::Im ? features.dims[1] : features.dims[2];
    Tensor pooled({batch, d});
    if (mode == Mode::Im) {
      const std::int64_t hw = features.inner() / d;
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t c = 0; c < d; ++c)
          pooled.data[static_cast<std::size_t>(b * d + c)] =
              kn::active().sum(features.ptr() + (b * d + c) * hw, hw) /
              static_cast<double>(hw);
    } else {
      const std::int64_t s = features.dims[1];
      for (std::int64_t b = 0; b < batch; ++b) {
        double* po = pooled.ptr() + b * d;
        std::fill(po, po + d, 0.0);
        for (std::int64_t i = 0; i < s; ++i)
          kn::active().add(po, features.ptr() + (b * s + i) * d, po, d);
        kn::active().scale(1.0 / static_cast<double>(s), po, d);
      }
    }
    Tensor logits({batch, head.num_classes});
    linear_rows_forward(pooled, w, bias, logits);
    return logits;
  }

  // Dense head.
  const std::int64_t batch = features.dims[0];
  const bool col = mode == Mode::Col;
  const std::int64_t c_in = col ? 1 : features.dims[1];
  const std::int64_t h = col ? features.dims[1] : features.dims[2];
  const std::int64_t w_in = col ? features.dims[2] : features.dims[3];
  const std::int64_t h_t = head.target_shape[1];
  const std::int64_t w_t = head.target_shape[2];
  Tensor pooled({batch, c_in, h_t, w_t});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t cc = 0; cc < c_in; ++cc) {
      const double* px = features.ptr() + (b * c_in + cc) * h * w_in;
      double* po = pooled.ptr() + (b * c_in + cc) * h_t * w_t;
      for (std::int64_t oy = 0; oy < h_t; ++oy) {
        const auto ry = pool_region(oy, h, h_t);
        for (std::int64_t ox = 0; ox < w_t; ++ox) {
          const auto rx = pool_region(ox, w_in, w_t);
          double acc = 0.0;
          for (std::int64_t y = ry.lo; y < ry.hi; ++y)
            for (std::int64_t xx = rx.lo; xx < rx.hi; ++xx)
              acc += px[y * w_in + xx];
          po[oy * w_t + ox] =
              acc / static_cast<double>((ry.hi - ry.lo) * (rx.hi - rx.lo));
        }
      }
    }
  Tensor out({batch, head.target_shape[0], h_t, w_t});
  channel_linear_forward(pooled, w, bias, out);
  return out;
}

void sgd_step(ParamStore& params, const Gradients& grads,
              const TrainConfig& config) {
  for (const auto& [key, named] : grads.params) {
    auto set_it = params.sets.find(key);
    if (set_it == params.sets.end()) continue;
    for (const auto& [name, g] : named) {
      auto t_it = set_it->second.tensors.find(name);
      if (t_it == set_it->second.tensors.end()) continue;
      Tensor& theta = t_it->second;
      Tensor& v = params.momentum[key][name];
      if (v.dims.empty()) v = Tensor(theta.dims);
      const double mu = config.momentum;
      const double lambda = config.weight_decay;
      const double eta = config.learning_rate;
      for (std::size_t i = 0; i < theta.data.size(); ++i) {
        v.data[i] = mu * v.data[i] + g.data[i] + lambda * theta.data[i];
        theta.data[i] -= eta * v.data[i];
      }
    }
  }
}

namespace {

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_string(std::ofstream& f, const std::string& s) {
  write_u32(f, static_cast<std::uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::string read_string(std::ifstream& f) {
  std::uint32_t n = read_u32(f);
  std::string s(n, '\0');
  f.read(s.data(), n);
  return s;
}

}  // namespace

void dump_weights(const ParamStore& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.write("ARBW", 4);
  write_u32(f, 1);
  std::uint64_t entries = 0;
  for (const auto& [key, set] : params.sets) entries += set.tensors.size();
  write_u64(f, entries);
  for (const auto& [key, set] : params.sets)
    for (const auto& [name, t] : set.tensors) {
      write_string(f, key);
      write_string(f, name);
      write_u32(f, static_cast<std::uint32_t>(t.dims.size()));
      for (auto d : t.dims) write_u64(f, static_cast<std::uint64_t>(d));
      f.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

ParamStore load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "ARBW", 4) != 0)
    throw std::runtime_error("bad weight file magic");
  if (read_u32(f) != 1) throw std::runtime_error("unsupported weight version");
  ParamStore store;
  const std::uint64_t entries = read_u64(f);
  for (std::uint64_t i = 0; i < entries; ++i) {
    std::string key = read_string(f);
    std::string name = read_string(f);
    const std::uint32_t rank = read_u32(f);
    std::vector<std::int64_t> dims;
    for (std::uint32_t r = 0; r < rank; ++r)
      dims.push_back(static_cast<std::int64_t>(read_u64(f)));
    Tensor t(dims);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    store.sets[key].tensors[name] = std::move(t);
  }
  return store;
}

}  // namespace arbor
