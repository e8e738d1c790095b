// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "arbor/rng.hpp"
#include "arbor/tensor.hpp"
#include "arbor/tree.hpp"

namespace arbor {

// Named parameter tensors of one leaf instance (or the head).
struct ParamSet {
  std::map<std::string, Tensor> tensors;  // learnable
  std::map<std::string, Tensor> buffers;  // batch-norm running stats
};

// Parameters keyed by leaf instance. Replicated branches (b in {4,8}) get
// one entry per replica, keyed "<node_id>@r0@r1..." along the replication
// path; the head lives under the key "head".
struct ParamStore {
  std::map<std::string, ParamSet> sets;
  std::map<std::string, std::map<std::string, Tensor>> momentum;

  std::int64_t parameter_count() const;
};

struct TrainConfig {
  double learning_rate = 0.04;
  double weight_decay = 3e-4;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 10;
};

enum class Phase { Train, Eval };

// Visits every leaf instance in execution order with its parameter key and
// input state; replicated subtrees are visited once per replica.
void for_each_leaf_instance(
    const ArchitectureTree& tree,
    const std::function<void(const DerivationNode& leaf, const std::string& key,
                             const ShapeState& in_state)>& fn);

// Fresh parameters for a shape-annotated tree: linear/conv weights
// uniform(+-sqrt(6/fan_in)) with zero bias, norm scale 1 / shift 0,
// positional encodings N(0, 0.02).
ParamStore init_params(const ArchitectureTree& tree, Rng& rng);

enum class OpCode {
  LinearCol,
  LinearIm,
  Conv1d,
  Im2col,
  Col2im,
  Permute,
  BatchNorm,
  LayerNorm,
  LeakyRelu,
  Softmax,
  PosEnc,
  AddN,
  ConcatN,
  Slice,
  Matmul,
  HeadReduce,
  HeadPool,
  HeadLinear,
  HeadChannelLinear,
};

// One recorded primitive application. Inputs and output are slot indices
// into Execution::values.
struct TapeOp {
  OpCode code;
  std::vector<int> in;
  int out = -1;
  std::string key;          // parameter key, when parameterised
  int dim = 0;              // concat/slice tensor axis (batch is axis 0)
  int index = 0, parts = 1; // slice position
  int k = 0, s = 0, p = 0;  // window geometry
  std::vector<int> order;   // permute, full tensor axes
  bool trans_b = false;     // matmul with implicit transpose of operand 2
  bool col_insert = false;  // dense head on Col features
  double scale = 1.0;       // matmul scaling factor
  Tensor aux1, aux2;        // saved statistics / lowered patches
};

// Forward cache: the value tape needed for reverse-mode differentiation.
struct Execution {
  std::vector<Tensor> values;
  std::vector<TapeOp> ops;
  int input_slot = -1;
  int output_slot = -1;
  Phase phase = Phase::Eval;
};

struct Gradients {
  std::map<std::string, std::map<std::string, Tensor>> params;
  Tensor input;
};

// Runs the backbone on a batched input (input dims minus batch must equal
// the tree's input state). Output dims equal the inferred out_state.
Execution forward(const ArchitectureTree& tree, ParamStore& params,
                  const Tensor& input, Phase phase);

const Tensor& output_of(const Execution& exec);

// Reverse-mode gradients for every parameter and for the input. The cache
// must come from a train-phase forward.
Gradients backward(const ArchitectureTree& tree, const ParamStore& params,
                   const Execution& exec, const Tensor& output_gradient);

// Fixed network head. Classification: mean-reduce the spatial (Im) or
// sequence (Col) axes, then a linear map to the class count. Dense:
// adaptive average pooling (area interpolation) of the final two axes to
// the target size, then a channel-mapping linear.
Tensor apply_head(const Tensor& features, Mode mode, const HeadDescriptor& head,
                  const ParamSet& head_params);

// Forward through backbone and head on one tape, for training.
Execution forward_with_head(const ArchitectureTree& tree, ParamStore& params,
                            const Tensor& input, Phase phase);

// Classic momentum update: v <- mu v + g + lambda theta; theta <- theta - eta v.
void sgd_step(ParamStore& params, const Gradients& grads,
              const TrainConfig& config);

// Debugging dump of all parameter tensors (little-endian f64 with a keyed
// index header).
void dump_weights(const ParamStore& params, const std::string& path);
ParamStore load_weights(const std::string& path);

}  // namespace arbor
