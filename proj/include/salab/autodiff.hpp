#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "salab/tensor.hpp"

namespace salab {

// Reverse-mode automatic differentiation over a tape of eagerly evaluated
// primitive operations. Node ids are topological by construction: inputs of a
// node always precede it, so one reverse sweep visits each node exactly once.
//
// Tensors on the tape are immutable. A Tape is single-threaded; independent
// tapes may run concurrently.

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,      // elementwise product
  kScale,    // multiply by compile-time constant scalar
  kMatMul,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kSumAll,
  kMeanAll,
  kSumAxis,
  kMeanAxis,
  kSoftmax,  // stabilized by max subtraction
  kConcat,
  kIndexSelect,
  kL2NormSq,
  kCosineSimilarity,
  kReshape,
};

const char* op_name(OpKind kind);

using NodeId = std::int32_t;

class Tape;

// Handle to one node of a tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Optional per-op payload. Only the fields relevant to the op kind are read.
struct OpPayload {
  double scalar = 0.0;
  int axis = -1;
  std::vector<Eigen::Index> indices;
  Shape reshape;
};

struct Node {
  OpKind kind = OpKind::kLeaf;
  std::int32_t first_input = 0;
  std::int32_t n_inputs = 0;
  double scalar = 0.0;
  int axis = -1;
  std::int32_t first_index = 0;
  std::int32_t n_indices = 0;
  Tensor value;
};

class Tape {
 public:
  // Appends a node, validating shapes for the op kind and computing the
  // forward value eagerly. Throws ShapeError on operand mismatch and
  // ContractViolation on out-of-domain payloads (bad axis, bad index).
  NodeId record(OpKind kind, std::span<const NodeId> inputs, OpPayload payload = {});

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  std::span<const NodeId> inputs_of(const Node& n) const {
    return {input_arena_.data() + n.first_input, static_cast<std::size_t>(n.n_inputs)};
  }
  std::span<const Eigen::Index> indices_of(const Node& n) const {
    return {index_arena_.data() + n.first_index, static_cast<std::size_t>(n.n_indices)};
  }

  void reserve(std::size_t n_nodes) { nodes_.reserve(n_nodes); }

 private:
  void check_ids(std::span<const NodeId> inputs) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> input_arena_;
  std::vector<Eigen::Index> index_arena_;
};

// ---- graph building -------------------------------------------------------

Var leaf(Tape& tape, Tensor value);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var matmul(Var a, Var b);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);
Var mean(Var a);
Var sum(Var a, int axis);
Var mean(Var a, int axis);
Var softmax(Var a, int axis);
Var concat(std::span<const Var> parts, int axis);
Var index_select(Var a, std::span<const Eigen::Index> indices);
Var l2_norm_sq(Var a);
Var cosine_similarity(Var a, Var b);
Var reshape(Var a, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

const Tensor& value(Var v);

// ---- differentiation ------------------------------------------------------

// Per-node gradient (or DeepLIFT multiplier) storage for one backward sweep.
// Nodes not reachable from the output hold zero tensors.
class Gradients {
 public:
  explicit Gradients(std::size_t n) : grads_(n) {}
  const Tensor& wrt(Var v) const;
  Tensor& slot(NodeId id) { return grads_[static_cast<std::size_t>(id)]; }
  const Tensor& slot(NodeId id) const { return grads_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tape&, Var);
  friend Gradients deeplift_multipliers(const Tape&, const Tape&, Var);
  std::vector<Tensor> grads_;
};

// Gradients of a scalar output with respect to every tape node. Gradients
// accumulate by sum over all paths. Requires value(output).size() == 1.
Gradients backward(const Tape& tape, Var output);

// Activation pair for one node across the actual and reference runs of an
// identically structured computation.
struct DualActivationState {
  const Tensor& actual;
  const Tensor& reference;
};

// DeepLIFT (Rescale) multipliers of a scalar output with respect to every
// node, computed from two structurally identical tapes built on the actual
// and reference inputs. Elementwise nonlinearities use delta-out over
// delta-in (local gradient when |delta-in| < 1e-7); linear ops use the
// ordinary gradient rule; bilinear ops (matmul, mul) split deltas exactly by
// pairing one operand at actual values with the other at reference values;
// softmax falls back to its local Jacobian at the actual activations.
// Attribution of a leaf is multiplier * (actual - reference).
Gradients deeplift_multipliers(const Tape& actual, const Tape& reference, Var output);

}  // namespace salab
