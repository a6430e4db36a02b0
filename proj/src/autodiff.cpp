#include "salab/autodiff.hpp"

#include <cmath>
#include <string>

namespace salab {

namespace {

constexpr double kDeepliftDeltaFloor = 1e-7;
constexpr double kCosineNormFloor = 1e-12;

std::string shape_pair(const Tensor& a, const Tensor& b) {
  return a.shape().str() + " and " + b.shape().str();
}

Eigen::ArrayXd stable_softmax(const Eigen::ArrayXd& x) {
  const double m = x.maxCoeff();
  Eigen::ArrayXd e = (x - m).exp();
  return e / e.sum();
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSumAll: return "sum";
    case OpKind::kMeanAll: return "mean";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMeanAxis: return "mean_axis";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kConcat: return "concat";
    case OpKind::kIndexSelect: return "index_select";
    case OpKind::kL2NormSq: return "l2_norm_sq";
    case OpKind::kCosineSimilarity: return "cosine_similarity";
    case OpKind::kReshape: return "reshape";
  }
  return "?";
}

void Tape::check_ids(std::span<const NodeId> inputs) const {
  for (NodeId id : inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw ContractViolation("input node " + std::to_string(id) + " does not exist on tape");
  }
}

NodeId Tape::record(OpKind kind, std::span<const NodeId> inputs, OpPayload payload) {
  check_ids(inputs);
  for (NodeId id : inputs) {
    if (value(id).size() == 0) throw ShapeError("empty operand for " + std::string(op_name(kind)));
  }

  Node n;
  n.kind = kind;
  n.first_input = static_cast<std::int32_t>(input_arena_.size());
  n.n_inputs = static_cast<std::int32_t>(inputs.size());
  n.scalar = payload.scalar;
  n.axis = payload.axis;

  auto in = [&](std::size_t i) -> const Tensor& { return value(inputs[i]); };
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(std::string(op_name(kind)) + ": " + msg);
  };

  switch (kind) {
    case OpKind::kLeaf: {
      require(inputs.empty(), "leaf takes no inputs");
      break;  // value supplied by caller through payload-free path; see leaf()
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      require(inputs.size() == 2, "expects two operands");
      require(in(0).shape() == in(1).shape(), "operand shapes differ: " + shape_pair(in(0), in(1)));
      Tensor out{in(0).shape()};
      if (kind == OpKind::kAdd) out.array() = in(0).array() + in(1).array();
      if (kind == OpKind::kSub) out.array() = in(0).array() - in(1).array();
      if (kind == OpKind::kMul) out.array() = in(0).array() * in(1).array();
      n.value = std::move(out);
      break;
    }
    case OpKind::kScale: {
      require(inputs.size() == 1, "expects one operand");
      Tensor out{in(0).shape()};
      out.array() = in(0).array() * payload.scalar;
      n.value = std::move(out);
      break;
    }
    case OpKind::kMatMul: {
      require(inputs.size() == 2, "expects two operands");
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      require(a.shape().rank == 2 && b.shape().rank == 2, "operands must be rank-2, got " + shape_pair(a, b));
      require(a.cols() == b.rows(), "inner dimensions mismatch: " + shape_pair(a, b));
      Tensor out{Shape::matrix(a.rows(), b.cols())};
      out.matrix().noalias() = a.matrix() * b.matrix();
      n.value = std::move(out);
      break;
    }
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kExp:
    case OpKind::kLog: {
      require(inputs.size() == 1, "expects one operand");
      Tensor out{in(0).shape()};
      const auto& x = in(0).array();
      if (kind == OpKind::kTanh) out.array() = x.tanh();
      if (kind == OpKind::kSigmoid) out.array() = 1.0 / (1.0 + (-x).exp());
      if (kind == OpKind::kExp) out.array() = x.exp();
      if (kind == OpKind::kLog) {
        if (!(x > 0.0).all()) throw ContractViolation("log: non-positive operand value");
        out.array() = x.log();
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kSumAll:
    case OpKind::kMeanAll: {
      require(inputs.size() == 1, "expects one operand");
      const double s = in(0).array().sum();
      n.value = Tensor::scalar(kind == OpKind::kSumAll ? s : s / static_cast<double>(in(0).size()));
      break;
    }
    case OpKind::kSumAxis:
    case OpKind::kMeanAxis: {
      require(inputs.size() == 1, "expects one operand");
      const Tensor& a = in(0);
      require(a.shape().rank == 2, "axis reduction requires a rank-2 operand");
      if (payload.axis != 0 && payload.axis != 1)
        throw ContractViolation(std::string(op_name(kind)) + ": axis out of range");
      const bool rows_axis = payload.axis == 0;
      Tensor out{Shape::vector(rows_axis ? a.cols() : a.rows())};
      if (rows_axis)
        out.array() = a.matrix().colwise().sum().transpose().array();
      else
        out.array() = a.matrix().rowwise().sum().array();
      if (kind == OpKind::kMeanAxis)
        out.array() /= static_cast<double>(rows_axis ? a.rows() : a.cols());
      n.value = std::move(out);
      break;
    }
    case OpKind::kSoftmax: {
      require(inputs.size() == 1, "expects one operand");
      const Tensor& a = in(0);
      const int rank = a.shape().rank;
      require(rank == 1 || rank == 2, "softmax requires rank-1 or rank-2 operand");
      if (payload.axis < 0 || payload.axis >= rank)
        throw ContractViolation("softmax: axis out of range");
      Tensor out{a.shape()};
      if (rank == 1) {
        out.array() = stable_softmax(a.array());
      } else if (payload.axis == 1) {
        for (Eigen::Index r = 0; r < a.rows(); ++r)
          out.matrix().row(r) = stable_softmax(a.matrix().row(r).transpose().array()).matrix().transpose();
      } else {
        for (Eigen::Index c = 0; c < a.cols(); ++c)
          out.matrix().col(c) = stable_softmax(a.matrix().col(c).array()).matrix();
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::kConcat: {
      require(!inputs.empty(), "concat of nothing");
      const int rank = in(0).shape().rank;
      if (payload.axis < 0 || payload.axis > (rank == 2 ? 1 : 0))
        throw ContractViolation("concat: axis out of range");
      for (std::size_t i = 1; i < inputs.size(); ++i)
        require(in(i).shape().rank == rank, "mixed ranks in concat");
      if (rank == 0) {
        Tensor out{Shape::vector(static_cast<Eigen::Index>(inputs.size()))};
        for (std::size_t i = 0; i < inputs.size(); ++i) out(static_cast<Eigen::Index>(i)) = in(i)(0);
        n.value = std::move(out);
      } else if (rank == 1) {
        Eigen::Index total = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) total += in(i).size();
        Tensor out{Shape::vector(total)};
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          out.array().segment(at, in(i).size()) = in(i).array();
          at += in(i).size();
        }
        n.value = std::move(out);
      } else if (payload.axis == 0) {
        Eigen::Index rows = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          require(in(i).cols() == in(0).cols(), "column counts differ in concat");
          rows += in(i).rows();
        }
        Tensor out{Shape::matrix(rows, in(0).cols())};
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          out.matrix().middleRows(at, in(i).rows()) = in(i).matrix();
          at += in(i).rows();
        }
        n.value = std::move(out);
      } else {
        Eigen::Index cols = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          require(in(i).rows() == in(0).rows(), "row counts differ in concat");
          cols += in(i).cols();
        }
        Tensor out{Shape::matrix(in(0).rows(), cols)};
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          out.matrix().middleCols(at, in(i).cols()) = in(i).matrix();
          at += in(i).cols();
        }
        n.value = std::move(out);
      }
      break;
    }
    case OpKind::kIndexSelect: {
      require(inputs.size() == 1, "expects one operand");
      const Tensor& a = in(0);
      const int rank = a.shape().rank;
      require(rank == 1 || rank == 2, "index_select requires rank-1 or rank-2 operand");
      require(!payload.indices.empty(), "no indices given");
      n.first_index = static_cast<std::int32_t>(index_arena_.size());
      n.n_indices = static_cast<std::int32_t>(payload.indices.size());
      for (Eigen::Index i : payload.indices) {
        if (i < 0 || i >= a.shape().d0)
          throw ContractViolation("index_select: index " + std::to_string(i) + " out of range for " +
                                  a.shape().str());
      }
      const Eigen::Index k = static_cast<Eigen::Index>(payload.indices.size());
      if (rank == 1) {
        Tensor out{Shape::vector(k)};
        for (Eigen::Index j = 0; j < k; ++j) out(j) = a(payload.indices[static_cast<std::size_t>(j)]);
        n.value = std::move(out);
      } else {
        Tensor out{Shape::matrix(k, a.cols())};
        for (Eigen::Index j = 0; j < k; ++j)
          out.matrix().row(j) = a.matrix().row(payload.indices[static_cast<std::size_t>(j)]);
        n.value = std::move(out);
      }
      index_arena_.insert(index_arena_.end(), payload.indices.begin(), payload.indices.end());
      break;
    }
    case OpKind::kL2NormSq: {
      require(inputs.size() == 1, "expects one operand");
      n.value = Tensor::scalar(in(0).array().square().sum());
      break;
    }
    case OpKind::kCosineSimilarity: {
      require(inputs.size() == 2, "expects two operands");
      require(in(0).size() == in(1).size(), "operand sizes differ: " + shape_pair(in(0), in(1)));
      const double na = std::sqrt(in(0).array().square().sum());
      const double nb = std::sqrt(in(1).array().square().sum());
      double c = 0.0;
      if (na >= kCosineNormFloor && nb >= kCosineNormFloor)
        c = (in(0).array() * in(1).array()).sum() / (na * nb);
      n.value = Tensor::scalar(c);
      break;
    }
    case OpKind::kReshape: {
      require(inputs.size() == 1, "expects one operand");
      n.value = in(0).reshaped(payload.reshape);
      break;
    }
  }

  input_arena_.insert(input_arena_.end(), inputs.begin(), inputs.end());
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

// ---- builders --------------------------------------------------------------

Var leaf(Tape& tape, Tensor value) {
  if (value.size() == 0) throw ShapeError("leaf: empty tensor");
  NodeId id = tape.record(OpKind::kLeaf, {});
  // Install the value after the generic record path (leaves carry no inputs).
  const_cast<Tensor&>(tape.value(id)) = std::move(value);
  return Var{&tape, id};
}

namespace {

Var unary(OpKind kind, Var a, OpPayload payload = {}) {
  const NodeId in[1] = {a.id};
  return Var{a.tape, a.tape->record(kind, in, std::move(payload))};
}

Var binary(OpKind kind, Var a, Var b, OpPayload payload = {}) {
  if (a.tape != b.tape) throw ContractViolation("operands live on different tapes");
  const NodeId in[2] = {a.id, b.id};
  return Var{a.tape, a.tape->record(kind, in, std::move(payload))};
}

}  // namespace

Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }
Var scale(Var a, double factor) {
  OpPayload p;
  p.scalar = factor;
  return unary(OpKind::kScale, a, std::move(p));
}
Var matmul(Var a, Var b) { return binary(OpKind::kMatMul, a, b); }
Var tanh(Var a) { return unary(OpKind::kTanh, a); }
Var sigmoid(Var a) { return unary(OpKind::kSigmoid, a); }
Var exp(Var a) { return unary(OpKind::kExp, a); }
Var log(Var a) { return unary(OpKind::kLog, a); }
Var sum(Var a) { return unary(OpKind::kSumAll, a); }
Var mean(Var a) { return unary(OpKind::kMeanAll, a); }
Var sum(Var a, int axis) {
  OpPayload p;
  p.axis = axis;
  return unary(OpKind::kSumAxis, a, std::move(p));
}
Var mean(Var a, int axis) {
  OpPayload p;
  p.axis = axis;
  return unary(OpKind::kMeanAxis, a, std::move(p));
}
Var softmax(Var a, int axis) {
  OpPayload p;
  p.axis = axis;
  return unary(OpKind::kSoftmax, a, std::move(p));
}
Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  std::vector<NodeId> ids;
  ids.reserve(parts.size());
  for (const Var& v : parts) {
    if (v.tape != parts[0].tape) throw ContractViolation("operands live on different tapes");
    ids.push_back(v.id);
  }
  OpPayload p;
  p.axis = axis;
  return Var{parts[0].tape, parts[0].tape->record(OpKind::kConcat, ids, std::move(p))};
}
Var index_select(Var a, std::span<const Eigen::Index> indices) {
  OpPayload p;
  p.indices.assign(indices.begin(), indices.end());
  return unary(OpKind::kIndexSelect, a, std::move(p));
}
Var l2_norm_sq(Var a) { return unary(OpKind::kL2NormSq, a); }
Var cosine_similarity(Var a, Var b) { return binary(OpKind::kCosineSimilarity, a, b); }
Var reshape(Var a, Shape shape) {
  OpPayload p;
  p.reshape = shape;
  return unary(OpKind::kReshape, a, std::move(p));
}

const Tensor& value(Var v) {
  if (!v.valid()) throw ContractViolation("invalid Var handle");
  return v.tape->value(v.id);
}

const Tensor& Gradients::wrt(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= grads_.size())
    throw ContractViolation("gradient requested for a node not on the differentiated tape");
  return grads_[static_cast<std::size_t>(v.id)];
}

// ---- reverse sweeps --------------------------------------------------------

namespace {

// Lazily materializes the accumulator tensor for a node.
Tensor& acc(Gradients& gs, const Tape& tape, NodeId id) {
  Tensor& t = gs.slot(id);
  if (t.array().size() == 0) t = Tensor{tape.value(id).shape()};
  return t;
}

void softmax_pullback(const Tensor& y, const Tensor& g, int axis, Tensor& out) {
  if (y.shape().rank <= 1) {
    const double dot = (g.array() * y.array()).sum();
    out.array() += y.array() * (g.array() - dot);
  } else if (axis == 1) {
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const auto yr = y.matrix().row(r).array();
      const auto gr = g.matrix().row(r).array();
      const double dot = (gr * yr).sum();
      out.matrix().row(r).array() += yr * (gr - dot);
    }
  } else {
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      const auto yc = y.matrix().col(c).array();
      const auto gc = g.matrix().col(c).array();
      const double dot = (gc * yc).sum();
      out.matrix().col(c).array() += yc * (gc - dot);
    }
  }
}

void cosine_pullback(const Tensor& a, const Tensor& b, double cos_value, double g0, Tensor& ga, Tensor& gb) {
  const double na = std::sqrt(a.array().square().sum());
  const double nb = std::sqrt(b.array().square().sum());
  if (na < kCosineNormFloor || nb < kCosineNormFloor) return;  // value pinned to 0; zero (sub)gradient
  const double inv = 1.0 / (na * nb);
  ga.array() += g0 * (b.array() * inv - cos_value * a.array() / (na * na));
  gb.array() += g0 * (a.array() * inv - cos_value * b.array() / (nb * nb));
}

void check_scalar_output(const Tape& tape, Var output) {
  if (!output.valid() || output.tape != &tape)
    throw ContractViolation("output is not a node of this tape");
  if (tape.value(output.id).size() != 1)
    throw ContractViolation("backward requires a scalar output, got shape " +
                            tape.value(output.id).shape().str());
}

void fill_unset_with_zeros(Gradients& gs, const Tape& tape) {
  for (NodeId id = 0; id < static_cast<NodeId>(tape.size()); ++id) {
    Tensor& t = gs.slot(id);
    if (t.array().size() == 0) t = Tensor{tape.value(id).shape()};
  }
}

}  // namespace

Gradients backward(const Tape& tape, Var output) {
  check_scalar_output(tape, output);
  Gradients gs(tape.size());
  acc(gs, tape, output.id).array().setOnes();

  for (NodeId id = output.id; id >= 0; --id) {
    const Node& n = tape.node(id);
    const Tensor& g = gs.slot(id);
    if (g.array().size() == 0) continue;  // not reachable from output
    const auto in = tape.inputs_of(n);
    auto val = [&](std::size_t i) -> const Tensor& { return tape.value(in[i]); };

    switch (n.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd:
        acc(gs, tape, in[0]).array() += g.array();
        acc(gs, tape, in[1]).array() += g.array();
        break;
      case OpKind::kSub:
        acc(gs, tape, in[0]).array() += g.array();
        acc(gs, tape, in[1]).array() -= g.array();
        break;
      case OpKind::kMul:
        acc(gs, tape, in[0]).array() += g.array() * val(1).array();
        acc(gs, tape, in[1]).array() += g.array() * val(0).array();
        break;
      case OpKind::kScale:
        acc(gs, tape, in[0]).array() += n.scalar * g.array();
        break;
      case OpKind::kMatMul:
        acc(gs, tape, in[0]).matrix().noalias() += g.matrix() * val(1).matrix().transpose();
        acc(gs, tape, in[1]).matrix().noalias() += val(0).matrix().transpose() * g.matrix();
        break;
      case OpKind::kTanh:
        acc(gs, tape, in[0]).array() += g.array() * (1.0 - n.value.array().square());
        break;
      case OpKind::kSigmoid:
        acc(gs, tape, in[0]).array() += g.array() * n.value.array() * (1.0 - n.value.array());
        break;
      case OpKind::kExp:
        acc(gs, tape, in[0]).array() += g.array() * n.value.array();
        break;
      case OpKind::kLog:
        acc(gs, tape, in[0]).array() += g.array() / val(0).array();
        break;
      case OpKind::kSumAll:
        acc(gs, tape, in[0]).array() += g(0);
        break;
      case OpKind::kMeanAll:
        acc(gs, tape, in[0]).array() += g(0) / static_cast<double>(val(0).size());
        break;
      case OpKind::kSumAxis:
      case OpKind::kMeanAxis: {
        const double denom =
            n.kind == OpKind::kMeanAxis
                ? static_cast<double>(n.axis == 0 ? val(0).rows() : val(0).cols())
                : 1.0;
        Tensor& ga = acc(gs, tape, in[0]);
        if (n.axis == 0)
          ga.matrix().rowwise() += (g.vector() / denom).transpose();
        else
          ga.matrix().colwise() += g.vector() / denom;
        break;
      }
      case OpKind::kSoftmax:
        softmax_pullback(n.value, g, n.axis, acc(gs, tape, in[0]));
        break;
      case OpKind::kConcat: {
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          const Tensor& vi = val(i);
          Tensor& gi = acc(gs, tape, in[i]);
          if (vi.shape().rank <= 1) {
            gi.array() += g.array().segment(at, vi.size());
            at += vi.size();
          } else if (n.axis == 0) {
            gi.matrix() += g.matrix().middleRows(at, vi.rows());
            at += vi.rows();
          } else {
            gi.matrix() += g.matrix().middleCols(at, vi.cols());
            at += vi.cols();
          }
        }
        break;
      }
      case OpKind::kIndexSelect: {
        const auto idx = tape.indices_of(n);
        Tensor& ga = acc(gs, tape, in[0]);
        if (val(0).shape().rank == 1) {
          for (std::size_t j = 0; j < idx.size(); ++j) ga(idx[j]) += g(static_cast<Eigen::Index>(j));
        } else {
          for (std::size_t j = 0; j < idx.size(); ++j)
            ga.matrix().row(idx[j]) += g.matrix().row(static_cast<Eigen::Index>(j));
        }
        break;
      }
      case OpKind::kL2NormSq:
        acc(gs, tape, in[0]).array() += 2.0 * g(0) * val(0).array();
        break;
      case OpKind::kCosineSimilarity:
        cosine_pullback(val(0), val(1), n.value(0), g(0), acc(gs, tape, in[0]), acc(gs, tape, in[1]));
        break;
      case OpKind::kReshape:
        acc(gs, tape, in[0]).array() += g.array();
        break;
    }
  }

  fill_unset_with_zeros(gs, tape);
  return gs;
}

Gradients deeplift_multipliers(const Tape& actual, const Tape& reference, Var output) {
  check_scalar_output(actual, output);
  if (actual.size() != reference.size())
    throw ContractViolation("deeplift: actual and reference tapes differ in length");
  for (NodeId id = 0; id < static_cast<NodeId>(actual.size()); ++id) {
    const Node& a = actual.node(id);
    const Node& r = reference.node(id);
    const auto ain = actual.inputs_of(a);
    const auto rin = reference.inputs_of(r);
    const bool same_structure =
        a.kind == r.kind && a.scalar == r.scalar && a.axis == r.axis &&
        a.value.shape() == r.value.shape() &&
        std::equal(ain.begin(), ain.end(), rin.begin(), rin.end()) &&
        [&] {
          const auto ai = actual.indices_of(a);
          const auto ri = reference.indices_of(r);
          return std::equal(ai.begin(), ai.end(), ri.begin(), ri.end());
        }();
    if (!same_structure)
      throw ContractViolation("deeplift: tape structures diverge at node " + std::to_string(id));
  }

  Gradients ms(actual.size());
  acc(ms, actual, output.id).array().setOnes();

  for (NodeId id = output.id; id >= 0; --id) {
    const Node& n = actual.node(id);
    const Tensor& m = ms.slot(id);
    if (m.array().size() == 0) continue;
    const auto in = actual.inputs_of(n);
    auto dual = [&](std::size_t i) {
      return DualActivationState{actual.value(in[i]), reference.value(in[i])};
    };
    const DualActivationState out_dual{n.value, reference.value(id)};

    switch (n.kind) {
      case OpKind::kLeaf:
        break;

      // Linear ops reuse the gradient rule; it is value-free and therefore
      // already an exact delta decomposition.
      case OpKind::kAdd:
        acc(ms, actual, in[0]).array() += m.array();
        acc(ms, actual, in[1]).array() += m.array();
        break;
      case OpKind::kSub:
        acc(ms, actual, in[0]).array() += m.array();
        acc(ms, actual, in[1]).array() -= m.array();
        break;
      case OpKind::kScale:
        acc(ms, actual, in[0]).array() += n.scalar * m.array();
        break;
      case OpKind::kSumAll:
        acc(ms, actual, in[0]).array() += m(0);
        break;
      case OpKind::kMeanAll:
        acc(ms, actual, in[0]).array() += m(0) / static_cast<double>(actual.value(in[0]).size());
        break;
      case OpKind::kSumAxis:
      case OpKind::kMeanAxis: {
        const Tensor& v0 = actual.value(in[0]);
        const double denom =
            n.kind == OpKind::kMeanAxis ? static_cast<double>(n.axis == 0 ? v0.rows() : v0.cols()) : 1.0;
        Tensor& ma = acc(ms, actual, in[0]);
        if (n.axis == 0)
          ma.matrix().rowwise() += (m.vector() / denom).transpose();
        else
          ma.matrix().colwise() += m.vector() / denom;
        break;
      }
      case OpKind::kConcat: {
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          const Tensor& vi = actual.value(in[i]);
          Tensor& mi = acc(ms, actual, in[i]);
          if (vi.shape().rank <= 1) {
            mi.array() += m.array().segment(at, vi.size());
            at += vi.size();
          } else if (n.axis == 0) {
            mi.matrix() += m.matrix().middleRows(at, vi.rows());
            at += vi.rows();
          } else {
            mi.matrix() += m.matrix().middleCols(at, vi.cols());
            at += vi.cols();
          }
        }
        break;
      }
      case OpKind::kIndexSelect: {
        const auto idx = actual.indices_of(n);
        Tensor& ma = acc(ms, actual, in[0]);
        if (actual.value(in[0]).shape().rank == 1) {
          for (std::size_t j = 0; j < idx.size(); ++j) ma(idx[j]) += m(static_cast<Eigen::Index>(j));
        } else {
          for (std::size_t j = 0; j < idx.size(); ++j)
            ma.matrix().row(idx[j]) += m.matrix().row(static_cast<Eigen::Index>(j));
        }
        break;
      }
      case OpKind::kReshape:
        acc(ms, actual, in[0]).array() += m.array();
        break;

      // Bilinear ops: delta(A op B) = delta(A) op B_actual + A_reference op
      // delta(B), an exact split that reduces to the gradient rule whenever
      // one operand is held constant (the usual parameter-times-input case).
      case OpKind::kMul: {
        const auto a = dual(0);
        const auto b = dual(1);
        acc(ms, actual, in[0]).array() += m.array() * b.actual.array();
        acc(ms, actual, in[1]).array() += m.array() * a.reference.array();
        break;
      }
      case OpKind::kMatMul: {
        const auto a = dual(0);
        const auto b = dual(1);
        acc(ms, actual, in[0]).matrix().noalias() += m.matrix() * b.actual.matrix().transpose();
        acc(ms, actual, in[1]).matrix().noalias() += a.reference.matrix().transpose() * m.matrix();
        break;
      }

      // Elementwise nonlinearities: the Rescale rule.
      case OpKind::kTanh:
      case OpKind::kSigmoid:
      case OpKind::kExp:
      case OpKind::kLog: {
        const auto x = dual(0);
        const Eigen::ArrayXd dx = x.actual.array() - x.reference.array();
        const Eigen::ArrayXd dy = out_dual.actual.array() - out_dual.reference.array();
        Eigen::ArrayXd local(dx.size());
        switch (n.kind) {
          case OpKind::kTanh: local = 1.0 - n.value.array().square(); break;
          case OpKind::kSigmoid: local = n.value.array() * (1.0 - n.value.array()); break;
          case OpKind::kExp: local = n.value.array(); break;
          default: local = 1.0 / x.actual.array(); break;
        }
        const Eigen::ArrayXd ratio =
            (dx.abs() < kDeepliftDeltaFloor).select(local, dy / dx.max(-1.0).min(1.0).sign() / dx.abs().max(kDeepliftDeltaFloor));
        acc(ms, actual, in[0]).array() += m.array() * ratio;
        break;
      }

      // Softmax has no elementwise delta decomposition; fall back to its
      // local Jacobian at the actual activations.
      case OpKind::kSoftmax:
        softmax_pullback(n.value, m, n.axis, acc(ms, actual, in[0]));
        break;

      // y = sum x^2: delta(y) = sum (x_a + x_r)(x_a - x_r), so the exact
      // multiplier is x_a + x_r.
      case OpKind::kL2NormSq: {
        const auto x = dual(0);
        acc(ms, actual, in[0]).array() += m(0) * (x.actual.array() + x.reference.array());
        break;
      }

      // Cosine similarity only appears in regularization terms, never on an
      // attribution path; local gradient at the actual activations.
      case OpKind::kCosineSimilarity:
        cosine_pullback(actual.value(in[0]), actual.value(in[1]), n.value(0), m(0),
                        acc(ms, actual, in[0]), acc(ms, actual, in[1]));
        break;
    }
  }

  fill_unset_with_zeros(ms, actual);
  return ms;
}

}  // namespace salab
