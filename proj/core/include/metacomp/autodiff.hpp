#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacomp/tensor.hpp"

namespace metacomp::autodiff {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

enum class Op : std::uint8_t {
  kInput,
  kConst,
  kParam,
  kAdd,
  kAddConst,
  kMul,
  kScale,
  kMatmul,
  kTranspose,
  kRelu,
  kStepMask,
  kTanh,
  kLog,
  kExp,
  kRecip,
  kRsqrt,
  kSoftmax,
  kLogSoftmax,
  kSum,
  kRowSum,
  kColSum,
  kBcastScalar,
  kColBcast,
  kRowBcast,
  kReshape,
  kIndexSelect,
  kEmbeddingLookup,
  kScatterRows,
  kConcatRows,
  kDetach,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::kConst;
  std::vector<NodeId> inputs;
  Tensor value;
  bool has_value = false;
  Tensor grad;  // grad-slot; populated by the backward pass for requested nodes
  bool has_grad = false;
  double scalar = 0.0;                 // kScale factor / kAddConst addend
  std::vector<std::int32_t> indices;   // gather / scatter row indices
  std::vector<std::size_t> shape_arg;  // broadcast target shape / scatter row count
  std::string name;                    // kInput binding name
};

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dynamic computation graph with eager forward evaluation and a reverse pass
/// that emits gradients as new graph nodes. Because adjoints are ordinary
/// nodes built from the same primitives, calling grad() on the result of a
/// previous grad() differentiates through it, which is what an unrolled
/// inner-loop update needs.
class Graph {
 public:
  Graph() = default;
  explicit Graph(std::size_t reserve_hint) { nodes_.reserve(reserve_hint); }

  // ---- leaves ----
  NodeId input(std::string name, std::vector<std::size_t> shape);  // unbound placeholder
  NodeId input(std::string name, Tensor value);
  NodeId constant(Tensor value);
  NodeId param(Tensor value);

  // ---- elementwise / scalar ----
  NodeId add(NodeId a, NodeId b);
  NodeId add_const(NodeId a, double c);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId a);
  NodeId step_mask(NodeId a);  // 1 where a > 0; zero-derivative by contract
  NodeId tanh_(NodeId a);
  NodeId log_(NodeId a);
  NodeId exp_(NodeId a);
  NodeId recip(NodeId a);
  NodeId rsqrt(NodeId a);  // x^(-1/2)
  NodeId detach(NodeId a);  // identity value, stops gradient flow

  // ---- linear algebra ----
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);

  // ---- normalization ----
  NodeId softmax(NodeId a);      // row-wise on matrices, element-wise on vectors
  NodeId log_softmax(NodeId a);

  // ---- reductions & broadcasts ----
  NodeId sum(NodeId a);                                       // -> scalar
  NodeId row_sum(NodeId a);                                   // (n,m) -> (n)
  NodeId col_sum(NodeId a);                                   // (n,m) -> (m)
  NodeId bcast_scalar(NodeId a, std::vector<std::size_t> shape);
  NodeId col_bcast(NodeId a, std::size_t cols);               // (n) -> (n,m), row i = v[i]
  NodeId row_bcast(NodeId a, std::size_t rows);               // (m) -> (n,m), each row = v
  NodeId reshape(NodeId a, std::vector<std::size_t> shape);

  // ---- gather / scatter / concat ----
  NodeId index_select(NodeId a, std::vector<std::int32_t> idx);
  NodeId embedding_lookup(NodeId table, std::vector<std::int32_t> ids);
  NodeId scatter_rows(NodeId a, std::vector<std::int32_t> idx, std::size_t rows);
  NodeId concat_rows(NodeId a, NodeId b);

  // ---- queries ----
  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(NodeId id) const;
  double scalar_value(NodeId id) const;
  const Tensor& grad_slot(NodeId id) const;
  std::span<const NodeId> params() const { return params_; }
  bool is_param(NodeId id) const { return node(id).op == Op::kParam; }

  /// Bind named inputs, recompute every node in creation order and return the
  /// output's value. Unbound inputs and shape mismatches are errors.
  Tensor eval(NodeId output, const std::map<std::string, Tensor>& bindings);

  /// Reverse pass from a scalar output. Returns one gradient node per `wrt`
  /// entry (zero-valued constants where the output does not depend on the
  /// parameter) and fills the grad-slots of the `wrt` nodes. By default every
  /// `wrt` node must be trainable; `allow_intermediate` lifts that check so an
  /// unrolled update can take gradients at intermediate parameter nodes.
  std::vector<NodeId> grad(NodeId output, std::span<const NodeId> wrt,
                           bool allow_intermediate = false);

 private:
  NodeId push_(Node n);
  void compute_(NodeId id);
  void check_finite_(NodeId id) const;
  // per-op adjoint contributions; appends nodes
  void backward_one_(NodeId id, NodeId upstream, std::vector<NodeId>& adjoint);

  std::vector<Node> nodes_;
  std::vector<NodeId> params_;
};

// ---- convenience composites (plain node builders, not primitive ops) ----
inline NodeId sub(Graph& g, NodeId a, NodeId b) { return g.add(a, g.scale(b, -1.0)); }
inline NodeId mean(Graph& g, NodeId a) {
  const std::size_t n = g.value(a).size();
  return g.scale(g.sum(a), 1.0 / static_cast<double>(n == 0 ? 1 : n));
}

// ---------------------------------------------------------------------------
// ParamVector: named flat view of all trainable values.
// ---------------------------------------------------------------------------

struct ParamSegment {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

class ParamVector {
 public:
  std::size_t add_segment(const std::string& name, std::vector<std::size_t> shape);

  std::size_t segment_count() const { return segments_.size(); }
  const ParamSegment& segment(std::size_t i) const { return segments_.at(i); }
  std::optional<std::size_t> find(const std::string& name) const;

  std::span<double> segment_data(std::size_t i);
  std::span<const double> segment_data(std::size_t i) const;

  /// Segment contents as a Tensor (unpack) / Tensor back into the flat array (pack).
  Tensor unpack(std::size_t i) const;
  void pack(std::size_t i, const Tensor& t);

  std::size_t size() const { return data_.size(); }
  std::vector<double>& flat() { return data_; }
  const std::vector<double>& flat() const { return data_; }

  std::string fingerprint() const;  // layout + contents hash

 private:
  std::vector<ParamSegment> segments_;
  std::vector<double> data_;
};

/// theta materialized as one trainable graph node per segment.
struct ParamNodes {
  std::vector<NodeId> ids;
  const ParamVector* layout = nullptr;  // names/shapes only

  NodeId at(const std::string& name) const;
};

ParamNodes make_param_nodes(Graph& g, const ParamVector& pv);

/// theta' = theta - alpha * grads, as differentiable graph nodes (Eq-style
/// unrolled update: the result stays a function of theta).
ParamNodes sgd_step(Graph& g, const ParamNodes& theta, std::span<const NodeId> grads, double alpha);

/// Copy current node values back into a ParamVector with the same layout.
void read_params(const Graph& g, const ParamNodes& nodes, ParamVector& out);

/// Gradients (one node per segment) flattened in layout order.
std::vector<double> flatten_grads(const Graph& g, const ParamVector& layout,
                                  std::span<const NodeId> grads);

}  // namespace metacomp::autodiff
