#include "metacomp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "metacomp/hash.hpp"

namespace metacomp::autodiff {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw GraphError(msg); }

void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

std::string describe(Op op, NodeId id) {
  std::ostringstream os;
  os << op_name(op) << " (node " << id << ")";
  return os.str();
}

void softmax_row(const double* in, double* out, std::size_t m) {
  double mx = in[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < m; ++j) out[j] *= inv;
}

void log_softmax_row(const double* in, double* out, std::size_t m) {
  double mx = in[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < m; ++j) z += std::exp(in[j] - mx);
  const double lz = std::log(z) + mx;
  for (std::size_t j = 0; j < m; ++j) out[j] = in[j] - lz;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConst: return "const";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kAddConst: return "add_const";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kRelu: return "relu";
    case Op::kStepMask: return "step_mask";
    case Op::kTanh: return "tanh";
    case Op::kLog: return "log";
    case Op::kExp: return "exp";
    case Op::kRecip: return "recip";
    case Op::kRsqrt: return "rsqrt";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kSum: return "sum";
    case Op::kRowSum: return "row_sum";
    case Op::kColSum: return "col_sum";
    case Op::kBcastScalar: return "bcast_scalar";
    case Op::kColBcast: return "col_bcast";
    case Op::kRowBcast: return "row_bcast";
    case Op::kReshape: return "reshape";
    case Op::kIndexSelect: return "index_select";
    case Op::kEmbeddingLookup: return "embedding_lookup";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kConcatRows: return "concat_rows";
    case Op::kDetach: return "detach";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

NodeId Graph::push_(Node n) {
  const NodeId id = static_cast<NodeId>(nodes_.size());
  for (NodeId in : n.inputs) {
    require(in >= 0 && in < id, "node input id out of range");
  }
  nodes_.push_back(std::move(n));
  if (nodes_.back().op == Op::kParam) params_.push_back(id);
  bool ready = true;
  for (NodeId in : nodes_.back().inputs) {
    if (!nodes_[static_cast<std::size_t>(in)].has_value) {
      ready = false;
      break;
    }
  }
  if (ready && nodes_.back().op != Op::kInput) compute_(id);
  return id;
}

NodeId Graph::input(std::string name, std::vector<std::size_t> shape) {
  Node n;
  n.op = Op::kInput;
  n.name = std::move(name);
  n.shape_arg = std::move(shape);
  n.value = Tensor::zeros(n.shape_arg);
  n.has_value = false;
  return push_(std::move(n));
}

NodeId Graph::input(std::string name, Tensor value) {
  Node n;
  n.op = Op::kInput;
  n.name = std::move(name);
  n.shape_arg = value.shape();
  n.value = std::move(value);
  n.has_value = true;
  return push_(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(value);
  n.has_value = true;
  return push_(std::move(n));
}

NodeId Graph::param(Tensor value) {
  Node n;
  n.op = Op::kParam;
  n.value = std::move(value);
  n.has_value = true;
  return push_(std::move(n));
}

namespace {
Node make(Op op, std::initializer_list<NodeId> ins) {
  Node n;
  n.op = op;
  n.inputs.assign(ins);
  return n;
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  require(node(a).value.same_shape(node(b).value),
          "add: shape mismatch " + node(a).value.shape_str() + " vs " + node(b).value.shape_str());
  return push_(make(Op::kAdd, {a, b}));
}

NodeId Graph::add_const(NodeId a, double c) {
  Node n = make(Op::kAddConst, {a});
  n.scalar = c;
  return push_(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  require(node(a).value.same_shape(node(b).value),
          "mul: shape mismatch " + node(a).value.shape_str() + " vs " + node(b).value.shape_str());
  return push_(make(Op::kMul, {a, b}));
}

NodeId Graph::scale(NodeId a, double c) {
  Node n = make(Op::kScale, {a});
  n.scalar = c;
  return push_(std::move(n));
}

NodeId Graph::relu(NodeId a) { return push_(make(Op::kRelu, {a})); }
NodeId Graph::step_mask(NodeId a) { return push_(make(Op::kStepMask, {a})); }
NodeId Graph::tanh_(NodeId a) { return push_(make(Op::kTanh, {a})); }
NodeId Graph::log_(NodeId a) { return push_(make(Op::kLog, {a})); }
NodeId Graph::exp_(NodeId a) { return push_(make(Op::kExp, {a})); }
NodeId Graph::recip(NodeId a) { return push_(make(Op::kRecip, {a})); }
NodeId Graph::rsqrt(NodeId a) { return push_(make(Op::kRsqrt, {a})); }
NodeId Graph::detach(NodeId a) { return push_(make(Op::kDetach, {a})); }

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& va = node(a).value;
  const Tensor& vb = node(b).value;
  require(va.rank() == 2 && vb.rank() == 2, "matmul: both operands must be matrices");
  require(va.cols() == vb.rows(), "matmul: inner dimension mismatch " + va.shape_str() + " x " +
                                      vb.shape_str());
  return push_(make(Op::kMatmul, {a, b}));
}

NodeId Graph::transpose(NodeId a) {
  require(node(a).value.rank() == 2, "transpose: matrix expected");
  return push_(make(Op::kTranspose, {a}));
}

NodeId Graph::softmax(NodeId a) {
  require(node(a).value.rank() >= 1, "softmax: vector or matrix expected");
  return push_(make(Op::kSoftmax, {a}));
}

NodeId Graph::log_softmax(NodeId a) {
  require(node(a).value.rank() >= 1, "log_softmax: vector or matrix expected");
  return push_(make(Op::kLogSoftmax, {a}));
}

NodeId Graph::sum(NodeId a) { return push_(make(Op::kSum, {a})); }

NodeId Graph::row_sum(NodeId a) {
  require(node(a).value.rank() == 2, "row_sum: matrix expected");
  return push_(make(Op::kRowSum, {a}));
}

NodeId Graph::col_sum(NodeId a) {
  require(node(a).value.rank() == 2, "col_sum: matrix expected");
  return push_(make(Op::kColSum, {a}));
}

NodeId Graph::bcast_scalar(NodeId a, std::vector<std::size_t> shape) {
  require(node(a).value.size() == 1, "bcast_scalar: scalar expected");
  Node n = make(Op::kBcastScalar, {a});
  n.shape_arg = std::move(shape);
  return push_(std::move(n));
}

NodeId Graph::col_bcast(NodeId a, std::size_t cols) {
  require(node(a).value.rank() == 1, "col_bcast: vector expected");
  Node n = make(Op::kColBcast, {a});
  n.shape_arg = {cols};
  return push_(std::move(n));
}

NodeId Graph::row_bcast(NodeId a, std::size_t rows) {
  require(node(a).value.rank() == 1, "row_bcast: vector expected");
  Node n = make(Op::kRowBcast, {a});
  n.shape_arg = {rows};
  return push_(std::move(n));
}

NodeId Graph::reshape(NodeId a, std::vector<std::size_t> shape) {
  std::size_t cnt = 1;
  for (auto s : shape) cnt *= s;
  require(cnt == node(a).value.size(), "reshape: element count mismatch");
  Node n = make(Op::kReshape, {a});
  n.shape_arg = std::move(shape);
  return push_(std::move(n));
}

NodeId Graph::index_select(NodeId a, std::vector<std::int32_t> idx) {
  const Tensor& v = node(a).value;
  require(v.rank() >= 1, "index_select: vector or matrix expected");
  for (auto i : idx) {
    require(i >= 0 && static_cast<std::size_t>(i) < v.rows(),
            "index_select: index out of range");
  }
  Node n = make(Op::kIndexSelect, {a});
  n.indices = std::move(idx);
  return push_(std::move(n));
}

NodeId Graph::embedding_lookup(NodeId table, std::vector<std::int32_t> ids) {
  const Tensor& v = node(table).value;
  require(v.rank() == 2, "embedding_lookup: table must be a matrix");
  for (auto i : ids) {
    require(i >= 0 && static_cast<std::size_t>(i) < v.rows(),
            "embedding_lookup: id out of range");
  }
  Node n = make(Op::kEmbeddingLookup, {table});
  n.indices = std::move(ids);
  return push_(std::move(n));
}

NodeId Graph::scatter_rows(NodeId a, std::vector<std::int32_t> idx, std::size_t rows) {
  const Tensor& v = node(a).value;
  require(v.rank() >= 1, "scatter_rows: vector or matrix expected");
  require(idx.size() == v.rows(), "scatter_rows: one index per source row expected");
  for (auto i : idx) {
    require(i >= 0 && static_cast<std::size_t>(i) < rows, "scatter_rows: index out of range");
  }
  Node n = make(Op::kScatterRows, {a});
  n.indices = std::move(idx);
  n.shape_arg = {rows};
  return push_(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
  const Tensor& va = node(a).value;
  const Tensor& vb = node(b).value;
  require(va.rank() == vb.rank() && va.rank() >= 1, "concat_rows: rank mismatch");
  if (va.rank() == 2) {
    require(va.cols() == vb.cols(), "concat_rows: column count mismatch");
  }
  return push_(make(Op::kConcatRows, {a, b}));
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

void Graph::compute_(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  auto in = [&](std::size_t k) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.inputs[k])].value;
  };

  switch (n.op) {
    case Op::kInput:
    case Op::kConst:
    case Op::kParam:
      break;

    case Op::kAdd: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      n.value = a;
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] += b[i];
      break;
    }
    case Op::kAddConst: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += n.scalar;
      break;
    }
    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      n.value = a;
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] *= b[i];
      break;
    }
    case Op::kScale: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= n.scalar;
      break;
    }
    case Op::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
      n.value = Tensor::zeros({r, c});
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          const double av = a.at(i, t);
          if (av == 0.0) continue;
          const double* brow = &b.raw()[t * c];
          double* orow = &n.value.raw()[i * c];
          for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
      }
      break;
    }
    case Op::kTranspose: {
      const Tensor& a = in(0);
      n.value = Tensor::zeros({a.cols(), a.rows()});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) n.value.at(j, i) = a.at(i, j);
      break;
    }
    case Op::kRelu: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::max(0.0, n.value[i]);
      break;
    }
    case Op::kStepMask: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = n.value[i] > 0.0 ? 1.0 : 0.0;
      break;
    }
    case Op::kTanh: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(n.value[i]);
      break;
    }
    case Op::kLog: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::log(n.value[i]);
      break;
    }
    case Op::kExp: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::exp(n.value[i]);
      break;
    }
    case Op::kRecip: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = 1.0 / n.value[i];
      break;
    }
    case Op::kRsqrt: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = 1.0 / std::sqrt(n.value[i]);
      break;
    }
    case Op::kSoftmax: {
      const Tensor& a = in(0);
      n.value = a;
      if (a.rank() == 1) {
        softmax_row(a.raw().data(), n.value.raw().data(), a.size());
      } else {
        for (std::size_t i = 0; i < a.rows(); ++i)
          softmax_row(&a.raw()[i * a.cols()], &n.value.raw()[i * a.cols()], a.cols());
      }
      break;
    }
    case Op::kLogSoftmax: {
      const Tensor& a = in(0);
      n.value = a;
      if (a.rank() == 1) {
        log_softmax_row(a.raw().data(), n.value.raw().data(), a.size());
      } else {
        for (std::size_t i = 0; i < a.rows(); ++i)
          log_softmax_row(&a.raw()[i * a.cols()], &n.value.raw()[i * a.cols()], a.cols());
      }
      break;
    }
    case Op::kSum: {
      double s = 0.0;
      for (double v : in(0).raw()) s += v;
      n.value = Tensor::scalar(s);
      break;
    }
    case Op::kRowSum: {
      const Tensor& a = in(0);
      n.value = Tensor::zeros({a.rows()});
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a.at(i, j);
        n.value[i] = s;
      }
      break;
    }
    case Op::kColSum: {
      const Tensor& a = in(0);
      n.value = Tensor::zeros({a.cols()});
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) n.value[j] += a.at(i, j);
      break;
    }
    case Op::kBcastScalar: {
      n.value = Tensor::full(n.shape_arg, in(0)[0]);
      break;
    }
    case Op::kColBcast: {
      const Tensor& a = in(0);
      const std::size_t m = n.shape_arg[0];
      n.value = Tensor::zeros({a.size(), m});
      for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < m; ++j) n.value.at(i, j) = a[i];
      break;
    }
    case Op::kRowBcast: {
      const Tensor& a = in(0);
      const std::size_t r = n.shape_arg[0];
      n.value = Tensor::zeros({r, a.size()});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < a.size(); ++j) n.value.at(i, j) = a[j];
      break;
    }
    case Op::kReshape: {
      n.value = Tensor::zeros(n.shape_arg);
      n.value.raw() = in(0).raw();
      break;
    }
    case Op::kIndexSelect:
    case Op::kEmbeddingLookup: {
      const Tensor& a = in(0);
      if (a.rank() == 1) {
        n.value = Tensor::zeros({n.indices.size()});
        for (std::size_t i = 0; i < n.indices.size(); ++i)
          n.value[i] = a[static_cast<std::size_t>(n.indices[i])];
      } else {
        n.value = Tensor::zeros({n.indices.size(), a.cols()});
        for (std::size_t i = 0; i < n.indices.size(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j)
            n.value.at(i, j) = a.at(static_cast<std::size_t>(n.indices[i]), j);
      }
      break;
    }
    case Op::kScatterRows: {
      const Tensor& a = in(0);
      const std::size_t rows = n.shape_arg[0];
      if (a.rank() == 1) {
        n.value = Tensor::zeros({rows});
        for (std::size_t i = 0; i < n.indices.size(); ++i)
          n.value[static_cast<std::size_t>(n.indices[i])] += a[i];
      } else {
        n.value = Tensor::zeros({rows, a.cols()});
        for (std::size_t i = 0; i < n.indices.size(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j)
            n.value.at(static_cast<std::size_t>(n.indices[i]), j) += a.at(i, j);
      }
      break;
    }
    case Op::kConcatRows: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() == 1) {
        n.value = Tensor::zeros({a.size() + b.size()});
        std::copy(a.raw().begin(), a.raw().end(), n.value.raw().begin());
        std::copy(b.raw().begin(), b.raw().end(), n.value.raw().begin() + a.raw().size());
      } else {
        n.value = Tensor::zeros({a.rows() + b.rows(), a.cols()});
        std::copy(a.raw().begin(), a.raw().end(), n.value.raw().begin());
        std::copy(b.raw().begin(), b.raw().end(), n.value.raw().begin() + a.raw().size());
      }
      break;
    }
    case Op::kDetach: {
      n.value = in(0);
      break;
    }
  }
  n.has_value = true;
  check_finite_(id);
}

void Graph::check_finite_(NodeId id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.value.all_finite()) {
    throw NumericError("non-finite value in " + describe(n.op, id));
  }
}

const Tensor& Graph::value(NodeId id) const {
  const Node& n = node(id);
  if (!n.has_value) fail("value: " + describe(n.op, id) + " has no value (unbound input?)");
  return n.value;
}

double Graph::scalar_value(NodeId id) const {
  const Tensor& v = value(id);
  require(v.size() == 1, "scalar_value: node is not scalar");
  return v[0];
}

const Tensor& Graph::grad_slot(NodeId id) const {
  const Node& n = node(id);
  if (!n.has_grad) fail("grad_slot: " + describe(n.op, id) + " has no gradient");
  return n.grad;
}

Tensor Graph::eval(NodeId output, const std::map<std::string, Tensor>& bindings) {
  require(output >= 0 && static_cast<std::size_t>(output) < nodes_.size(),
          "eval: output id out of range");
  for (auto& n : nodes_) {
    if (n.op != Op::kInput) continue;
    auto it = bindings.find(n.name);
    if (it != bindings.end()) {
      require(it->second.shape() == n.shape_arg,
              "eval: shape mismatch for input '" + n.name + "'");
      n.value = it->second;
      n.has_value = true;
    }
    if (!n.has_value) fail("eval: unbound input '" + n.name + "'");
  }
  for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
    const Op op = nodes_[static_cast<std::size_t>(id)].op;
    if (op == Op::kInput || op == Op::kConst || op == Op::kParam) continue;
    compute_(id);
  }
  return value(output);
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

void Graph::backward_one_(NodeId id, NodeId g, std::vector<NodeId>& adjoint) {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  auto accumulate = [&](NodeId in, NodeId contrib) {
    if (adjoint[static_cast<std::size_t>(in)] == kNoNode) {
      adjoint[static_cast<std::size_t>(in)] = contrib;
    } else {
      adjoint[static_cast<std::size_t>(in)] = add(adjoint[static_cast<std::size_t>(in)], contrib);
    }
  };

  // local copies: `nodes_` may reallocate while we append gradient nodes
  const auto inputs = n.inputs;
  const auto indices = n.indices;
  const double sc = n.scalar;
  const Op op = n.op;
  const std::vector<std::size_t> in0_shape =
      inputs.empty() ? std::vector<std::size_t>{} : node(inputs[0]).value.shape();

  switch (op) {
    case Op::kInput:
    case Op::kConst:
    case Op::kParam:
    case Op::kStepMask:
    case Op::kDetach:
      break;  // leaves and stop-gradient ops: no flow

    case Op::kAdd:
      accumulate(inputs[0], g);
      accumulate(inputs[1], g);
      break;
    case Op::kAddConst:
      accumulate(inputs[0], g);
      break;
    case Op::kMul:
      accumulate(inputs[0], mul(g, inputs[1]));
      accumulate(inputs[1], mul(g, inputs[0]));
      break;
    case Op::kScale:
      accumulate(inputs[0], scale(g, sc));
      break;
    case Op::kMatmul:
      accumulate(inputs[0], matmul(g, transpose(inputs[1])));
      accumulate(inputs[1], matmul(transpose(inputs[0]), g));
      break;
    case Op::kTranspose:
      accumulate(inputs[0], transpose(g));
      break;
    case Op::kRelu:
      accumulate(inputs[0], mul(g, step_mask(inputs[0])));
      break;
    case Op::kTanh: {
      // g * (1 - y^2)
      const NodeId y = id;
      accumulate(inputs[0], mul(g, add_const(scale(mul(y, y), -1.0), 1.0)));
      break;
    }
    case Op::kLog:
      accumulate(inputs[0], mul(g, recip(inputs[0])));
      break;
    case Op::kExp:
      accumulate(inputs[0], mul(g, id));
      break;
    case Op::kRecip: {
      const NodeId y = id;
      accumulate(inputs[0], scale(mul(g, mul(y, y)), -1.0));
      break;
    }
    case Op::kRsqrt: {
      // d/dx x^(-1/2) = -1/2 x^(-3/2) = -1/2 y^3
      const NodeId y = id;
      accumulate(inputs[0], scale(mul(g, mul(mul(y, y), y)), -0.5));
      break;
    }
    case Op::kSoftmax: {
      const NodeId y = id;
      const std::size_t yrank = node(id).value.rank();
      const std::size_t ycols = node(id).value.cols();
      const std::size_t ysize = node(id).value.size();
      const NodeId t = mul(g, y);
      NodeId inner;
      if (yrank == 1) {
        inner = sub(*this, g, bcast_scalar(sum(t), {ysize}));
      } else {
        inner = sub(*this, g, col_bcast(row_sum(t), ycols));
      }
      accumulate(inputs[0], mul(y, inner));
      break;
    }
    case Op::kLogSoftmax: {
      // dx = g - softmax(x) * total(g), row-wise
      const std::size_t yrank = node(id).value.rank();
      const std::size_t ycols = node(id).value.cols();
      const std::size_t ysize = node(id).value.size();
      const NodeId p = exp_(id);
      NodeId corr;
      if (yrank == 1) {
        corr = mul(p, bcast_scalar(sum(g), {ysize}));
      } else {
        corr = mul(p, col_bcast(row_sum(g), ycols));
      }
      accumulate(inputs[0], sub(*this, g, corr));
      break;
    }
    case Op::kSum:
      accumulate(inputs[0], bcast_scalar(g, in0_shape));
      break;
    case Op::kRowSum:
      accumulate(inputs[0], col_bcast(g, in0_shape[1]));
      break;
    case Op::kColSum:
      accumulate(inputs[0], row_bcast(g, in0_shape[0]));
      break;
    case Op::kBcastScalar:
      accumulate(inputs[0], reshape(sum(g), in0_shape));
      break;
    case Op::kColBcast:
      accumulate(inputs[0], row_sum(g));
      break;
    case Op::kRowBcast:
      accumulate(inputs[0], col_sum(g));
      break;
    case Op::kReshape:
      accumulate(inputs[0], reshape(g, in0_shape));
      break;
    case Op::kIndexSelect:
    case Op::kEmbeddingLookup:
      accumulate(inputs[0], scatter_rows(g, indices, in0_shape[0]));
      break;
    case Op::kScatterRows:
      accumulate(inputs[0], index_select(g, indices));
      break;
    case Op::kConcatRows: {
      const std::size_t ra = node(inputs[0]).value.rows();
      const std::size_t rb = node(inputs[1]).value.rows();
      std::vector<std::int32_t> ia(ra), ib(rb);
      for (std::size_t i = 0; i < ra; ++i) ia[i] = static_cast<std::int32_t>(i);
      for (std::size_t i = 0; i < rb; ++i) ib[i] = static_cast<std::int32_t>(ra + i);
      accumulate(inputs[0], index_select(g, ia));
      accumulate(inputs[1], index_select(g, ib));
      break;
    }
  }
}

std::vector<NodeId> Graph::grad(NodeId output, std::span<const NodeId> wrt,
                                bool allow_intermediate) {
  require(output >= 0 && static_cast<std::size_t>(output) < nodes_.size(),
          "grad: output id out of range");
  require(value(output).size() == 1, "grad: output must be scalar");
  for (NodeId w : wrt) {
    require(w >= 0 && static_cast<std::size_t>(w) < nodes_.size(), "grad: wrt id out of range");
    require(allow_intermediate || node(w).op == Op::kParam,
            "grad: wrt node not trainable (node " + std::to_string(w) + ", op " +
                op_name(node(w).op) + ")");
  }

  // adjoints only for nodes created before (and incl.) the output
  std::vector<NodeId> adjoint(static_cast<std::size_t>(output) + 1, kNoNode);
  adjoint[static_cast<std::size_t>(output)] = constant(Tensor::full(value(output).shape(), 1.0));

  for (NodeId id = output; id >= 0; --id) {
    const NodeId g = adjoint[static_cast<std::size_t>(id)];
    if (g == kNoNode) continue;
    backward_one_(id, g, adjoint);
  }

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    // nodes created after the output cannot influence it
    NodeId gw = w <= output ? adjoint[static_cast<std::size_t>(w)] : kNoNode;
    if (gw == kNoNode) gw = constant(Tensor::zeros(node(w).value.shape()));
    out.push_back(gw);
    Node& wn = nodes_[static_cast<std::size_t>(w)];
    wn.grad = value(gw);
    wn.has_grad = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ParamVector
// ---------------------------------------------------------------------------

std::size_t ParamVector::add_segment(const std::string& name, std::vector<std::size_t> shape) {
  if (find(name)) throw GraphError("ParamVector: duplicate segment '" + name + "'");
  ParamSegment seg;
  seg.name = name;
  seg.shape = std::move(shape);
  seg.count = 1;
  for (auto s : seg.shape) seg.count *= s;
  seg.offset = data_.size();
  data_.resize(data_.size() + seg.count, 0.0);
  segments_.push_back(std::move(seg));
  return segments_.size() - 1;
}

std::optional<std::size_t> ParamVector::find(const std::string& name) const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].name == name) return i;
  }
  return std::nullopt;
}

std::span<double> ParamVector::segment_data(std::size_t i) {
  const auto& s = segments_.at(i);
  return {data_.data() + s.offset, s.count};
}

std::span<const double> ParamVector::segment_data(std::size_t i) const {
  const auto& s = segments_.at(i);
  return {data_.data() + s.offset, s.count};
}

Tensor ParamVector::unpack(std::size_t i) const {
  const auto& s = segments_.at(i);
  Tensor t = Tensor::zeros(s.shape);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(s.offset),
            data_.begin() + static_cast<std::ptrdiff_t>(s.offset + s.count), t.raw().begin());
  return t;
}

void ParamVector::pack(std::size_t i, const Tensor& t) {
  const auto& s = segments_.at(i);
  if (t.shape() != s.shape) {
    throw GraphError("ParamVector::pack: shape mismatch for segment '" + s.name + "'");
  }
  std::copy(t.raw().begin(), t.raw().end(),
            data_.begin() + static_cast<std::ptrdiff_t>(s.offset));
}

std::string ParamVector::fingerprint() const {
  Fnv1a h;
  for (const auto& s : segments_) {
    h.update(s.name);
    for (auto d : s.shape) h.update(static_cast<std::uint64_t>(d));
  }
  h.update(std::span<const double>(data_));
  return h.hex();
}

// ---------------------------------------------------------------------------
// theta-as-nodes helpers
// ---------------------------------------------------------------------------

NodeId ParamNodes::at(const std::string& name) const {
  if (!layout) throw GraphError("ParamNodes: no layout");
  auto i = layout->find(name);
  if (!i) throw GraphError("ParamNodes: unknown segment '" + name + "'");
  return ids.at(*i);
}

ParamNodes make_param_nodes(Graph& g, const ParamVector& pv) {
  ParamNodes out;
  out.layout = &pv;
  out.ids.reserve(pv.segment_count());
  for (std::size_t i = 0; i < pv.segment_count(); ++i) {
    out.ids.push_back(g.param(pv.unpack(i)));
  }
  return out;
}

ParamNodes sgd_step(Graph& g, const ParamNodes& theta, std::span<const NodeId> grads,
                    double alpha) {
  if (grads.size() != theta.ids.size()) {
    throw GraphError("sgd_step: gradient count does not match parameter segments");
  }
  ParamNodes out;
  out.layout = theta.layout;
  out.ids.reserve(theta.ids.size());
  for (std::size_t i = 0; i < theta.ids.size(); ++i) {
    out.ids.push_back(g.add(theta.ids[i], g.scale(grads[i], -alpha)));
  }
  return out;
}

void read_params(const Graph& g, const ParamNodes& nodes, ParamVector& out) {
  if (nodes.ids.size() != out.segment_count()) {
    throw GraphError("read_params: segment count mismatch");
  }
  for (std::size_t i = 0; i < nodes.ids.size(); ++i) {
    out.pack(i, g.value(nodes.ids[i]));
  }
}

std::vector<double> flatten_grads(const Graph& g, const ParamVector& layout,
                                  std::span<const NodeId> grads) {
  std::vector<double> flat(layout.size(), 0.0);
  if (grads.size() != layout.segment_count()) {
    throw GraphError("flatten_grads: segment count mismatch");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& seg = layout.segment(i);
    const Tensor& v = g.value(grads[i]);
    if (v.size() != seg.count) throw GraphError("flatten_grads: size mismatch");
    std::copy(v.raw().begin(), v.raw().end(),
              flat.begin() + static_cast<std::ptrdiff_t>(seg.offset));
  }
  return flat;
}

}  // namespace metacomp::autodiff
