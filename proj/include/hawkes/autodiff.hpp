#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hawkes/core.hpp"

namespace hawkes::ad {

// ---------------------------------------------------------------------------
// Named parameter tensors with immutable shapes. The flat view (entries in
// registration order) is what the optimizer and checkpoint code iterate.

class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
  };

  std::size_t add(std::string name, std::vector<std::size_t> shape,
                  std::vector<double> values) {
    if (index_.count(name)) throw ValidationError("ParamStore: duplicate name '" + name + "'");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (n != values.size())
      throw ValidationError("ParamStore: shape/value mismatch for '" + name + "'");
    for (double v : values)
      if (!std::isfinite(v))
        throw ValidationError("ParamStore: non-finite value in '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(shape), std::move(values)});
    return entries_.size() - 1;
  }

  std::size_t add(std::string name, std::vector<std::size_t> shape, double fill = 0.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return add(std::move(name), std::move(shape), std::vector<double>(n, fill));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("ParamStore: unknown name '" + name + "'");
    return it->second;
  }

  Entry& at(const std::string& name) { return entries_[index_of(name)]; }
  const Entry& at(const std::string& name) const { return entries_[index_of(name)]; }
  Entry& at(std::size_t i) { return entries_[i]; }
  const Entry& at(std::size_t i) const { return entries_[i]; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.size();
    return n;
  }

  ParamStore zeros_like() const {
    ParamStore out;
    for (const auto& e : entries_)
      out.add(e.name, e.shape, std::vector<double>(e.size(), 0.0));
    return out;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      for (double v : e.values)
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape over 1-D double buffers. Graphs are rebuilt per forward
// pass (define-by-run); reset() keeps arena capacity so the per-batch rebuild
// does not allocate. Double precision throughout.

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddConst,
  Abs,
  Exp,
  Log,
  Sigmoid,
  Softplus,
  Gelu,
  ClampMin,
  Sum,
  Dot,
  MatVec,
  MatVecT,
  Row,
  Col,
  Pick,
  Concat,
  MaskedSoftmax,
  WeightedSum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::Abs: return "abs";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Gelu: return "gelu";
    case Op::ClampMin: return "clamp_min";
    case Op::Sum: return "sum";
    case Op::Dot: return "dot";
    case Op::MatVec: return "matvec";
    case Op::MatVecT: return "matvec_t";
    case Op::Row: return "row";
    case Op::Col: return "col";
    case Op::Pick: return "pick";
    case Op::Concat: return "concat";
    case Op::MaskedSoftmax: return "masked_softmax";
    case Op::WeightedSum: return "weighted_sum";
  }
  return "?";
}

struct Value {
  std::uint32_t idx = UINT32_MAX;
  bool valid() const { return idx != UINT32_MAX; }
};

class Tape {
 public:
  explicit Tape(ParamStore& params) : params_(&params) {}

  // Drops the recorded graph but keeps arena capacity.
  void reset() {
    nodes_.clear();
    vals_.clear();
    idx_arena_.clear();
    mask_arena_.clear();
    leaf_cache_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

  std::span<const double> values(Value v) const {
    const Node& n = nodes_[v.idx];
    return {vals_.data() + n.off, n.len};
  }

  double scalar(Value v) const {
    const Node& n = nodes_[v.idx];
    if (n.len != 1) throw NumericError("Tape::scalar: node is not scalar");
    return vals_[n.off];
  }

  // --- graph construction -------------------------------------------------

  Value leaf(const std::string& name) {
    const std::size_t pi = params_->index_of(name);
    auto it = leaf_cache_.find(pi);
    if (it != leaf_cache_.end()) return {it->second};
    const auto& entry = params_->at(pi);
    Value v = make(Op::Leaf, {}, {}, entry.size(), static_cast<std::uint32_t>(pi));
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < entry.size(); ++i) out[i] = entry.values[i];
    leaf_cache_.emplace(pi, v.idx);
    return v;
  }

  Value constant(std::span<const double> data) {
    Value v = make(Op::Const, {}, {}, data.size());
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = data[i];
    return v;
  }

  Value constant(double x) { return constant(std::span<const double>(&x, 1)); }

  Value zeros(std::size_t n) {
    Value v = make(Op::Const, {}, {}, n);
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
    return v;
  }

  Value add(Value a, Value b) { return binary_ew(Op::Add, a, b); }
  Value sub(Value a, Value b) { return binary_ew(Op::Sub, a, b); }
  Value mul(Value a, Value b) { return binary_ew(Op::Mul, a, b); }
  Value div(Value a, Value b) { return binary_ew(Op::Div, a, b); }

  Value neg(Value a) { return unary(Op::Neg, a); }
  Value abs(Value a) { return unary(Op::Abs, a); }
  Value exp(Value a) { return unary(Op::Exp, a); }
  Value log(Value a) { return unary(Op::Log, a); }
  Value sigmoid(Value a) { return unary(Op::Sigmoid, a); }
  Value softplus(Value a) { return unary(Op::Softplus, a); }
  Value gelu(Value a) { return unary(Op::Gelu, a); }

  Value scale(Value a, double c) { return unary_c(Op::Scale, a, c); }
  Value add_const(Value a, double c) { return unary_c(Op::AddConst, a, c); }
  Value clamp_min(Value a, double c) { return unary_c(Op::ClampMin, a, c); }

  Value sum(Value a) {
    Value v = make(Op::Sum, a, {}, 1);
    const auto in = values(a);
    double s = 0.0;
    for (double x : in) s += x;
    *out_ptr(v) = s;
    return v;
  }

  Value dot(Value a, Value b) {
    require_same_len(a, b, "dot");
    Value v = make(Op::Dot, a, b, 1);
    const auto xa = values(a);
    const auto xb = values(b);
    double s = 0.0;
    for (std::size_t i = 0; i < xa.size(); ++i) s += xa[i] * xb[i];
    *out_ptr(v) = s;
    return v;
  }

  // y = W x with W row-major [rows x cols]; rows inferred from buffer sizes.
  Value matvec(Value w, Value x) {
    const std::size_t cols = len(x);
    const std::size_t total = len(w);
    if (cols == 0 || total % cols != 0)
      throw NumericError("Tape::matvec: incompatible sizes");
    const std::size_t rows = total / cols;
    Value v = make(Op::MatVec, w, x, rows);
    const auto wv = values(w);
    const auto xv = values(x);
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      const double* wrow = wv.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) s += wrow[j] * xv[j];
      out[i] = s;
    }
    return v;
  }

  // y = W^T x with W row-major [rows x cols]; output length cols.
  Value matvec_t(Value w, Value x) {
    const std::size_t rows = len(x);
    const std::size_t total = len(w);
    if (rows == 0 || total % rows != 0)
      throw NumericError("Tape::matvec_t: incompatible sizes");
    const std::size_t cols = total / rows;
    Value v = make(Op::MatVecT, w, x, cols);
    const auto wv = values(w);
    const auto xv = values(x);
    double* out = out_ptr(v);
    for (std::size_t j = 0; j < cols; ++j) out[j] = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double* wrow = wv.data() + i * cols;
      const double xi = xv[i];
      for (std::size_t j = 0; j < cols; ++j) out[j] += wrow[j] * xi;
    }
    return v;
  }

  Value row(Value w, std::size_t i, std::size_t cols) {
    if (cols == 0 || len(w) % cols != 0 || (i + 1) * cols > len(w))
      throw NumericError("Tape::row: index/shape mismatch");
    Value v = make(Op::Row, w, {}, cols, static_cast<std::uint32_t>(i));
    const auto wv = values(w);
    double* out = out_ptr(v);
    for (std::size_t j = 0; j < cols; ++j) out[j] = wv[i * cols + j];
    return v;
  }

  Value col(Value w, std::size_t j, std::size_t cols) {
    if (cols == 0 || len(w) % cols != 0 || j >= cols)
      throw NumericError("Tape::col: index/shape mismatch");
    const std::size_t rows = len(w) / cols;
    Value v = make(Op::Col, w, {}, rows, static_cast<std::uint32_t>(j));
    const auto wv = values(w);
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < rows; ++i) out[i] = wv[i * cols + j];
    return v;
  }

  Value pick(Value a, std::size_t i) {
    if (i >= len(a)) throw NumericError("Tape::pick: index out of range");
    Value v = make(Op::Pick, a, {}, 1, static_cast<std::uint32_t>(i));
    *out_ptr(v) = values(a)[i];
    return v;
  }

  Value concat(Value a, Value b) {
    Value v = make(Op::Concat, a, b, len(a) + len(b));
    const auto xa = values(a);
    const auto xb = values(b);
    double* out = out_ptr(v);
    for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i];
    for (std::size_t i = 0; i < xb.size(); ++i) out[xa.size() + i] = xb[i];
    return v;
  }

  // Softmax over the masked-in entries, log-sum-exp stabilized; masked-out
  // entries are exactly zero. An all-masked row yields all zeros.
  Value masked_softmax(Value logits, std::span<const std::uint8_t> mask) {
    if (mask.size() != len(logits))
      throw NumericError("Tape::masked_softmax: mask length mismatch");
    const auto aux = static_cast<std::uint32_t>(mask_arena_.size());
    mask_arena_.insert(mask_arena_.end(), mask.begin(), mask.end());
    Value v = make(Op::MaskedSoftmax, logits, {}, mask.size(), aux);
    const auto lv = values(logits);
    double* out = out_ptr(v);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < lv.size(); ++i)
      if (mask[i] && lv[i] > m) m = lv[i];
    if (!std::isfinite(m)) {
      for (std::size_t i = 0; i < lv.size(); ++i) out[i] = 0.0;
      return v;
    }
    double z = 0.0;
    for (std::size_t i = 0; i < lv.size(); ++i) {
      out[i] = mask[i] ? std::exp(lv[i] - m) : 0.0;
      z += out[i];
    }
    for (std::size_t i = 0; i < lv.size(); ++i) out[i] /= z;
    return v;
  }

  // out = sum_j weights[j] * vs[j]; all vs share one length.
  Value weighted_sum(Value weights, std::span<const Value> vs) {
    if (vs.size() != len(weights))
      throw NumericError("Tape::weighted_sum: weight/vector count mismatch");
    if (vs.empty()) throw NumericError("Tape::weighted_sum: empty input");
    const std::size_t dim = len(vs[0]);
    const auto aux = static_cast<std::uint32_t>(idx_arena_.size());
    for (Value v : vs) {
      if (len(v) != dim) throw NumericError("Tape::weighted_sum: ragged vectors");
      idx_arena_.push_back(v.idx);
    }
    Value v = make(Op::WeightedSum, weights, {}, dim, aux);
    const auto wv = values(weights);
    double* out = out_ptr(v);
    for (std::size_t d = 0; d < dim; ++d) out[d] = 0.0;
    for (std::size_t j = 0; j < vs.size(); ++j) {
      const auto xv = values(vs[j]);
      const double wj = wv[j];
      for (std::size_t d = 0; d < dim; ++d) out[d] += wj * xv[d];
    }
    return v;
  }

  // --- reverse sweep -------------------------------------------------------

  // Accumulates d(loss)/d(param) into grads (shaped like the attached store;
  // parameters never touched by the graph keep zero gradient).
  void backward(Value loss, ParamStore& grads) {
    const Node& ln = nodes_[loss.idx];
    if (ln.len != 1) throw NumericError("Tape::backward: loss must be scalar");
    if (!std::isfinite(vals_[ln.off]))
      throw NumericError("Tape::backward: loss value is not finite");

    adj_.assign(vals_.size(), 0.0);
    adj_[ln.off] = 1.0;

    for (std::uint32_t idx = loss.idx + 1; idx-- > 0;) {
      const Node& n = nodes_[idx];
      const double* g = adj_.data() + n.off;
      bool any = false;
      for (std::size_t i = 0; i < n.len; ++i) {
        if (!std::isfinite(g[i]))
          throw NumericError(std::string("Tape::backward: non-finite adjoint at node #") +
                             std::to_string(idx) + " (" + op_name(n.op) + ")");
        if (g[i] != 0.0) any = true;
      }
      if (!any) continue;
      propagate(idx, n);
    }

    for (std::uint32_t idx = 0; idx <= loss.idx; ++idx) {
      const Node& n = nodes_[idx];
      if (n.op != Op::Leaf) continue;
      auto& entry = grads.at(params_->at(n.aux).name);
      const double* g = adj_.data() + n.off;
      for (std::size_t i = 0; i < n.len; ++i) entry.values[i] += g[i];
    }
  }

  ParamStore backward(Value loss) {
    ParamStore grads = params_->zeros_like();
    backward(loss, grads);
    return grads;
  }

 private:
  struct Node {
    Op op;
    std::uint32_t in0 = UINT32_MAX;
    std::uint32_t in1 = UINT32_MAX;
    std::uint32_t off = 0;
    std::uint32_t len = 0;
    std::uint32_t aux = 0;
    double c = 0.0;
  };

  std::size_t len(Value v) const { return nodes_[v.idx].len; }

  double* out_ptr(Value v) { return vals_.data() + nodes_[v.idx].off; }

  void require_same_len(Value a, Value b, const char* what) const {
    if (len(a) != len(b))
      throw NumericError(std::string("Tape::") + what + ": length mismatch");
  }

  Value make(Op op, Value in0, Value in1, std::size_t n, std::uint32_t aux = 0,
             double c = 0.0) {
    Node node;
    node.op = op;
    node.in0 = in0.idx;
    node.in1 = in1.idx;
    node.off = static_cast<std::uint32_t>(vals_.size());
    node.len = static_cast<std::uint32_t>(n);
    node.aux = aux;
    node.c = c;
    vals_.resize(vals_.size() + n);
    nodes_.push_back(node);
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Value binary_ew(Op op, Value a, Value b) {
    require_same_len(a, b, op_name(op));
    Value v = make(op, a, b, len(a));
    const auto xa = values(a);
    const auto xb = values(b);
    double* out = out_ptr(v);
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] + xb[i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] - xb[i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] * xb[i];
        break;
      case Op::Div:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] / xb[i];
        break;
      default:
        throw NumericError("Tape: bad binary op");
    }
    return v;
  }

  Value unary(Op op, Value a) {
    Value v = make(op, a, {}, len(a));
    const auto xa = values(a);
    double* out = out_ptr(v);
    switch (op) {
      case Op::Neg:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = -xa[i];
        break;
      case Op::Abs:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = std::abs(xa[i]);
        break;
      case Op::Exp:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = std::exp(xa[i]);
        break;
      case Op::Log:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = std::log(xa[i]);
        break;
      case Op::Sigmoid:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = hawkes::sigmoid(xa[i]);
        break;
      case Op::Softplus:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = hawkes::softplus(xa[i]);
        break;
      case Op::Gelu:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = hawkes::gelu(xa[i]);
        break;
      default:
        throw NumericError("Tape: bad unary op");
    }
    return v;
  }

  Value unary_c(Op op, Value a, double c) {
    Value v = make(op, a, {}, len(a), 0, c);
    const auto xa = values(a);
    double* out = out_ptr(v);
    switch (op) {
      case Op::Scale:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = c * xa[i];
        break;
      case Op::AddConst:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] + c;
        break;
      case Op::ClampMin:
        for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] > c ? xa[i] : c;
        break;
      default:
        throw NumericError("Tape: bad unary_c op");
    }
    return v;
  }

  void propagate(std::uint32_t idx, const Node& n) {
    const double* g = adj_.data() + n.off;
    const double* y = vals_.data() + n.off;
    auto in_vals = [&](std::uint32_t i) { return vals_.data() + nodes_[i].off; };
    auto in_adj = [&](std::uint32_t i) { return adj_.data() + nodes_[i].off; };

    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::Add: {
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        for (std::size_t i = 0; i < n.len; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::Sub: {
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        for (std::size_t i = 0; i < n.len; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        const double* a = in_vals(n.in0);
        const double* b = in_vals(n.in1);
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        for (std::size_t i = 0; i < n.len; ++i) {
          ga[i] += g[i] * b[i];
          gb[i] += g[i] * a[i];
        }
        break;
      }
      case Op::Div: {
        const double* a = in_vals(n.in0);
        const double* b = in_vals(n.in1);
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        for (std::size_t i = 0; i < n.len; ++i) {
          ga[i] += g[i] / b[i];
          gb[i] -= g[i] * a[i] / (b[i] * b[i]);
        }
        break;
      }
      case Op::Neg: {
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] -= g[i];
        break;
      }
      case Op::Scale: {
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += n.c * g[i];
        break;
      }
      case Op::AddConst: {
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i];
        break;
      }
      case Op::Abs: {
        const double* a = in_vals(n.in0);
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i)
          ga[i] += a[i] > 0.0 ? g[i] : (a[i] < 0.0 ? -g[i] : 0.0);
        break;
      }
      case Op::Exp: {
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i] * y[i];
        break;
      }
      case Op::Log: {
        const double* a = in_vals(n.in0);
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i] / a[i];
        break;
      }
      case Op::Sigmoid: {
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::Softplus: {
        const double* a = in_vals(n.in0);
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i] * hawkes::sigmoid(a[i]);
        break;
      }
      case Op::Gelu: {
        const double* a = in_vals(n.in0);
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i) ga[i] += g[i] * hawkes::gelu_grad(a[i]);
        break;
      }
      case Op::ClampMin: {
        const double* a = in_vals(n.in0);
        double* ga = in_adj(n.in0);
        for (std::size_t i = 0; i < n.len; ++i)
          if (a[i] > n.c) ga[i] += g[i];
        break;
      }
      case Op::Sum: {
        double* ga = in_adj(n.in0);
        const double g0 = g[0];
        for (std::size_t i = 0; i < nodes_[n.in0].len; ++i) ga[i] += g0;
        break;
      }
      case Op::Dot: {
        const double* a = in_vals(n.in0);
        const double* b = in_vals(n.in1);
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        const double g0 = g[0];
        for (std::size_t i = 0; i < nodes_[n.in0].len; ++i) {
          ga[i] += g0 * b[i];
          gb[i] += g0 * a[i];
        }
        break;
      }
      case Op::MatVec: {
        const std::size_t rows = n.len;
        const std::size_t cols = nodes_[n.in1].len;
        const double* w = in_vals(n.in0);
        const double* x = in_vals(n.in1);
        double* gw = in_adj(n.in0);
        double* gx = in_adj(n.in1);
        for (std::size_t i = 0; i < rows; ++i) {
          const double gi = g[i];
          if (gi == 0.0) continue;
          const double* wrow = w + i * cols;
          double* gwrow = gw + i * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            gwrow[j] += gi * x[j];
            gx[j] += gi * wrow[j];
          }
        }
        break;
      }
      case Op::MatVecT: {
        const std::size_t cols = n.len;
        const std::size_t rows = nodes_[n.in1].len;
        const double* w = in_vals(n.in0);
        const double* x = in_vals(n.in1);
        double* gw = in_adj(n.in0);
        double* gx = in_adj(n.in1);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* wrow = w + i * cols;
          double* gwrow = gw + i * cols;
          const double xi = x[i];
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            gwrow[j] += g[j] * xi;
            acc += g[j] * wrow[j];
          }
          gx[i] += acc;
        }
        break;
      }
      case Op::Row: {
        double* gw = in_adj(n.in0);
        const std::size_t cols = n.len;
        for (std::size_t j = 0; j < cols; ++j) gw[n.aux * cols + j] += g[j];
        break;
      }
      case Op::Col: {
        double* gw = in_adj(n.in0);
        const std::size_t rows = n.len;
        const std::size_t cols = nodes_[n.in0].len / rows;
        for (std::size_t i = 0; i < rows; ++i) gw[i * cols + n.aux] += g[i];
        break;
      }
      case Op::Pick: {
        in_adj(n.in0)[n.aux] += g[0];
        break;
      }
      case Op::Concat: {
        double* ga = in_adj(n.in0);
        double* gb = in_adj(n.in1);
        const std::size_t la = nodes_[n.in0].len;
        for (std::size_t i = 0; i < la; ++i) ga[i] += g[i];
        for (std::size_t i = la; i < n.len; ++i) gb[i - la] += g[i];
        break;
      }
      case Op::MaskedSoftmax: {
        const std::uint8_t* mask = mask_arena_.data() + n.aux;
        double* ga = in_adj(n.in0);
        double s = 0.0;
        for (std::size_t i = 0; i < n.len; ++i)
          if (mask[i]) s += g[i] * y[i];
        for (std::size_t i = 0; i < n.len; ++i)
          if (mask[i]) ga[i] += y[i] * (g[i] - s);
        break;
      }
      case Op::WeightedSum: {
        const std::size_t count = nodes_[n.in0].len;
        const double* w = in_vals(n.in0);
        double* gw = in_adj(n.in0);
        for (std::size_t j = 0; j < count; ++j) {
          const std::uint32_t vi = idx_arena_[n.aux + j];
          const double* xv = in_vals(vi);
          double* gx = in_adj(vi);
          double acc = 0.0;
          const double wj = w[j];
          for (std::size_t d = 0; d < n.len; ++d) {
            acc += g[d] * xv[d];
            gx[d] += wj * g[d];
          }
          gw[j] += acc;
        }
        break;
      }
    }
  }

  ParamStore* params_;
  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> adj_;
  std::vector<std::uint32_t> idx_arena_;
  std::vector<std::uint8_t> mask_arena_;
  std::unordered_map<std::size_t, std::uint32_t> leaf_cache_;
};

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.

using LossBuilder = std::function<Value(Tape&, ParamStore&)>;

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool pass = true;
  std::string worst_param;
  double max_rel_err = 0.0;
};

namespace detail {
inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / scale;
}
}  // namespace detail

// Compares the engine gradient of f with central differences per parameter
// element. engine_grad can be overridden (fault injection, alternate
// implementations); by default the tape's reverse sweep is used.
inline GradCheckReport grad_check(
    const LossBuilder& f, ParamStore& params, double h, double tol,
    const std::function<ParamStore(ParamStore&)>& engine_grad = {}) {
  auto eval = [&](ParamStore& p) {
    Tape tape(p);
    const double v = tape.scalar(f(tape, p));
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
    return v;
  };

  ParamStore grads;
  if (engine_grad) {
    grads = engine_grad(params);
  } else {
    Tape tape(params);
    Value loss = f(tape, params);
    grads = tape.backward(loss);
  }

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t pi = 0; pi < params.count(); ++pi) {
    auto& entry = params.at(pi);
    const auto& gvals = grads.at(entry.name).values;
    GradCheckEntry ce;
    ce.param = entry.name;
    for (std::size_t i = 0; i < entry.size(); ++i) {
      const double saved = entry.values[i];
      entry.values[i] = saved + h;
      const double fp = eval(params);
      entry.values[i] = saved - h;
      const double fm = eval(params);
      entry.values[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double re = detail::rel_err(fd, gvals[i]);
      const double ae = std::abs(fd - gvals[i]);
      if (re > ce.max_rel_err) {
        ce.max_rel_err = re;
        ce.worst_index = i;
      }
      ce.max_abs_err = std::max(ce.max_abs_err, ae);
    }
    if (ce.max_rel_err > report.max_rel_err) {
      report.max_rel_err = ce.max_rel_err;
      report.worst_param = ce.param;
    }
    if (ce.max_rel_err > tol) report.pass = false;
    report.entries.push_back(std::move(ce));
  }
  return report;
}

}  // namespace hawkes::ad
