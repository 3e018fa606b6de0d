#include "enclab/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "enclab/errors.hpp"
#include "enclab/rng.hpp"

namespace enclab {

using EigenMat =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& s, const char* op) {
  if (s.empty()) throw ContractError(std::string(op) + ": empty shape");
  for (Index e : s) {
    if (e <= 0)
      throw ContractError(std::string(op) + ": nonpositive extent in shape " +
                          shape_str(s));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

thread_local bool g_grad_enabled = true;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape, "zeros");
  Tensor t;
  t.shape_ = std::move(shape);
  t.store_ = std::make_shared<Storage>();
  t.store_->data.assign(static_cast<std::size_t>(shape_numel(t.shape_)), 0.0);
  t.requires_grad_ = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.store_->data.begin(), t.store_->data.end(), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<Scalar> values,
                           bool requires_grad) {
  check_shape(shape, "from_values");
  if (shape_numel(shape) != static_cast<Index>(values.size()))
    throw ContractError("from_values: " + shape_str(shape) + " needs " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(values.size()));
  Tensor t;
  t.shape_ = std::move(shape);
  t.store_ = std::make_shared<Storage>();
  t.store_->data = std::move(values);
  t.requires_grad_ = requires_grad;
  return t;
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Index Tensor::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw ContractError("dim: axis " + std::to_string(i) +
                        " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

Index Tensor::size() const {
  return store_ ? static_cast<Index>(store_->data.size()) : 0;
}

std::span<Scalar> Tensor::values() & {
  if (!store_) throw ContractError("values: tensor undefined");
  return {store_->data.data(), store_->data.size()};
}

std::span<const Scalar> Tensor::values() const& {
  if (!store_) throw ContractError("values: tensor undefined");
  return {store_->data.data(), store_->data.size()};
}

Scalar Tensor::value() const {
  if (size() != 1)
    throw ContractError("value: tensor " + shape_str(shape_) +
                        " is not scalar");
  return store_->data[0];
}

bool Tensor::has_grad() const { return store_ && !store_->grad.empty(); }

void Tensor::ensure_grad() {
  if (!store_) throw ContractError("ensure_grad: tensor undefined");
  if (store_->grad.empty()) store_->grad.assign(store_->data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (store_ && !store_->grad.empty())
    std::fill(store_->grad.begin(), store_->grad.end(), 0.0);
}

std::span<Scalar> Tensor::grad() & {
  if (!has_grad()) throw ContractError("grad: not allocated");
  return {store_->grad.data(), store_->grad.size()};
}

std::span<const Scalar> Tensor::grad() const& {
  if (!has_grad()) throw ContractError("grad: not allocated");
  return {store_->grad.data(), store_->grad.size()};
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.store_ = store_;
  t.requires_grad_ = false;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  if (store_) {
    t.store_ = std::make_shared<Storage>();
    t.store_->data = store_->data;
  }
  t.requires_grad_ = requires_grad_;
  return t;
}

// ---------------------------------------------------------------------------
// Autograd machinery

void attach_node(
    Tensor& out, std::vector<Tensor> inputs,
    std::function<void(const Tensor&, std::vector<Tensor>&)> backward,
    const char* op) {
  if (!g_grad_enabled) return;
  bool any = false;
  for (const Tensor& in : inputs)
    if (in.requires_grad()) any = true;
  if (!any) return;
  out.set_requires_grad(true);
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->out_view = std::make_shared<Tensor>(out.detach());
  out.node = std::move(node);
}

GradTape build_tape(const Tensor& root) {
  GradTape tape;
  if (!root.node) return tape;
  std::unordered_set<const Node*> seen;
  struct Frame {
    std::shared_ptr<Node> node;
    std::size_t next_input = 0;
  };
  // Iterative post-order DFS; post-order emission is a topological order.
  std::vector<Frame> stack;
  seen.insert(root.node.get());
  stack.push_back({root.node, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      const Tensor& in = f.node->inputs[f.next_input++];
      if (in.node && !seen.count(in.node.get())) {
        seen.insert(in.node.get());
        stack.push_back({in.node, 0});
      }
    } else {
      tape.order.push_back(f.node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: root must be scalar, got " +
                        shape_str(loss.shape()));
  Tensor root = loss;
  root.ensure_grad();
  root.grad()[0] += 1.0;
  if (!root.node) return;

  GradTape tape = build_tape(root);
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    Node* n = it->get();
    // An op whose output received no gradient contributes nothing.
    if (!n->out_view->has_grad()) continue;
    for (Tensor& in : n->inputs)
      if (in.requires_grad()) in.ensure_grad();
    n->backward(*n->out_view, n->inputs);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  attach_node(
      out, {a, b},
      [](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        for (int p = 0; p < 2; ++p) {
          if (!in[p].requires_grad()) continue;
          auto g = in[p].grad();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
        }
      },
      "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  attach_node(
      out, {a, b},
      [](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        if (in[0].requires_grad()) {
          auto g = in[0].grad();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
        }
        if (in[1].requires_grad()) {
          auto g = in[1].grad();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] -= og[i];
        }
      },
      "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  const auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  attach_node(
      out, {a, b},
      [](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        if (in[0].requires_grad()) {
          auto g = in[0].grad();
          const auto bv2 = in[1].values();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * bv2[i];
        }
        if (in[1].requires_grad()) {
          auto g = in[1].grad();
          const auto av2 = in[0].values();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * av2[i];
        }
      },
      "mul");
  return out;
}

Tensor scale(const Tensor& a, Scalar s) {
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  attach_node(
      out, {a},
      [s](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * s;
      },
      "scale");
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.rank() != 1 || v.dim(0) != x.dim(-1))
    throw ContractError("add_rowvec: vector " + shape_str(v.shape()) +
                        " does not match last extent of " +
                        shape_str(x.shape()));
  const Index c = x.dim(-1);
  const Index rows = x.size() / c;
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  const auto vv = v.values();
  auto ov = out.values();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + vv[j];
  attach_node(
      out, {x, v},
      [rows, c](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        if (in[0].requires_grad()) {
          auto g = in[0].grad();
          for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
        }
        if (in[1].requires_grad()) {
          auto g = in[1].grad();
          for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < c; ++j) g[j] += og[r * c + j];
        }
      },
      "add_rowvec");
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ContractError("matmul: incompatible shapes " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    ConstMatMap A(a.values().data(), m, k);
    ConstMatMap B(b.values().data(), k, n);
    MatMap C(out.values().data(), m, n);
    C.noalias() = A * B;
  }
  attach_node(
      out, {a, b},
      [m, k, n](const Tensor& o, std::vector<Tensor>& in) {
        ConstMatMap G(o.grad().data(), m, n);
        if (in[0].requires_grad()) {
          ConstMatMap B(std::as_const(in[1]).values().data(), k, n);
          MatMap GA(in[0].grad().data(), m, k);
          GA.noalias() += G * B.transpose();
        }
        if (in[1].requires_grad()) {
          ConstMatMap A(std::as_const(in[0]).values().data(), m, k);
          MatMap GB(in[1].grad().data(), k, n);
          GB.noalias() += A.transpose() * G;
        }
      },
      "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2)
    throw ContractError("transpose: expected rank 2, got " +
                        shape_str(a.shape()));
  const Index r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  {
    ConstMatMap A(a.values().data(), r, c);
    MatMap T(out.values().data(), c, r);
    T = A.transpose();
  }
  attach_node(
      out, {a},
      [r, c](const Tensor& o, std::vector<Tensor>& in) {
        ConstMatMap G(o.grad().data(), c, r);
        MatMap GA(in[0].grad().data(), r, c);
        GA += G.transpose();
      },
      "transpose");
  return out;
}

Tensor slice_cols(const Tensor& x, Index c0, Index width) {
  const Index c = x.dim(-1);
  if (c0 < 0 || width <= 0 || c0 + width > c)
    throw ContractError("slice_cols: [" + std::to_string(c0) + ", " +
                        std::to_string(c0 + width) + ") out of range for " +
                        shape_str(x.shape()));
  const Index rows = x.size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = width;
  Tensor out = Tensor::zeros(out_shape);
  const auto xv = x.values();
  auto ov = out.values();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < width; ++j) ov[r * width + j] = xv[r * c + c0 + j];
  attach_node(
      out, {x},
      [rows, c, c0, width](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < width; ++j)
            g[r * c + c0 + j] += og[r * width + j];
      },
      "slice_cols");
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  Shape lead = parts[0].shape();
  lead.pop_back();
  Index total = 0;
  for (const Tensor& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    if (pl != lead)
      throw ContractError("concat_cols: leading extents differ: " +
                          shape_str(parts[0].shape()) + " vs " +
                          shape_str(p.shape()));
    total += p.dim(-1);
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  Tensor out = Tensor::zeros(out_shape);
  const Index rows = out.size() / total;
  auto ov = out.values();
  Index off = 0;
  for (const Tensor& p : parts) {
    const Index w = p.dim(-1);
    const auto pv = p.values();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < w; ++j) ov[r * total + off + j] = pv[r * w + j];
    off += w;
  }
  attach_node(
      out, parts,
      [rows, total](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        Index off2 = 0;
        for (Tensor& p : in) {
          const Index w = p.dim(-1);
          if (p.requires_grad()) {
            auto g = p.grad();
            for (Index r = 0; r < rows; ++r)
              for (Index j = 0; j < w; ++j)
                g[r * w + j] += og[r * total + off2 + j];
          }
          off2 += w;
        }
      },
      "concat_cols");
  return out;
}

Tensor gather_cols(const Tensor& m, const std::vector<Index>& idx, Index cols) {
  if (m.rank() != 2)
    throw ContractError("gather_cols: expected rank 2, got " +
                        shape_str(m.shape()));
  const Index rows = m.dim(0), b = m.dim(1);
  if (static_cast<Index>(idx.size()) != rows * cols)
    throw ContractError("gather_cols: index table size " +
                        std::to_string(idx.size()) + " != " +
                        std::to_string(rows * cols));
  for (Index v : idx)
    if (v < 0 || v >= b)
      throw ContractError("gather_cols: index " + std::to_string(v) +
                          " out of range [0, " + std::to_string(b) + ")");
  Tensor out = Tensor::zeros({rows, cols});
  const auto mv = m.values();
  auto ov = out.values();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < cols; ++j)
      ov[r * cols + j] = mv[r * b + idx[r * cols + j]];
  attach_node(
      out, {m},
      [idx, rows, b, cols](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < cols; ++j)
            g[r * b + idx[r * cols + j]] += og[r * cols + j];
      },
      "gather_cols");
  return out;
}

// ---------------------------------------------------------------------------
// Rowwise nonlinearities

Tensor softmax_rows(const Tensor& x) {
  const Index c = x.dim(-1);
  const Index rows = x.size() / c;
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (Index r = 0; r < rows; ++r) {
    Scalar mx = xv[r * c];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, xv[r * c + j]);
    Scalar z = 0.0;
    for (Index j = 0; j < c; ++j) {
      const Scalar e = std::exp(xv[r * c + j] - mx);
      ov[r * c + j] = e;
      z += e;
    }
    for (Index j = 0; j < c; ++j) ov[r * c + j] /= z;
  }
  attach_node(
      out, {x},
      [rows, c](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        const auto w = o.values();
        auto g = in[0].grad();
        for (Index r = 0; r < rows; ++r) {
          Scalar dot = 0.0;
          for (Index j = 0; j < c; ++j) dot += w[r * c + j] * og[r * c + j];
          for (Index j = 0; j < c; ++j)
            g[r * c + j] += w[r * c + j] * (og[r * c + j] - dot);
        }
      },
      "softmax_rows");
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, Scalar eps) {
  const Index d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d)
    throw ContractError("layer_norm: gain " + shape_str(gain.shape()) +
                        " does not match last extent of " +
                        shape_str(x.shape()));
  const Index rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  const auto gv = gain.values();
  auto ov = out.values();
  // Cache per-row inverse stddev and normalized values for the backward rule.
  auto inv = std::make_shared<std::vector<Scalar>>(rows);
  auto xhat = std::make_shared<std::vector<Scalar>>(rows * d);
  for (Index r = 0; r < rows; ++r) {
    Scalar mean = 0.0;
    for (Index j = 0; j < d; ++j) mean += xv[r * d + j];
    mean /= static_cast<Scalar>(d);
    Scalar var = 0.0;
    for (Index j = 0; j < d; ++j) {
      const Scalar dv = xv[r * d + j] - mean;
      var += dv * dv;
    }
    var /= static_cast<Scalar>(d);
    const Scalar is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (Index j = 0; j < d; ++j) {
      const Scalar h = (xv[r * d + j] - mean) * is;
      (*xhat)[r * d + j] = h;
      ov[r * d + j] = h * gv[j];
    }
  }
  attach_node(
      out, {x, gain},
      [rows, d, inv, xhat](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        const auto gv2 = std::as_const(in[1]).values();
        if (in[1].requires_grad()) {
          auto gg = in[1].grad();
          for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < d; ++j)
              gg[j] += og[r * d + j] * (*xhat)[r * d + j];
        }
        if (in[0].requires_grad()) {
          auto g = in[0].grad();
          for (Index r = 0; r < rows; ++r) {
            Scalar s1 = 0.0, s2 = 0.0;
            for (Index j = 0; j < d; ++j) {
              const Scalar dh = og[r * d + j] * gv2[j];
              s1 += dh;
              s2 += dh * (*xhat)[r * d + j];
            }
            s1 /= static_cast<Scalar>(d);
            s2 /= static_cast<Scalar>(d);
            for (Index j = 0; j < d; ++j) {
              const Scalar dh = og[r * d + j] * gv2[j];
              g[r * d + j] += (*inv)[r] * (dh - s1 - (*xhat)[r * d + j] * s2);
            }
          }
        }
      },
      "layer_norm");
  return out;
}

namespace {

constexpr Scalar kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr Scalar kGeluA = 0.044715;

inline Scalar gelu_fwd(Scalar v) {
  return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
}

inline Scalar gelu_grad(Scalar v) {
  const Scalar u = kGeluC * (v + kGeluA * v * v * v);
  const Scalar t = std::tanh(u);
  const Scalar du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
}

}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = gelu_fwd(xv[i]);
  attach_node(
      out, {x},
      [](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        const auto xv2 = std::as_const(in[0]).values();
        auto g = in[0].grad();
        for (std::size_t i = 0; i < og.size(); ++i)
          g[i] += og[i] * gelu_grad(xv2[i]);
      },
      "gelu");
  return out;
}

Tensor geglu(const Tensor& x) {
  const Index c = x.dim(-1);
  if (c % 2 != 0)
    throw ContractError("geglu: last extent must be even, got " +
                        shape_str(x.shape()));
  const Index e = c / 2;
  Tensor value_half = slice_cols(x, 0, e);
  Tensor gate_half = slice_cols(x, e, e);
  return mul(value_half, gelu(gate_half));
}

// ---------------------------------------------------------------------------
// Lookup and losses

Tensor embedding_lookup(const Tensor& table, std::span<const Index> ids) {
  if (table.rank() != 2)
    throw ContractError("embedding_lookup: table must be rank 2, got " +
                        shape_str(table.shape()));
  if (ids.empty()) throw ContractError("embedding_lookup: empty id sequence");
  const Index v = table.dim(0), d = table.dim(1);
  for (Index id : ids)
    if (id < 0 || id >= v)
      throw ContractError("embedding_lookup: id " + std::to_string(id) +
                          " out of range [0, " + std::to_string(v) + ")");
  const Index n = static_cast<Index>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  const auto tv = table.values();
  auto ov = out.values();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) ov[i * d + j] = tv[ids[i] * d + j];
  std::vector<Index> ids_copy(ids.begin(), ids.end());
  attach_node(
      out, {table},
      [ids_copy, n, d](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        for (Index i = 0; i < n; ++i)
          for (Index j = 0; j < d; ++j)
            g[ids_copy[i] * d + j] += og[i * d + j];
      },
      "embedding_lookup");
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const Index> labels,
                     Index ignore_label) {
  if (logits.rank() != 2)
    throw ContractError("cross_entropy: logits must be rank 2, got " +
                        shape_str(logits.shape()));
  const Index n = logits.dim(0), v = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n)
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  Index active = 0;
  for (Index i = 0; i < n; ++i) {
    if (labels[i] == ignore_label) continue;
    if (labels[i] < 0 || labels[i] >= v)
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) +
                          " out of range [0, " + std::to_string(v) + ")");
    ++active;
  }
  if (active == 0)
    throw DegenerateBatchError("cross_entropy: every position is ignored");

  const auto lv = logits.values();
  // Probabilities are cached for the backward rule.
  auto probs = std::make_shared<std::vector<Scalar>>(n * v, 0.0);
  Scalar total = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (labels[i] == ignore_label) continue;
    Scalar mx = lv[i * v];
    for (Index j = 1; j < v; ++j) mx = std::max(mx, lv[i * v + j]);
    Scalar z = 0.0;
    for (Index j = 0; j < v; ++j) {
      const Scalar e = std::exp(lv[i * v + j] - mx);
      (*probs)[i * v + j] = e;
      z += e;
    }
    for (Index j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    total += -(lv[i * v + labels[i]] - mx - std::log(z));
  }
  Tensor out = Tensor::scalar(total / static_cast<Scalar>(active));
  std::vector<Index> labels_copy(labels.begin(), labels.end());
  attach_node(
      out, {logits},
      [labels_copy, ignore_label, n, v, active,
       probs](const Tensor& o, std::vector<Tensor>& in) {
        const Scalar og = o.grad()[0];
        auto g = in[0].grad();
        const Scalar inv = og / static_cast<Scalar>(active);
        for (Index i = 0; i < n; ++i) {
          if (labels_copy[i] == ignore_label) continue;
          for (Index j = 0; j < v; ++j) {
            Scalar p = (*probs)[i * v + j];
            if (j == labels_copy[i]) p -= 1.0;
            g[i * v + j] += inv * p;
          }
        }
      },
      "cross_entropy");
  return out;
}

Tensor bce_with_logits(const Tensor& logits, std::span<const uint8_t> targets,
                       std::span<const uint8_t> active) {
  Index n = logits.size();
  if (!(logits.rank() == 1 || (logits.rank() == 2 && logits.dim(1) == 1)))
    throw ContractError("bce_with_logits: logits must be [n] or [n x 1], got " +
                        shape_str(logits.shape()));
  if (static_cast<Index>(targets.size()) != n ||
      static_cast<Index>(active.size()) != n)
    throw ContractError("bce_with_logits: targets/active length mismatch");
  Index m = 0;
  for (uint8_t a : active)
    if (a) ++m;
  if (m == 0)
    throw DegenerateBatchError("bce_with_logits: no active positions");

  const auto lv = logits.values();
  Scalar total = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const Scalar x = lv[i];
    const Scalar t = targets[i] ? 1.0 : 0.0;
    // softplus(x) - t*x, with softplus computed stably.
    total += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - t * x;
  }
  Tensor out = Tensor::scalar(total / static_cast<Scalar>(m));
  std::vector<uint8_t> t_copy(targets.begin(), targets.end());
  std::vector<uint8_t> a_copy(active.begin(), active.end());
  attach_node(
      out, {logits},
      [t_copy, a_copy, n, m](const Tensor& o, std::vector<Tensor>& in) {
        const Scalar og = o.grad()[0];
        auto g = in[0].grad();
        const auto lv2 = std::as_const(in[0]).values();
        const Scalar inv = og / static_cast<Scalar>(m);
        for (Index i = 0; i < n; ++i) {
          if (!a_copy[i]) continue;
          const Scalar s = 1.0 / (1.0 + std::exp(-lv2[i]));
          g[i] += inv * (s - (t_copy[i] ? 1.0 : 0.0));
        }
      },
      "bce_with_logits");
  return out;
}

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  Scalar total = 0.0;
  for (Scalar v : xv) total += v;
  Tensor out = Tensor::scalar(total);
  attach_node(
      out, {x},
      [](const Tensor& o, std::vector<Tensor>& in) {
        const Scalar og = o.grad()[0];
        auto g = in[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += og;
      },
      "sum");
  return out;
}

Tensor dropout(const Tensor& x, Scalar p, RngStream& rng, bool train) {
  if (!train || p == 0.0) return x;
  if (p < 0.0 || p >= 1.0)
    throw ContractError("dropout: p must be in [0, 1), got " +
                        std::to_string(p));
  const Scalar keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<Scalar>>(x.size());
  for (auto& m : *mask) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * (*mask)[i];
  attach_node(
      out, {x},
      [mask](const Tensor& o, std::vector<Tensor>& in) {
        const auto og = o.grad();
        auto g = in[0].grad();
        for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * (*mask)[i];
      },
      "dropout");
  return out;
}

}  // namespace enclab
