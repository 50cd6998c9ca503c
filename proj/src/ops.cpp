#include "mem4d/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace mem4d {

using detail::Node;
using detail::NodePtr;

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

NodePtr new_node(Shape shape) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(shape), Real(0));
  n->shape = std::move(shape);
  return n;
}

// Records `fn` when a tape is active and any input participates in gradients.
template <typename Fn>
Tensor finish(NodePtr out, std::vector<NodePtr> inputs, Fn&& fn) {
  GradientTape* tape = active_tape();
  if (tape != nullptr) {
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    if (any) {
      out->requires_grad = true;
      tape->record(std::move(inputs), out, std::forward<Fn>(fn));
    }
  }
  return Tensor(std::move(out));
}

const NodePtr& node_of(const Tensor& t) {
  if (!t.defined()) throw ArgumentError("undefined tensor passed to an operation");
  return t.node();
}

// Maps an output flat index onto a broadcast input's flat index.
struct BroadcastMap {
  enum class Mode { kSame, kScalar, kSuffix, kGeneral } mode = Mode::kSame;
  std::size_t period = 1;
  std::shared_ptr<std::vector<std::size_t>> table;

  std::size_t operator()(std::size_t i) const {
    switch (mode) {
      case Mode::kSame: return i;
      case Mode::kScalar: return 0;
      case Mode::kSuffix: return i % period;
      default: return (*table)[i];
    }
  }
};

BroadcastMap make_map(const Shape& out, const Shape& in) {
  BroadcastMap m;
  const auto n_in = shape_numel(in);
  if (in == out) return m;
  if (n_in == 1) {
    m.mode = BroadcastMap::Mode::kScalar;
    return m;
  }
  // `in` equals a trailing block of `out` (after dropping leading ones).
  Shape trimmed = in;
  while (trimmed.size() > 1 && trimmed.front() == 1) trimmed.erase(trimmed.begin());
  if (trimmed.size() <= out.size() && std::equal(trimmed.rbegin(), trimmed.rend(), out.rbegin())) {
    m.mode = BroadcastMap::Mode::kSuffix;
    m.period = n_in;
    return m;
  }
  m.mode = BroadcastMap::Mode::kGeneral;
  const std::size_t r = out.size();
  std::vector<std::size_t> in_stride(r, 0);
  {
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
      const std::size_t axis_in = in.size() - 1 - k;
      const std::size_t axis_out = r - 1 - k;
      in_stride[axis_out] = in[axis_in] == 1 ? 0 : stride;
      stride *= in[axis_in];
    }
  }
  const auto n_out = shape_numel(out);
  m.table = std::make_shared<std::vector<std::size_t>>(n_out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n_out; ++i) {
    (*m.table)[i] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      off += in_stride[ax];
      if (idx[ax] < out[ax]) break;
      off -= in_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return m;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& ta, const Tensor& tb, BinOp op) {
  const NodePtr& a = node_of(ta);
  const NodePtr& b = node_of(tb);
  const Shape out_shape = broadcast_shape(a->shape, b->shape);
  auto out = new_node(out_shape);
  const auto ma = make_map(out_shape, a->shape);
  const auto mb = make_map(out_shape, b->shape);
  const std::size_t n = out->value.size();
  const Real* av = a->value.data();
  const Real* bv = b->value.data();
  Real* ov = out->value.data();
  switch (op) {
    case BinOp::kAdd: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ma(i)] + bv[mb(i)]; break;
    case BinOp::kSub: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ma(i)] - bv[mb(i)]; break;
    case BinOp::kMul: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ma(i)] * bv[mb(i)]; break;
    case BinOp::kDiv: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ma(i)] / bv[mb(i)]; break;
  }
  Node* po = out.get();
  return finish(out, {a, b}, [a, b, po, ma, mb, op, n]() {
    const Real* g = po->grad.data();
    if (a->requires_grad) {
      Real* ga = a->grad_buffer().data();
      switch (op) {
        case BinOp::kAdd:
        case BinOp::kSub: for (std::size_t i = 0; i < n; ++i) ga[ma(i)] += g[i]; break;
        case BinOp::kMul: for (std::size_t i = 0; i < n; ++i) ga[ma(i)] += g[i] * b->value[mb(i)]; break;
        case BinOp::kDiv: for (std::size_t i = 0; i < n; ++i) ga[ma(i)] += g[i] / b->value[mb(i)]; break;
      }
    }
    if (b->requires_grad) {
      Real* gb = b->grad_buffer().data();
      switch (op) {
        case BinOp::kAdd: for (std::size_t i = 0; i < n; ++i) gb[mb(i)] += g[i]; break;
        case BinOp::kSub: for (std::size_t i = 0; i < n; ++i) gb[mb(i)] -= g[i]; break;
        case BinOp::kMul: for (std::size_t i = 0; i < n; ++i) gb[mb(i)] += g[i] * a->value[ma(i)]; break;
        case BinOp::kDiv:
          for (std::size_t i = 0; i < n; ++i) {
            const Real bvv = b->value[mb(i)];
            gb[mb(i)] -= g[i] * a->value[ma(i)] / (bvv * bvv);
          }
          break;
      }
    }
  });
}

// y = f(x) with dy/dx expressed through (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& ta, F f, D dfdx) {
  const NodePtr& a = node_of(ta);
  auto out = new_node(a->shape);
  const std::size_t n = out->value.size();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = f(a->value[i]);
  Node* po = out.get();
  return finish(out, {a}, [a, po, n, dfdx]() {
    Real* ga = a->grad_buffer().data();
    const Real* g = po->grad.data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx(a->value[i], po->value[i]);
  });
}

void check_inner(const Shape& a, const Shape& b, bool b_transposed) {
  if (a.size() < 2 && !(a.size() == 1)) throw ShapeError("matmul operand must have rank >= 1");
  if (b.size() < 2) throw ShapeError("matmul right operand must have rank >= 2, got " + shape_str(b));
  const std::size_t k_a = a.back();
  const std::size_t k_b = b_transposed ? b.back() : b[b.size() - 2];
  if (k_a != k_b) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a) + " x " + shape_str(b) +
                     (b_transposed ? "^T" : ""));
  }
  if (b.size() > 2) {
    if (a.size() != b.size() || !std::equal(a.begin(), a.end() - 2, b.begin())) {
      throw ShapeError("matmul batch extents differ: " + shape_str(a) + " x " + shape_str(b));
    }
  }
}

Tensor matmul_impl(const Tensor& ta, const Tensor& tb, bool b_transposed) {
  const NodePtr& a = node_of(ta);
  const NodePtr& b = node_of(tb);
  check_inner(a->shape, b->shape, b_transposed);
  const std::size_t k = a->shape.back();
  const std::size_t n = b_transposed ? b->shape[b->shape.size() - 2] : b->shape.back();
  std::size_t batch = 1;
  std::size_t m = 0;
  if (b->shape.size() == 2) {
    m = shape_numel(a->shape) / k;
  } else {
    m = a->shape[a->shape.size() - 2];
    batch = shape_numel(a->shape) / (m * k);
  }
  Shape out_shape(a->shape.begin(), a->shape.end() - 1);
  out_shape.push_back(n);
  auto out = new_node(out_shape);
  const std::size_t b_rows = b_transposed ? n : k;
  const std::size_t b_cols = b_transposed ? k : n;
  for (std::size_t s = 0; s < batch; ++s) {
    CMapR A(a->value.data() + s * m * k, m, k);
    CMapR B(b->value.data() + (b->shape.size() == 2 ? 0 : s * k * n), b_rows, b_cols);
    MapR C(out->value.data() + s * m * n, m, n);
    if (b_transposed) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  }
  Node* po = out.get();
  const bool shared_b = b->shape.size() == 2;
  return finish(out, {a, b}, [a, b, po, m, k, n, batch, b_rows, b_cols, b_transposed, shared_b]() {
    for (std::size_t s = 0; s < batch; ++s) {
      CMapR G(po->grad.data() + s * m * n, m, n);
      CMapR A(a->value.data() + s * m * k, m, k);
      const std::size_t boff = shared_b ? 0 : s * k * n;
      CMapR B(b->value.data() + boff, b_rows, b_cols);
      if (a->requires_grad) {
        MapR GA(a->grad_buffer().data() + s * m * k, m, k);
        if (b_transposed) GA.noalias() += G * B;
        else GA.noalias() += G * B.transpose();
      }
      if (b->requires_grad) {
        MapR GB(b->grad_buffer().data() + boff, b_rows, b_cols);
        if (b_transposed) GB.noalias() += G.transpose() * A;
        else GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Real erf_gelu(Real x) { return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>)); }
Real erf_gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
  return cdf + x * pdf;
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[r - 1 - k] = std::max(ea, eb);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv); }

Tensor scale(const Tensor& a, Real factor) {
  return unary(a, [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real offset) {
  return unary(a, [offset](Real x) { return x + offset; }, [](Real, Real) { return Real(1); });
}

Tensor neg(const Tensor& a) { return scale(a, Real(-1)); }

Tensor exp(const Tensor& a) {
  return unary(a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](Real x) { return x > 0 ? x : Real(0); }, [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Tensor gelu(const Tensor& a) {
  return unary(a, erf_gelu, [](Real x, Real) { return erf_gelu_grad(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, [](Real x) { return std::sqrt(x); }, [](Real, Real y) { return Real(0.5) / y; });
}

Tensor tan(const Tensor& a) {
  return unary(a, [](Real x) { return std::tan(x); }, [](Real, Real y) { return Real(1) + y * y; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }

Tensor pairwise_dot(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = node_of(ta);
  const NodePtr& b = node_of(tb);
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1]) {
    throw ShapeError("pairwise_dot needs n x k and m x k, got " + shape_str(a->shape) + " and " + shape_str(b->shape));
  }
  const std::size_t n = a->shape[0], m = b->shape[0], k = a->shape[1];
  auto out = new_node(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = 0;
      for (std::size_t c = 0; c < k; ++c) acc += a->value[i * k + c] * b->value[j * k + c];
      out->value[i * m + j] = acc;
    }
  Node* po = out.get();
  return finish(out, {a, b}, [a, b, po, n, m, k]() {
    const Real* g = po->grad.data();
    if (a->requires_grad) {
      Real* ga = a->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t c = 0; c < k; ++c) ga[i * k + c] += g[i * m + j] * b->value[j * k + c];
    }
    if (b->requires_grad) {
      Real* gb = b->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t c = 0; c < k; ++c) gb[j * k + c] += g[i * m + j] * a->value[i * k + c];
    }
  });
}

Tensor sum(const Tensor& ta) {
  const NodePtr& a = node_of(ta);
  auto out = new_node(Shape{1});
  out->value[0] = std::accumulate(a->value.begin(), a->value.end(), Real(0));
  Node* po = out.get();
  return finish(out, {a}, [a, po]() {
    const Real g = po->grad[0];
    for (auto& v : a->grad_buffer()) v += g;
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), Real(1) / static_cast<Real>(a.numel())); }

Tensor norm_last(const Tensor& ta) {
  const NodePtr& a = node_of(ta);
  const std::size_t d = a->shape.back();
  const std::size_t rows = a->value.size() / d;
  Shape os(a->shape.begin(), a->shape.end() - 1);
  if (os.empty()) os = {1};
  auto out = new_node(os);
  for (std::size_t r = 0; r < rows; ++r) {
    Real acc = 0;
    for (std::size_t c = 0; c < d; ++c) acc += a->value[r * d + c] * a->value[r * d + c];
    out->value[r] = std::sqrt(acc);
  }
  Node* po = out.get();
  return finish(out, {a}, [a, po, d, rows]() {
    Real* ga = a->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real nrm = po->value[r];
      if (nrm == Real(0)) continue;
      const Real g = po->grad[r] / nrm;
      for (std::size_t c = 0; c < d; ++c) ga[r * d + c] += g * a->value[r * d + c];
    }
  });
}

Tensor softmax(const Tensor& tx, int axis) {
  const NodePtr& x = node_of(tx);
  const std::size_t ax = norm_axis(axis, x->shape.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x->shape[i];
  for (std::size_t i = ax + 1; i < x->shape.size(); ++i) inner *= x->shape[i];
  const std::size_t len = x->shape[ax];
  auto out = new_node(x->shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      Real mx = x->value[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x->value[base + k * inner]);
      Real z = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const Real e = std::exp(x->value[base + k * inner] - mx);
        out->value[base + k * inner] = e;
        z += e;
      }
      const Real inv = Real(1) / z;
      for (std::size_t k = 0; k < len; ++k) out->value[base + k * inner] *= inv;
    }
  }
  Node* po = out.get();
  return finish(out, {x}, [x, po, outer, inner, len]() {
    Real* gx = x->grad_buffer().data();
    const Real* y = po->value.data();
    const Real* g = po->grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        Real dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& tx, const Tensor& tgain, const Tensor& tbias, Real eps) {
  const NodePtr& x = node_of(tx);
  const NodePtr& gain = node_of(tgain);
  const NodePtr& bias = node_of(tbias);
  const std::size_t c = x->shape.back();
  if (gain->value.size() != c || bias->value.size() != c) {
    throw ShapeError("layer_norm gain/bias must have " + std::to_string(c) + " entries");
  }
  const std::size_t rows = x->value.size() / c;
  auto out = new_node(x->shape);
  auto xhat = std::make_shared<std::vector<Real>>(x->value.size());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x->value.data() + r * c;
    Real mu = 0;
    for (std::size_t k = 0; k < c; ++k) mu += xr[k];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t k = 0; k < c; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= static_cast<Real>(c);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t k = 0; k < c; ++k) {
      const Real h = (xr[k] - mu) * rs;
      (*xhat)[r * c + k] = h;
      out->value[r * c + k] = h * gain->value[k] + bias->value[k];
    }
  }
  Node* po = out.get();
  return finish(out, {x, gain, bias}, [x, gain, bias, po, xhat, rstd, rows, c]() {
    const Real* g = po->grad.data();
    if (gain->requires_grad || bias->requires_grad) {
      Real* gg = gain->grad_buffer().data();
      Real* gb = bias->grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < c; ++k) {
          gg[k] += g[r * c + k] * (*xhat)[r * c + k];
          gb[k] += g[r * c + k];
        }
      }
    }
    if (x->requires_grad) {
      Real* gx = x->grad_buffer().data();
      const Real inv_c = Real(1) / static_cast<Real>(c);
      for (std::size_t r = 0; r < rows; ++r) {
        Real m1 = 0, m2 = 0;
        for (std::size_t k = 0; k < c; ++k) {
          const Real dh = g[r * c + k] * gain->value[k];
          m1 += dh;
          m2 += dh * (*xhat)[r * c + k];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for (std::size_t k = 0; k < c; ++k) {
          const Real dh = g[r * c + k] * gain->value[k];
          gx[r * c + k] += (*rstd)[r] * (dh - m1 - (*xhat)[r * c + k] * m2);
        }
      }
    }
  });
}

Tensor gather(const Tensor& ta, IndexList index, Shape out_shape) {
  const NodePtr& a = node_of(ta);
  if (!index || index->size() != shape_numel(out_shape)) {
    throw ShapeError("gather index length does not match output shape " + shape_str(out_shape));
  }
  auto out = new_node(std::move(out_shape));
  const std::size_t na = a->value.size();
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= na) throw ShapeError("gather index out of range");
    out->value[i] = a->value[idx[i]];
  }
  Node* po = out.get();
  return finish(out, {a}, [a, po, index]() {
    Real* ga = a->grad_buffer().data();
    const auto& ix = *index;
    for (std::size_t i = 0; i < ix.size(); ++i) ga[ix[i]] += po->grad[i];
  });
}

Tensor reshape(const Tensor& ta, Shape shape) {
  const NodePtr& a = node_of(ta);
  if (shape_numel(shape) != a->value.size()) {
    throw ShapeError("cannot reshape " + shape_str(a->shape) + " into " + shape_str(shape));
  }
  auto out = new_node(std::move(shape));
  out->value = a->value;
  Node* po = out.get();
  return finish(out, {a}, [a, po]() {
    Real* ga = a->grad_buffer().data();
    for (std::size_t i = 0; i < po->grad.size(); ++i) ga[i] += po->grad[i];
  });
}

Tensor permute(const Tensor& ta, const std::vector<std::size_t>& axes) {
  const Shape& in = ta.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute axes do not match rank");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("invalid permutation");
    seen[ax] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  const std::size_t n = shape_numel(in);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k) off += counter[k] * in_stride[axes[k]];
    (*idx)[i] = static_cast<std::uint32_t>(off);
    for (std::size_t k = r; k-- > 0;) {
      if (++counter[k] < out_shape[k]) break;
      counter[k] = 0;
    }
  }
  return gather(ta, idx, out_shape);
}

Tensor transpose_last2(const Tensor& a) {
  const std::size_t r = a.rank();
  if (r < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat of an empty list");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat extents differ: " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
    nodes.push_back(p.node());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  auto out = new_node(out_shape);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t col = 0;
  std::vector<std::size_t> offsets;
  for (const auto& nd : nodes) {
    const std::size_t w = nd->shape[axis] * inner;
    offsets.push_back(col);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(nd->value.data() + o * w, w, out->value.data() + o * out_row + col);
    }
    col += w;
  }
  Node* po = out.get();
  auto inputs = nodes;
  return finish(out, std::move(inputs), [nodes, offsets, po, outer, inner, out_row, axis]() {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const auto& nd = nodes[p];
      if (!nd->requires_grad) continue;
      const std::size_t w = nd->shape[axis] * inner;
      Real* gn = nd->grad_buffer().data();
      for (std::size_t o = 0; o < outer; ++o) {
        const Real* src = po->grad.data() + o * out_row + offsets[p];
        for (std::size_t k = 0; k < w; ++k) gn[o * w + k] += src[k];
      }
    }
  });
}

Tensor slice(const Tensor& ta, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = ta.shape();
  if (axis >= in.size() || begin >= end || end > in[axis]) {
    throw ShapeError("invalid slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  auto idx = std::make_shared<std::vector<std::uint32_t>>();
  idx->reserve(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = begin; k < end; ++k) {
      for (std::size_t i = 0; i < inner; ++i) {
        idx->push_back(static_cast<std::uint32_t>((o * in[axis] + k) * inner + i));
      }
    }
  }
  return gather(ta, idx, out_shape);
}

Tensor pool2d(const Tensor& tx, std::size_t factor) {
  if (factor < 1) throw ArgumentError("pool2d factor must be >= 1");
  const NodePtr& x = node_of(tx);
  if (x->shape.size() < 2) throw ShapeError("pool2d needs rank >= 2");
  const std::size_t h = x->shape[x->shape.size() - 2];
  const std::size_t w = x->shape.back();
  const std::size_t oh = (h + factor - 1) / factor;
  const std::size_t ow = (w + factor - 1) / factor;
  const std::size_t planes = x->value.size() / (h * w);
  Shape os = x->shape;
  os[os.size() - 2] = oh;
  os.back() = ow;
  auto out = new_node(os);
  const Real inv = Real(1) / static_cast<Real>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = x->value.data() + p * h * w;
    Real* dst = out->value.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Real acc = 0;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          const std::size_t y = std::min(oy * factor + dy, h - 1);
          for (std::size_t dx = 0; dx < factor; ++dx) acc += src[y * w + std::min(ox * factor + dx, w - 1)];
        }
        dst[oy * ow + ox] = acc * inv;
      }
    }
  }
  Node* po = out.get();
  return finish(out, {x}, [x, po, planes, h, w, oh, ow, factor, inv]() {
    Real* gx = x->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p) {
      const Real* g = po->grad.data() + p * oh * ow;
      Real* dst = gx + p * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const Real gv = g[oy * ow + ox] * inv;
          for (std::size_t dy = 0; dy < factor; ++dy) {
            const std::size_t y = std::min(oy * factor + dy, h - 1);
            for (std::size_t dx = 0; dx < factor; ++dx) dst[y * w + std::min(ox * factor + dx, w - 1)] += gv;
          }
        }
      }
    }
  });
}

Tensor rotate_pairs(const Tensor& tx, std::shared_ptr<const std::vector<Real>> cos_table,
                    std::shared_ptr<const std::vector<Real>> sin_table) {
  const NodePtr& x = node_of(tx);
  if (x->shape.size() < 2) throw ShapeError("rotate_pairs needs rank >= 2");
  const std::size_t d = x->shape.back();
  const std::size_t n = x->shape[x->shape.size() - 2];
  if (d % 2 != 0) throw ShapeError("rotate_pairs needs an even channel count");
  const std::size_t half = d / 2;
  if (!cos_table || !sin_table || cos_table->size() != n * half || sin_table->size() != n * half) {
    throw ShapeError("rotate_pairs table size mismatch");
  }
  const std::size_t batch = x->value.size() / (n * d);
  auto out = new_node(x->shape);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) {
      const Real* src = x->value.data() + (b * n + t) * d;
      Real* dst = out->value.data() + (b * n + t) * d;
      for (std::size_t i = 0; i < half; ++i) {
        const Real c = (*cos_table)[t * half + i];
        const Real s = (*sin_table)[t * half + i];
        dst[2 * i] = src[2 * i] * c - src[2 * i + 1] * s;
        dst[2 * i + 1] = src[2 * i] * s + src[2 * i + 1] * c;
      }
    }
  }
  Node* po = out.get();
  return finish(out, {x}, [x, po, cos_table, sin_table, batch, n, d, half]() {
    Real* gx = x->grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < n; ++t) {
        const Real* g = po->grad.data() + (b * n + t) * d;
        Real* dst = gx + (b * n + t) * d;
        for (std::size_t i = 0; i < half; ++i) {
          const Real c = (*cos_table)[t * half + i];
          const Real s = (*sin_table)[t * half + i];
          dst[2 * i] += g[2 * i] * c + g[2 * i + 1] * s;
          dst[2 * i + 1] += -g[2 * i] * s + g[2 * i + 1] * c;
        }
      }
    }
  });
}

namespace {
void hamilton(const Real* a, const Real* b, Real* o) {
  o[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3];
  o[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2];
  o[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1];
  o[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0];
}
}  // namespace

Tensor quat_mul(const Tensor& ta, const Tensor& tb) {
  const NodePtr& a = node_of(ta);
  const NodePtr& b = node_of(tb);
  if (a->shape != b->shape || a->shape.back() != 4) {
    throw ShapeError("quat_mul needs equal shapes ending in 4, got " + shape_str(a->shape) + " and " +
                     shape_str(b->shape));
  }
  const std::size_t count = a->value.size() / 4;
  auto out = new_node(a->shape);
  for (std::size_t i = 0; i < count; ++i) hamilton(&a->value[4 * i], &b->value[4 * i], &out->value[4 * i]);
  Node* po = out.get();
  return finish(out, {a, b}, [a, b, po, count]() {
    // <a*b, g> = <a, g*conj(b)> = <b, conj(a)*g>
    for (std::size_t i = 0; i < count; ++i) {
      const Real* g = &po->grad[4 * i];
      if (a->requires_grad) {
        const Real* bv = &b->value[4 * i];
        const Real bc[4] = {bv[0], -bv[1], -bv[2], -bv[3]};
        Real t[4];
        hamilton(g, bc, t);
        Real* ga = a->grad_buffer().data() + 4 * i;
        for (int k = 0; k < 4; ++k) ga[k] += t[k];
      }
      if (b->requires_grad) {
        const Real* av = &a->value[4 * i];
        const Real ac[4] = {av[0], -av[1], -av[2], -av[3]};
        Real t[4];
        hamilton(ac, g, t);
        Real* gb = b->grad_buffer().data() + 4 * i;
        for (int k = 0; k < 4; ++k) gb[k] += t[k];
      }
    }
  });
}

}  // namespace mem4d
