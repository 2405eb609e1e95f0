#include "gsbmdpo/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace gsbmdpo::diff {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::RowVectorXd>;
using MapVec = Eigen::Map<Eigen::RowVectorXd>;

void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

template <typename F>
Array map_unary(const Array& x, F f) {
  Array y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}


}  // namespace

namespace kernels {

Array affine(const Array& x, const Array& w, const Array& b) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto k = static_cast<Eigen::Index>(x.cols());
  const auto m = static_cast<Eigen::Index>(w.cols());
  Array out = Array::matrix(x.rows(), w.cols());
  MapMat y(out.data(), n, m);
  y.noalias() = CMapMat(x.data(), n, k) * CMapMat(w.data(), k, m);
  y.rowwise() += CMapVec(b.data(), m);
  return out;
}

}  // namespace kernels

Var Tape::push(Node n) {
  if (consumed_) throw std::logic_error("tape already consumed");
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tape::Node& Tape::node(Var v) {
  check_same_tape(v);
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  check_same_tape(v);
  return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::check_same_tape(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
}

Var Tape::constant(Array value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.op = Op::Param;
  n.value = p.value;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::affine(Var x, Var w, Var b) {
  const Array& xv = node(x).value;
  const Array& wv = node(w).value;
  const Array& bv = node(b).value;
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() || bv.size() != wv.cols()) {
    throw ShapeError("affine: incompatible shapes " + xv.shape_string() + " * " +
                     wv.shape_string() + " + " + bv.shape_string());
  }
  Node out;
  out.op = Op::Affine;
  out.a = x.id;
  out.b = w.id;
  out.c = b.id;
  out.value = kernels::affine(xv, wv, bv);
  return push(std::move(out));
}

Var Tape::add(Var a, Var b) {
  const Array& av = node(a).value;
  const Array& bv = node(b).value;
  require_same_shape(av, bv, "add");
  Node out;
  out.op = Op::Add;
  out.a = a.id;
  out.b = b.id;
  out.value = av;
  for (std::size_t i = 0; i < bv.size(); ++i) out.value[i] += bv[i];
  return push(std::move(out));
}

Var Tape::sub(Var a, Var b) {
  const Array& av = node(a).value;
  const Array& bv = node(b).value;
  require_same_shape(av, bv, "sub");
  Node out;
  out.op = Op::Sub;
  out.a = a.id;
  out.b = b.id;
  out.value = av;
  for (std::size_t i = 0; i < bv.size(); ++i) out.value[i] -= bv[i];
  return push(std::move(out));
}

Var Tape::mul(Var a, Var b) {
  const Array& av = node(a).value;
  const Array& bv = node(b).value;
  require_same_shape(av, bv, "mul");
  Node out;
  out.op = Op::Mul;
  out.a = a.id;
  out.b = b.id;
  out.value = av;
  for (std::size_t i = 0; i < bv.size(); ++i) out.value[i] *= bv[i];
  return push(std::move(out));
}

Var Tape::add_const(Var a, Array c) {
  const Array& av = node(a).value;
  require_same_shape(av, c, "add_const");
  Node out;
  out.op = Op::AddConst;
  out.a = a.id;
  out.value = av;
  for (std::size_t i = 0; i < c.size(); ++i) out.value[i] += c[i];
  return push(std::move(out));
}

Var Tape::mul_const(Var a, Array c) {
  const Array& av = node(a).value;
  require_same_shape(av, c, "mul_const");
  Node out;
  out.op = Op::MulConst;
  out.a = a.id;
  out.value = av;
  for (std::size_t i = 0; i < c.size(); ++i) out.value[i] *= c[i];
  out.aux = std::move(c);
  return push(std::move(out));
}

Var Tape::scale(Var a, double s) {
  Node out;
  out.op = Op::Scale;
  out.a = a.id;
  out.lo = s;
  out.value = map_unary(node(a).value, [s](double v) { return v * s; });
  return push(std::move(out));
}

Var Tape::tanh(Var a) {
  Node out;
  out.op = Op::Tanh;
  out.a = a.id;
  out.value = map_unary(node(a).value, [](double v) { return std::tanh(v); });
  return push(std::move(out));
}

Var Tape::silu(Var a) {
  Node out;
  out.op = Op::Silu;
  out.a = a.id;
  const Array& x = node(a).value;
  out.aux = map_unary(x, [](double v) { return kernels::sigmoid(v); });
  out.value = Array(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.value[i] = x[i] * out.aux[i];
  return push(std::move(out));
}

Var Tape::elu(Var a) {
  Node out;
  out.op = Op::Elu;
  out.a = a.id;
  out.value = map_unary(node(a).value, [](double v) { return kernels::elu(v); });
  return push(std::move(out));
}

Var Tape::square(Var a) {
  Node out;
  out.op = Op::Square;
  out.a = a.id;
  out.value = map_unary(node(a).value, [](double v) { return v * v; });
  return push(std::move(out));
}

Var Tape::exp(Var a) {
  Node out;
  out.op = Op::Exp;
  out.a = a.id;
  out.value = map_unary(node(a).value, [](double v) { return std::exp(v); });
  return push(std::move(out));
}

Var Tape::log(Var a) {
  Node out;
  out.op = Op::Log;
  out.a = a.id;
  out.value = map_unary(node(a).value, [](double v) { return std::log(v); });
  return push(std::move(out));
}

Var Tape::clip(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo must not exceed hi");
  Node out;
  out.op = Op::Clip;
  out.a = a.id;
  out.lo = lo;
  out.hi = hi;
  out.value = map_unary(node(a).value, [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return push(std::move(out));
}

Var Tape::sum(Var a) {
  const Array& av = node(a).value;
  double s = 0.0;
  for (double v : av.values()) s += v;
  Node out;
  out.op = Op::Sum;
  out.a = a.id;
  out.value = Array::scalar(s);
  return push(std::move(out));
}

Var Tape::mean(Var a) {
  const Array& av = node(a).value;
  double s = 0.0;
  for (double v : av.values()) s += v;
  Node out;
  out.op = Op::Mean;
  out.a = a.id;
  out.value = Array::scalar(s / static_cast<double>(av.size()));
  return push(std::move(out));
}

Var Tape::row_sum(Var a) {
  const Array& av = node(a).value;
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  Node out;
  out.op = Op::RowSum;
  out.a = a.id;
  out.value = Array::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j];
    out.value[i] = s;
  }
  return push(std::move(out));
}

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
  Node out;
  out.op = Op::Reshape;
  out.a = a.id;
  out.value = node(a).value.reshaped(std::move(shape));
  return push(std::move(out));
}

Var Tape::broadcast_rows(Var a, std::size_t rows) {
  const Array& av = node(a).value;
  const std::size_t m = av.size();
  Node out;
  out.op = Op::BroadcastRows;
  out.a = a.id;
  out.value = Array::matrix(rows, m);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) out.value[r * m + j] = av[j];
  }
  return push(std::move(out));
}

void Tape::backward(Var loss) {
  if (consumed_) throw std::logic_error("tape already consumed");
  const Node& root = node(loss);
  if (!root.value.is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got " + root.value.shape_string());
  }
  consumed_ = true;

  std::vector<Array> grads(nodes_.size());
  auto grad_of = [&](int id) -> Array& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g = Array(nodes_[static_cast<std::size_t>(id)].value.shape(), 0.0);
    return g;
  };
  grad_of(loss.id)[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    Array& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.op) {
      case Op::Constant:
        break;
      case Op::Param: {
        Array& pg = n.param->grad;
        if (!pg.same_shape(g)) pg = Array(g.shape(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        break;
      }
      case Op::Affine: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        const Array& wv = nodes_[static_cast<std::size_t>(n.b)].value;
        const auto rows = static_cast<Eigen::Index>(xv.rows());
        const auto k = static_cast<Eigen::Index>(xv.cols());
        const auto m = static_cast<Eigen::Index>(wv.cols());
        CMapMat gy(g.data(), rows, m);
        if (nodes_[static_cast<std::size_t>(n.a)].op != Op::Constant) {
          MapMat gx(grad_of(n.a).data(), rows, k);
          gx.noalias() += gy * CMapMat(wv.data(), k, m).transpose();
        }
        MapMat gw(grad_of(n.b).data(), k, m);
        gw.noalias() += CMapMat(xv.data(), rows, k).transpose() * gy;
        MapVec gb(grad_of(n.c).data(), m);
        gb += gy.colwise().sum();
        break;
      }
      case Op::Add: {
        Array& ga = grad_of(n.a);
        Array& gb = grad_of(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::Sub: {
        Array& ga = grad_of(n.a);
        Array& gb = grad_of(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        const Array& av = nodes_[static_cast<std::size_t>(n.a)].value;
        const Array& bv = nodes_[static_cast<std::size_t>(n.b)].value;
        Array& ga = grad_of(n.a);
        Array& gb = grad_of(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::AddConst:
      case Op::Reshape: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
      }
      case Op::MulConst: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.aux[i];
        break;
      }
      case Op::Scale: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.lo;
        break;
      }
      case Op::Tanh: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        }
        break;
      }
      case Op::Silu: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = n.aux[i];
          ga[i] += g[i] * (s * (1.0 + xv[i] * (1.0 - s)));
        }
        break;
      }
      case Op::Elu: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * (xv[i] > 0.0 ? 1.0 : n.value[i] + 1.0);
        }
        break;
      }
      case Op::Square: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * g[i] * xv[i];
        break;
      }
      case Op::Exp: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
        break;
      }
      case Op::Log: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / xv[i];
        break;
      }
      case Op::Clip: {
        const Array& xv = nodes_[static_cast<std::size_t>(n.a)].value;
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > n.lo && xv[i] < n.hi) ga[i] += g[i];
        }
        break;
      }
      case Op::Sum: {
        Array& ga = grad_of(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        break;
      }
      case Op::Mean: {
        Array& ga = grad_of(n.a);
        const double s = g[0] / static_cast<double>(ga.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s;
        break;
      }
      case Op::BroadcastRows: {
        Array& ga = grad_of(n.a);
        const std::size_t m = ga.size();
        for (std::size_t r = 0; r < g.size() / m; ++r) {
          for (std::size_t j = 0; j < m; ++j) ga[j] += g[r * m + j];
        }
        break;
      }
      case Op::RowSum: {
        Array& ga = grad_of(n.a);
        const std::size_t c = ga.cols();
        for (std::size_t r = 0; r < g.size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r];
        }
        break;
      }
    }
    g = Array();
  }
}

}  // namespace gsbmdpo::diff
