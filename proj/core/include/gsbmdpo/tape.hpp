#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gsbmdpo/array.hpp"

namespace gsbmdpo::diff {

// A trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Array value;
  Array grad;

  Parameter() = default;
  Parameter(std::string n, Array v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}

  void zero_grad() { grad.fill(0.0); }
};

enum class Op : std::uint8_t {
  Constant,
  Param,
  Affine,    // x[n,k] * W[k,m] + b[m]
  Add,
  Sub,
  Mul,
  AddConst,  // x + c, c same shape as x
  MulConst,  // x * c, c same shape as x
  Scale,     // x * s
  Tanh,
  Silu,
  Elu,
  Square,
  Exp,
  Log,
  Clip,
  Sum,       // all elements -> scalar
  Mean,      // all elements -> scalar
  RowSum,    // [n,m] -> [n,1]
  Reshape,
  BroadcastRows,  // [m] -> [n,m]
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Array& value() const;
  double item() const { return value().item(); }
};

// Linear record of primitive operations. Backward replays it in reverse and
// accumulates into Parameter::grad. A tape can be consumed once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var parameter(Parameter& p);

  Var affine(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_const(Var a, Array c);
  Var mul_const(Var a, Array c);
  Var scale(Var a, double s);
  Var tanh(Var a);
  Var silu(Var a);
  Var elu(Var a);
  Var square(Var a);
  Var exp(Var a);
  Var log(Var a);
  // Gradient passes through where lo < x < hi and is exactly zero elsewhere.
  Var clip(Var a, double lo, double hi);
  Var sum(Var a);
  Var mean(Var a);
  Var row_sum(Var a);
  Var reshape(Var a, std::vector<std::size_t> shape);
  Var broadcast_rows(Var a, std::size_t rows);

  const Array& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws if loss is not scalar
  // or the tape was already consumed.
  void backward(Var loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::Constant;
    int a = -1;
    int b = -1;
    int c = -1;
    double lo = 0.0;
    double hi = 0.0;
    Array value;
    Array aux;
    Parameter* param = nullptr;
  };

  Var push(Node node);
  Node& node(Var v);
  const Node& node(Var v) const;
  void check_same_tape(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Array& Var::value() const { return tape->value(*this); }

}  // namespace gsbmdpo::diff
