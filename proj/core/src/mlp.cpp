#include "gsbmdpo/mlp.hpp"

#include <cmath>

#include "kernels.hpp"

namespace gsbmdpo::diff {

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::Silu;
  if (name == "elu") return Activation::Elu;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh:
      return "tanh";
    case Activation::Silu:
      return "silu";
    case Activation::Elu:
      return "elu";
  }
  return "silu";
}

Mlp::Mlp(std::vector<std::size_t> widths, Activation act, Rng& rng, double output_scale)
    : widths_(std::move(widths)), act_(act) {
  if (widths_.size() < 2) throw ShapeError("mlp needs at least input and output widths");
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const std::size_t fan_in = widths_[l];
    const std::size_t fan_out = widths_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    const double scale = (l + 2 == widths_.size()) ? output_scale : 1.0;
    Array w = Array::matrix(fan_in, fan_out);
    for (auto& v : w.values()) v = scale * rng.uniform(-limit, limit);
    params_.emplace_back("W" + std::to_string(l), std::move(w));
    params_.emplace_back("b" + std::to_string(l), Array({fan_out}, 0.0));
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Parameter*> Mlp::parameter_ptrs() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

void Mlp::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Var Mlp::forward(Tape& tape, Var input) {
  Var h = input;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    h = tape.affine(h, tape.parameter(weight(l)), tape.parameter(bias(l)));
    if (l + 1 < num_layers()) {
      switch (act_) {
        case Activation::Tanh:
          h = tape.tanh(h);
          break;
        case Activation::Silu:
          h = tape.silu(h);
          break;
        case Activation::Elu:
          h = tape.elu(h);
          break;
      }
    }
  }
  return h;
}

Array Mlp::evaluate(const Array& input) const {
  if (input.cols() != input_width()) {
    throw ShapeError("mlp input width " + std::to_string(input.cols()) + ", expected " +
                     std::to_string(input_width()));
  }
  Array h = input.rank() == 2 ? input : input.reshaped({1, input.size()});
  for (std::size_t l = 0; l < num_layers(); ++l) {
    h = kernels::affine(h, weight(l).value, bias(l).value);
    if (l + 1 < num_layers()) {
      for (auto& v : h.values()) {
        switch (act_) {
          case Activation::Tanh:
            v = std::tanh(v);
            break;
          case Activation::Silu:
            v = kernels::silu(v);
            break;
          case Activation::Elu:
            v = kernels::elu(v);
            break;
        }
      }
    }
  }
  return h;
}

Var forward_mlp(Tape& tape, Mlp& net, const Array& input) {
  if (input.cols() != net.input_width()) {
    throw ShapeError("forward_mlp: input width " + std::to_string(input.cols()) +
                     ", expected " + std::to_string(net.input_width()));
  }
  Array x = input.rank() == 2 ? input : input.reshaped({1, input.size()});
  Var out = net.forward(tape, tape.constant(std::move(x)));
  if (!out.value().all_finite()) throw NumericError("forward_mlp: non-finite output");
  return out;
}

}  // namespace gsbmdpo::diff
