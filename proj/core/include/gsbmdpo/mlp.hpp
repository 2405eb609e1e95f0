#pragma once

#include <string>
#include <vector>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/rng.hpp"
#include "gsbmdpo/tape.hpp"

namespace gsbmdpo::diff {

enum class Activation { Tanh, Silu, Elu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Fully connected network. Layer i maps widths[i] -> widths[i+1]; the hidden
// activation is applied after every layer but the last.
class Mlp {
 public:
  Mlp() = default;
  // Glorot-uniform weights, zero biases. The final layer's weights are
  // multiplied by output_scale.
  Mlp(std::vector<std::size_t> widths, Activation act, Rng& rng, double output_scale = 1.0);

  const std::vector<std::size_t>& widths() const { return widths_; }
  Activation activation() const { return act_; }
  std::size_t input_width() const { return widths_.front(); }
  std::size_t output_width() const { return widths_.back(); }
  std::size_t num_layers() const { return widths_.size() - 1; }
  std::size_t parameter_count() const;

  Parameter& weight(std::size_t layer) { return params_[2 * layer]; }
  Parameter& bias(std::size_t layer) { return params_[2 * layer + 1]; }
  const Parameter& weight(std::size_t layer) const { return params_[2 * layer]; }
  const Parameter& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

  // Declaration order: W0, b0, W1, b1, ...
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter*> parameter_ptrs();
  void zero_grad();

  // Records every primitive on the tape.
  Var forward(Tape& tape, Var input);
  // Same arithmetic without recording.
  Array evaluate(const Array& input) const;

 private:
  std::vector<std::size_t> widths_;
  Activation act_ = Activation::Silu;
  std::vector<Parameter> params_;
};

// Taped forward pass with shape and finiteness checks.
Var forward_mlp(Tape& tape, Mlp& net, const Array& input);

}  // namespace gsbmdpo::diff
