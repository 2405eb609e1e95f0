#pragma once

#include <cmath>

#include "gsbmdpo/array.hpp"

// Shared numeric kernels so taped and untaped evaluation agree bit for bit.
namespace gsbmdpo::diff::kernels {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

// y = x * w + b for x [n,k], w [k,m], b [m].
Array affine(const Array& x, const Array& w, const Array& b);

}  // namespace gsbmdpo::diff::kernels
