#include "gsbmdpo/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace gsbmdpo {

Rng Rng::stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x9e3779b9u};
  Rng r;
  r.engine_.seed(seq);
  return r;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_ << ' ' << uniform_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_ >> normal_ >> uniform_;
  if (is.fail()) throw std::invalid_argument("malformed rng state");
}

}  // namespace gsbmdpo
