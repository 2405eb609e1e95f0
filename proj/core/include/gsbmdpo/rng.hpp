#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace gsbmdpo {

// Seeded stream of uniform and standard-normal draws whose complete state can
// be saved and restored as text.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream derived from (seed, index).
  static Rng stream(std::uint64_t seed, std::uint64_t index);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace gsbmdpo
