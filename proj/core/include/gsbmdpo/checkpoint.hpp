#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsbmdpo/array.hpp"
#include "gsbmdpo/mlp.hpp"
#include "gsbmdpo/optim.hpp"

namespace gsbmdpo {

// On-disk layout:
//   u64 little-endian header length L
//   L bytes of UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
//   raw little-endian f64 values of every tensor, in header order
class Checkpoint {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, Array value);
  const Array& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Array>>& tensors() const { return tensors_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  // Network parameters under "<prefix>/<param name>"; architecture in meta.
  void put_mlp(const std::string& prefix, const diff::Mlp& net);
  void load_mlp(const std::string& prefix, diff::Mlp& net) const;
  void put_adam(const std::string& prefix, const diff::Adam& opt);
  void load_adam(const std::string& prefix, diff::Adam& opt) const;

 private:
  std::vector<std::pair<std::string, Array>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Rebuilds an Mlp whose architecture was stored by put_mlp.
diff::Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace gsbmdpo
