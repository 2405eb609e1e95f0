#include "gsbmdpo/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace gsbmdpo {
namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

void write_u64(std::ostream& os, std::uint64_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  write_u64(os, bits);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return to_little(v);
}

}  // namespace

void Checkpoint::put(const std::string& name, Array value) {
  auto it = index_.find(name);
  if (it != index_.end()) {
    tensors_[it->second].second = std::move(value);
    return;
  }
  index_[name] = tensors_.size();
  tensors_.emplace_back(name, std::move(value));
}

const Array& Checkpoint::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("checkpoint: missing tensor '" + name + "'");
  return tensors_[it->second].second;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, value] : tensors_) {
    header["tensors"].push_back({{"name", name}, {"shape", value.shape()}});
  }
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& entry : tensors_) {
      for (double v : entry.second.values()) write_f64(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::uint64_t len = read_u64(is);
  if (len > (1ull << 32)) throw std::runtime_error("checkpoint: implausible header length");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    auto shape = t.at("shape").get<std::vector<std::size_t>>();
    Array a(shape);
    for (auto& v : a.values()) v = std::bit_cast<double>(read_u64(is));
    ckpt.put(t.at("name").get<std::string>(), std::move(a));
  }
  return ckpt;
}

void Checkpoint::put_mlp(const std::string& prefix, const diff::Mlp& net) {
  meta["networks"][prefix] = {{"widths", net.widths()},
                              {"activation", diff::to_string(net.activation())}};
  for (const auto& p : net.parameters()) put(prefix + "/" + p.name, p.value);
}

void Checkpoint::load_mlp(const std::string& prefix, diff::Mlp& net) const {
  for (auto& p : net.parameters()) {
    const Array& v = get(prefix + "/" + p.name);
    if (!v.same_shape(p.value)) {
      throw ShapeError("checkpoint: shape mismatch for " + prefix + "/" + p.name);
    }
    p.value = v;
    p.grad = Array(v.shape(), 0.0);
  }
}

void Checkpoint::put_adam(const std::string& prefix, const diff::Adam& opt) {
  meta["optimizers"][prefix] = {{"steps", opt.steps()}};
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    put(prefix + "/m" + std::to_string(i), opt.first_moments()[i]);
    put(prefix + "/v" + std::to_string(i), opt.second_moments()[i]);
  }
}

void Checkpoint::load_adam(const std::string& prefix, diff::Adam& opt) const {
  opt.set_steps(meta.at("optimizers").at(prefix).at("steps").get<std::int64_t>());
  for (std::size_t i = 0; i < opt.first_moments().size(); ++i) {
    opt.first_moments()[i] = get(prefix + "/m" + std::to_string(i));
    opt.second_moments()[i] = get(prefix + "/v" + std::to_string(i));
  }
}

diff::Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& info = ckpt.meta.at("networks").at(prefix);
  Rng rng(0);
  diff::Mlp net(info.at("widths").get<std::vector<std::size_t>>(),
                diff::activation_from_string(info.at("activation").get<std::string>()), rng);
  ckpt.load_mlp(prefix, net);
  return net;
}

}  // namespace gsbmdpo
