#include "gsbmdpo/config.hpp"

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace gsbmdpo::config {
namespace {

using nlohmann::json;

std::string where(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

template <class T>
T expect(const json& v, const std::string& key);

template <>
double expect<double>(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number, got " + v.dump());
  return v.get<double>();
}

template <>
std::size_t expect<std::size_t>(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer()) {
    if (v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
    throw ConfigError(key + ": expected a non-negative integer, got " + v.dump());
  }
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == static_cast<double>(static_cast<std::size_t>(d))) {
      return static_cast<std::size_t>(d);
    }
  }
  throw ConfigError(key + ": expected a non-negative integer, got " + v.dump());
}

template <>
bool expect<bool>(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false, got " + v.dump());
  return v.get<bool>();
}

template <>
std::string expect<std::string>(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string, got " + v.dump());
  return v.get<std::string>();
}

template <>
std::vector<std::size_t> expect<std::vector<std::size_t>>(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key + ": expected an array of integers, got " + v.dump());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(expect<std::size_t>(v[i], key + "[" + std::to_string(i) + "]"));
  }
  return out;
}

enum class Kind { Real, Count, Seed, Flag, Text, Widths };

struct Field {
  std::string key;
  Kind kind;
  std::function<json(const train::TrainConfig&)> get;
  std::function<void(train::TrainConfig&, const json&, const std::string&)> set;
};

template <class T>
Field field(std::string key, Kind kind, T train::TrainConfig::*member) {
  return Field{std::move(key), kind,
               [member](const train::TrainConfig& c) { return json(c.*member); },
               [member](train::TrainConfig& c, const json& v, const std::string& path) {
                 c.*member = expect<T>(v, path);
               }};
}

const std::vector<Field>& fields() {
  using C = train::TrainConfig;
  static const std::vector<Field> f{
      field("algo", Kind::Text, &C::algo),
      field("env", Kind::Text, &C::env),
      field("seed", Kind::Seed, &C::seed),
      field("total_env_steps", Kind::Count, &C::total_env_steps),
      field("num_envs", Kind::Count, &C::num_envs),
      field("rollout_length", Kind::Count, &C::rollout_length),
      field("epochs", Kind::Count, &C::epochs),
      field("minibatches", Kind::Count, &C::minibatches),
      field("gamma", Kind::Real, &C::gamma),
      field("gae_lambda", Kind::Real, &C::gae_lambda),
      field("normalize_observations", Kind::Flag, &C::normalize_observations),
      field("normalize_advantages", Kind::Flag, &C::normalize_advantages),
      field("grad_clip_norm", Kind::Real, &C::grad_clip_norm),
      field("kl_coef", Kind::Real, &C::kl_coef),
      field("reference_mix", Kind::Real, &C::reference_mix),
      field("c_step", Kind::Real, &C::c_step),
      field("c_path", Kind::Real, &C::c_path),
      field("clip_ratios", Kind::Flag, &C::clip_ratios),
      field("actor_lr", Kind::Real, &C::actor_lr),
      field("critic_lr", Kind::Real, &C::critic_lr),
      field("cosine_schedule", Kind::Flag, &C::cosine_schedule),
      field("generation_steps", Kind::Count, &C::generation_steps),
      field("sigma_schedule", Kind::Text, &C::sigma_schedule),
      field("sigma_max", Kind::Real, &C::sigma_max),
      field("sigma_min", Kind::Real, &C::sigma_min),
      field("sigma_increasing", Kind::Flag, &C::sigma_increasing),
      field("time_embed_dim", Kind::Count, &C::time_embed_dim),
      field("output_scale", Kind::Real, &C::output_scale),
      field("actor_hidden", Kind::Widths, &C::actor_hidden),
      field("actor_activation", Kind::Text, &C::actor_activation),
      field("critic_hidden", Kind::Widths, &C::critic_hidden),
      field("critic_activation", Kind::Text, &C::critic_activation),
      field("ppo_clip", Kind::Real, &C::ppo_clip),
      field("ppo_init_log_std", Kind::Real, &C::ppo_init_log_std),
      field("eval_interval", Kind::Count, &C::eval_interval),
      field("eval_episodes", Kind::Count, &C::eval_episodes),
      field("deterministic_eval", Kind::Flag, &C::deterministic_eval),
      field("checkpoint_interval", Kind::Count, &C::checkpoint_interval),
  };
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

train::TrainConfig validated(train::TrainConfig cfg, const std::string& path) {
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path.empty() ? e.what() : path + "." + e.what());
  }
  return cfg;
}

}  // namespace

const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

std::string kebab(const std::string& key) {
  std::string out = key;
  for (auto& c : out) {
    if (c == '_') c = '-';
  }
  return out;
}

json to_json(const train::TrainConfig& cfg) {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(cfg);
  return j;
}

void merge(train::TrainConfig& cfg, const json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    const Field* f = find_field(it.key());
    if (!f) throw ConfigError(where(path, it.key()) + ": unknown key");
    f->set(cfg, it.value(), where(path, it.key()));
  }
}

train::TrainConfig from_json(const json& j) {
  train::TrainConfig cfg;
  merge(cfg, j);
  return validated(std::move(cfg), "");
}

json to_json(const RunConfig& cfg) {
  json j = to_json(cfg.train);
  j["out_dir"] = cfg.out_dir.string();
  j["ablation"] = cfg.ablation;
  return j;
}

json parse_override(const std::string& key, const std::string& text) {
  if (key == "out_dir" || key == "ablation") return text;
  const Field* f = find_field(key);
  if (!f) throw ConfigError(key + ": unknown key");
  auto number = [&](const std::string& s) {
    try {
      return json::parse(s);
    } catch (const json::parse_error&) {
      throw ConfigError(key + ": cannot parse '" + s + "' as a number");
    }
  };
  switch (f->kind) {
    case Kind::Text:
      return text;
    case Kind::Flag:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw ConfigError(key + ": expected true or false, got '" + text + "'");
    case Kind::Widths: {
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) arr.push_back(number(item));
      return arr;
    }
    case Kind::Real:
    case Kind::Count:
    case Kind::Seed:
      return number(text);
  }
  return text;
}

RunConfig parse_config_json(const json& j, const std::map<std::string, std::string>& overrides) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object at the top level");
  RunConfig run;
  if (const char* env = std::getenv("RUN_OUT_DIR"); env && *env) run.out_dir = env;
  json train_part = json::object();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "out_dir") {
      run.out_dir = expect<std::string>(it.value(), "out_dir");
    } else if (it.key() == "ablation") {
      run.ablation = expect<std::string>(it.value(), "ablation");
    } else {
      train_part[it.key()] = it.value();
    }
  }
  merge(run.train, train_part);
  for (const auto& [key, text] : overrides) {
    if (key == "out_dir") {
      run.out_dir = text;
    } else if (key == "ablation") {
      run.ablation = text;
    } else {
      merge(run.train, json{{key, parse_override(key, text)}});
    }
  }
  run.train = validated(std::move(run.train), "");
  return run;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::map<std::string, std::string>& overrides) {
  json j = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config: cannot open " + file->string());
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + file->string() + " is not valid JSON: " + e.what());
    }
  }
  return parse_config_json(j, overrides);
}

void write_run_records(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.json");
    out << to_json(cfg).dump(2) << '\n';
  }
  std::ofstream out(dir / "seed.json");
  out << json{{"seed", cfg.train.seed},
              {"algo", cfg.train.algo},
              {"env", cfg.train.env},
              {"replay", "gsbmdpo train --config " + (dir / "config.json").string()}}
             .dump(2)
      << '\n';
}

}  // namespace gsbmdpo::config
