#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsbmdpo/trainer.hpp"

namespace gsbmdpo::config {

// Error raised for unknown keys, type mismatches and constraint violations.
// The message always starts with the offending key path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  train::TrainConfig train;
  std::filesystem::path out_dir = "runs";
  std::string ablation;  // free-form tag recorded with the run
};

// Every TrainConfig key, in declaration order.
const std::vector<std::string>& train_keys();
// snake_case -> kebab-case.
std::string kebab(const std::string& key);

nlohmann::json to_json(const train::TrainConfig& cfg);
// Starts from defaults; rejects unknown keys; validates the result.
train::TrainConfig from_json(const nlohmann::json& j);
// Merges the keys of j into cfg without validating.
void merge(train::TrainConfig& cfg, const nlohmann::json& j, const std::string& path = "");

nlohmann::json to_json(const RunConfig& cfg);

// Parses a textual override (as given on a command line) for `key` into the
// JSON value its field expects.
nlohmann::json parse_override(const std::string& key, const std::string& text);

// defaults < file < overrides. out_dir defaults to $RUN_OUT_DIR, then "runs".
RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::map<std::string, std::string>& overrides = {});
RunConfig parse_config_json(const nlohmann::json& j,
                            const std::map<std::string, std::string>& overrides = {});

// config.json (effective config) and seed.json in dir.
void write_run_records(const std::filesystem::path& dir, const RunConfig& cfg);

}  // namespace gsbmdpo::config
