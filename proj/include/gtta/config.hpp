#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "gtta/harness.hpp"

namespace gtta::config {

/// Everything a TOML config can set. Unset keys keep their defaults.
struct RunConfig {
  harness::ExperimentConfig experiment;
  std::optional<std::filesystem::path> data_dir;  // else the built-in benchmark
};

/// Flat sections [train], [tpd], [baselines], [experiment], [data]. Unknown
/// sections or keys, wrong types and out-of-range values raise
/// ConfigParseError.
RunConfig parse_config(std::string_view toml_text);
RunConfig load_config(const std::filesystem::path& path);

/// The defaults as a config file.
std::string default_config_toml();

}  // namespace gtta::config
