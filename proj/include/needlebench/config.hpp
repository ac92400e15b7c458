#pragma once

#include <string>

#include <json.hpp>

namespace needlebench::config {

/// Every tunable of an experiment, grouped by module.
nlohmann::json defaults();

/// Overrides applied by `pipeline --quick`.
nlohmann::json quick_overrides();

/// defaults < file < flags, merged as JSON merge patches.
nlohmann::json layered(const nlohmann::json& file, const nlohmann::json& flags);

nlohmann::json load_file(const std::string& path);

/// FNV-1a over the canonical (sorted-key) serialization, as 16 hex digits.
std::string hash(const nlohmann::json& cfg);

/// {version, seed, config_hash} embedded in every output file.
nlohmann::json stamp(const nlohmann::json& cfg);

}  // namespace needlebench::config
