#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "gmx/backbone.hpp"

namespace gmx {

// Parsed contents of a JSON config file. `seed` stays optional here so that
// the CLI can layer its precedence rules (GMX_SEED env > --seed flag > file
// value > default) without losing track of what the file actually said.
struct FileConfig {
    ModelConfig model;
    std::optional<uint64_t> seed;
    std::optional<std::string> preset;  // set when the file named a preset
};

// Strict parser: unknown keys are rejected with their path, `preset` and
// `stages` are mutually exclusive, schema_version must equal 1.
FileConfig parse_config_text(const std::string& text);
FileConfig load_config_file(const std::string& path);

// Emits a config JSON (explicit stages form) understood by parse_config_text.
std::string config_to_json(const ModelConfig& cfg, std::optional<uint64_t> seed);

// GMX_SEED env var > flag > file > fallback. flag/file pass nullopt when unset.
uint64_t resolve_seed(std::optional<uint64_t> flag_seed,
                      std::optional<uint64_t> file_seed, uint64_t fallback);

}  // namespace gmx
