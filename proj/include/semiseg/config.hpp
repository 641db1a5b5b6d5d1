#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semiseg/train.hpp"

namespace semiseg {

/// Everything a training run depends on. Serialized as JSON with sections
/// "train", "variant", "augment", "feature_perturb", "model".
struct RunConfig {
  TrainConfig train;
  AugPipelineConfig aug;
  FeaturePerturbSpec fp;
  TinyNetConfig layout;

  void validate() const;
};

/// Canonical form: keys sorted, no whitespace.
std::string to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

/// FNV-1a of the canonical JSON, so key order in the source file is irrelevant.
std::uint64_t config_hash(const RunConfig& cfg);
std::string hex_digest(std::uint64_t h);

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;
  std::vector<std::string> command_line;
  std::string started_at;  // ISO-8601 UTC
  std::string finished_at;
  std::string effective_config;  // canonical JSON
  std::string status;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);
std::string utc_timestamp();

}  // namespace semiseg
