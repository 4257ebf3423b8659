#pragma once

// Run manifests: what command ran, with which config and seeds, and the
// SHA-256 of every file it read or wrote.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace cfgen::run {

inline constexpr const char* kVersion = "0.1.0";

std::string sha256_hex(std::string_view bytes);
/// Throws std::runtime_error when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

struct ArtifactDigest {
  std::string role;
  std::string path;
  std::string sha256;
  friend bool operator==(const ArtifactDigest&, const ArtifactDigest&) = default;
};

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<ArtifactDigest> inputs;
  std::vector<ArtifactDigest> outputs;
  nlohmann::json versions = nlohmann::json::object();
  std::string started_at;
  double wall_seconds = 0.0;

  void add_input(const std::string& role, const std::filesystem::path& path);
  void add_output(const std::string& role, const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const ArtifactDigest& a);
void from_json(const nlohmann::json& j, ArtifactDigest& a);
void to_json(nlohmann::json& j, const RunManifest& m);
/// Throws FormatError when a required field is missing.
void from_json(const nlohmann::json& j, RunManifest& m);

/// Library version and on-disk format versions.
nlohmann::json version_info();
/// UTC, ISO 8601.
std::string utc_timestamp();

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

/// Recomputes every output digest; returns the roles whose files changed or vanished.
std::vector<std::string> verify_outputs(const RunManifest& manifest);

}  // namespace cfgen::run
