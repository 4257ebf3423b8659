#include "cfgen/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "cfgen/errors.hpp"

namespace cfgen::run {

namespace {

struct Hasher {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};

  Hasher() {
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 init failed");
  }
  void update(const char* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx.get(), data, n) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) throw std::runtime_error("sha256 final failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }
};

ArtifactDigest digest(const std::string& role, const std::filesystem::path& path) {
  return {role, path.string(), sha256_file(path)};
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Hasher h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  Hasher h;
  std::array<char, 1 << 16> buf{};
  while (is) {
    is.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h.hex();
}

void RunManifest::add_input(const std::string& role, const std::filesystem::path& path) {
  inputs.push_back(digest(role, path));
}

void RunManifest::add_output(const std::string& role, const std::filesystem::path& path) {
  outputs.push_back(digest(role, path));
}

void to_json(nlohmann::json& j, const ArtifactDigest& a) {
  j = nlohmann::json{{"role", a.role}, {"path", a.path}, {"sha256", a.sha256}};
}

void from_json(const nlohmann::json& j, ArtifactDigest& a) {
  a.role = j.at("role").get<std::string>();
  a.path = j.at("path").get<std::string>();
  a.sha256 = j.at("sha256").get<std::string>();
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"command", m.command},   {"config", m.config},         {"seeds", m.seeds},
                     {"inputs", m.inputs},     {"outputs", m.outputs},       {"versions", m.versions},
                     {"started_at", m.started_at}, {"wall_seconds", m.wall_seconds}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seeds = j.at("seeds");
    m.inputs = j.at("inputs").get<std::vector<ArtifactDigest>>();
    m.outputs = j.at("outputs").get<std::vector<ArtifactDigest>>();
    m.versions = j.value("versions", nlohmann::json::object());
    m.started_at = j.value("started_at", "");
    m.wall_seconds = j.value("wall_seconds", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed run manifest: ") + e.what());
  }
}

nlohmann::json version_info() {
  return {{"cfgen", kVersion},
          {"dataset_format", 1},
          {"agent_format", 1},
          {"vae_format", 1},
          {"report_format", 1},
          {"compiler", __VERSION__}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << nlohmann::json(manifest).dump(2) << '\n';
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not JSON: " + e.what());
  }
  return j.get<RunManifest>();
}

std::vector<std::string> verify_outputs(const RunManifest& manifest) {
  std::vector<std::string> bad;
  for (const auto& a : manifest.outputs) {
    std::error_code ec;
    if (!std::filesystem::exists(a.path, ec) || sha256_file(a.path) != a.sha256) bad.push_back(a.role);
  }
  return bad;
}

}  // namespace cfgen::run
