#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "vapipe/core.hpp"

namespace vapipe {

inline constexpr std::string_view kVersion = "0.1.0";

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "' for hashing");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return sha256_hex(buffer.str());
}

// Every CLI output directory gets one of these: enough to re-run the command
// bit-identically (modulo live LLM calls).
inline void write_run_manifest(const std::string& out_dir, const std::string& command,
                               std::uint64_t seed, const std::vector<std::string>& input_paths,
                               const nlohmann::json& config) {
  nlohmann::json manifest;
  manifest["command"] = command;
  manifest["seed"] = seed;
  manifest["version"] = std::string(kVersion);
  manifest["config"] = config;
  nlohmann::json inputs = nlohmann::json::object();
  for (const auto& path : input_paths) inputs[path] = sha256_file(path);
  manifest["inputs"] = inputs;
  std::filesystem::create_directories(out_dir);
  const std::string path = (std::filesystem::path(out_dir) / "run_manifest.json").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << manifest.dump(2) << '\n';
}

}  // namespace vapipe
