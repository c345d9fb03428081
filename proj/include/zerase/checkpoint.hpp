// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//   "ZERASECK" | u32 format_version | u64 header_bytes | JSON header |
//   raw little-endian f64 tensor data in header order | u64 FNV-1a of all
//   preceding bytes.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "zerase/model.hpp"

namespace zerase {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

class CorruptionError : public std::runtime_error {
 public:
  CorruptionError(const std::string& field, const std::string& what)
      : std::runtime_error("corrupt checkpoint (" + field + "): " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class CompatibilityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
// 16 hex digits of FNV-1a over the canonical JSON of the config.
std::string config_hash(const ModelConfig& cfg);
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

struct LoadedModel {
  SingleStreamModel model;
  nlohmann::json metadata;
};

struct LoadedLora {
  GatedLoRA lora;
  std::string base_config_hash;
  nlohmann::json metadata;
};

void save_model(const std::filesystem::path& path, const SingleStreamModel& model,
                const nlohmann::json& metadata = nlohmann::json::object());
LoadedModel load_model(const std::filesystem::path& path);

void save_lora(const std::filesystem::path& path, const GatedLoRA& lora, const ModelConfig& base,
               const nlohmann::json& metadata = nlohmann::json::object());
// Throws CompatibilityError unless the stored base hash equals config_hash(base).
LoadedLora load_lora(const std::filesystem::path& path, const ModelConfig& base);
// Reads without a compatibility check.
LoadedLora load_lora_unchecked(const std::filesystem::path& path);

}  // namespace zerase
