#pragma once

// Parameter checkpoints.
//
// Byte layout:
//   "LCFCKPT1\n"                       9-byte magic
//   uint64 little-endian header length
//   UTF-8 JSON header {"config": ..., "tensors": [{"name", "rows", "cols", "offset"}]}
//   float64 little-endian tensor data, row-major; offsets are in doubles from
//   the start of the data block

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "llmcf/autograd.hpp"

namespace llmcf::ckpt {

inline constexpr char kMagic[] = "LCFCKPT1\n";

std::string serialize(const ag::ParamSet& params, const nlohmann::json& config);
void write(const std::filesystem::path& path, const ag::ParamSet& params, const nlohmann::json& config);

struct Checkpoint {
  nlohmann::json config;
  ag::ParamSet params;
};
Checkpoint deserialize(const std::string& bytes);
Checkpoint read(const std::filesystem::path& path);

// Copies every tensor into `into`; names and shapes must match exactly.
void load_into(const ag::ParamSet& from, ag::ParamSet& into);

// FNV-1a 64 of the file bytes as 16 hex digits.
std::string hash_bytes(const std::string& bytes);
std::string hash_file(const std::filesystem::path& path);

}  // namespace llmcf::ckpt
