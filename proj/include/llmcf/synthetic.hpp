#pragma once

// Synthetic implicit-feedback logs with latent topics. Items belong to one
// topic; the topic word appears in the title while the category only reveals
// a coarse topic group. Users prefer two topics and pick items within a topic
// by Zipf popularity.

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "llmcf/dataio.hpp"

namespace llmcf::synth {

struct SyntheticConfig {
  int users = 2000;
  int items = 500;
  int topics = 12;
  int min_interactions = 4;
  int max_interactions = 9;
  double preference = 0.85;  // probability an interaction comes from a preferred topic
  double zipf = 0.8;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

std::vector<data::Interaction> generate(const SyntheticConfig& cfg);

// One JSON object per line in the interaction-log format.
void write_log(const std::filesystem::path& path, const std::vector<data::Interaction>& log);

}  // namespace llmcf::synth
