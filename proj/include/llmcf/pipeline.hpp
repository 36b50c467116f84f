#pragma once

// End-to-end helpers shared by the command-line tool and the acceptance suite.

#include <cstdint>
#include <vector>

#include "llmcf/cotstore.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/textenc.hpp"

namespace llmcf::pipeline {

struct PreparedData {
  data::DatasetSplit split;
  data::Vocab vocab;
  data::DatasetStats stats;
  std::size_t users_dropped = 0;
};

// Vocab, leave-one-out splits and 1:1 negatives seeded from derive_seed(seed, "negatives").
PreparedData prepare_data(const std::vector<data::Interaction>& log, std::uint64_t seed);

struct StoreBuild {
  std::vector<cot::CoTRecord> records;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Samples round(ratio * N) train examples with derive_seed(seed, "store") and runs the provider.
StoreBuild build_records(const std::vector<data::Example>& train, double ratio, std::uint64_t seed,
                         const text::TextEncoder& encoder, const cot::CotProvider& provider);

}  // namespace llmcf::pipeline
