#include "llmcf/pipeline.hpp"

#include "llmcf/rng.hpp"

namespace llmcf::pipeline {

PreparedData prepare_data(const std::vector<data::Interaction>& log, std::uint64_t seed) {
  PreparedData p;
  p.vocab = data::Vocab::build(log);
  data::SplitResult sr = data::build_splits(log, p.vocab);
  p.users_dropped = sr.users_dropped;
  p.split = std::move(sr.split);
  p.stats = data::compute_stats(p.split);
  data::sample_negatives(p.split, p.vocab, derive_seed(seed, "negatives"));
  return p;
}

StoreBuild build_records(const std::vector<data::Example>& train, double ratio, std::uint64_t seed,
                         const text::TextEncoder& encoder, const cot::CotProvider& provider) {
  StoreBuild b;
  const auto subset = cot::sample_subset(train, ratio, derive_seed(seed, "store"));
  b.records = cot::make_records(subset, encoder, provider);
  for (const auto& r : b.records) (r.label == 1 ? b.positives : b.negatives)++;
  return b;
}

}  // namespace llmcf::pipeline
