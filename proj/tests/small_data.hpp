#pragma once

// A small synthetic dataset with a CoT store, sized for unit tests.

#include <memory>

#include "llmcf/pipeline.hpp"
#include "llmcf/synthetic.hpp"
#include "llmcf/training.hpp"

namespace llmcf::testing {

struct SmallData {
  pipeline::PreparedData data;
  std::unique_ptr<text::HashingEncoder> encoder;
  cot::CoTStore store;

  train::TrainData train_data() const { return {&data.split, &data.vocab, &store, encoder.get()}; }
  FeatureSpace space() const { return FeatureSpace::from_vocab(data.vocab); }
};

inline SmallData small_data(std::uint64_t seed, int users = 60, int items = 40, int d_text = 16) {
  synth::SyntheticConfig sc;
  sc.users = users;
  sc.items = items;
  sc.topics = 4;
  sc.seed = seed;
  SmallData s;
  s.data = pipeline::prepare_data(synth::generate(sc), seed);
  s.encoder = std::make_unique<text::HashingEncoder>(seed, d_text);
  const cot::SyntheticCotProvider provider(seed, 0.7, d_text);
  auto built = pipeline::build_records(s.data.split.train, 0.3, seed, *s.encoder, provider);
  s.store = cot::CoTStore::build(std::move(built.records));
  return s;
}

// Small model dimensions matching small_data's text width.
inline train::TrainConfig small_config(std::uint64_t seed, train::Variant variant = train::Variant::kFull) {
  train::TrainConfig c;
  c.seed = seed;
  c.variant = variant;
  c.batch_size = 32;
  c.max_epochs = 2;
  c.dim = 8;
  c.k = 4;
  c.ict.d = 8;
  c.ict.k_max = 4;
  c.ict.d_text = 16;
  return c;
}

}  // namespace llmcf::testing
