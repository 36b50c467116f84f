#pragma once

// In-context CoT dataset: sampling, CoT providers, the similarity index and
// balanced, leakage-free example retrieval.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "llmcf/dataio.hpp"
#include "llmcf/textenc.hpp"

namespace llmcf::cot {

struct CoTRecord {
  std::int64_t id = -1;
  data::Example example;
  int label = 0;
  std::optional<std::string> cot_text;
  text::TextEmbedding cot_embedding;
  text::TextEmbedding key_embedding;
  std::int64_t timestamp = 0;
};

struct RetrievalConfig {
  int k = 4;
  bool balance = true;
  bool anti_leakage = true;
  bool approximate = false;

  // Throws UsageError when k is negative, or odd with balance on.
  void validate() const;
};

// Uniform sample without replacement of round(ratio * N) examples, returned
// in id order. Throws UsageError for ratio outside (0, 1], DataError if empty.
std::vector<data::Example> sample_subset(std::span<const data::Example> train, double ratio, std::uint64_t seed);

struct CotOutput {
  std::optional<std::string> text;
  text::TextEmbedding embedding;
};

class CotProvider {
 public:
  virtual ~CotProvider() = default;
  virtual CotOutput generate(const data::Example& example, int label) const = 0;
  virtual nlohmann::json describe() const = 0;
};

// normalize((1 - lambda) * hash(features) + lambda * label_direction + noise).
// The noise draw is keyed by example id, so it is label-independent.
class SyntheticCotProvider final : public CotProvider {
 public:
  SyntheticCotProvider(std::uint64_t seed, double lambda, int dim = text::kDefaultDim, double noise = 0.1);
  CotOutput generate(const data::Example& example, int label) const override;
  nlohmann::json describe() const override;

  const std::vector<double>& label_direction(int label) const { return label_dirs_.at(static_cast<std::size_t>(label)); }

 private:
  std::uint64_t seed_;
  double lambda_;
  int dim_;
  double noise_;
  text::HashingEncoder features_;
  std::vector<std::vector<double>> label_dirs_;
};

// Precomputed CoT embeddings (and optional texts) keyed by decimal example id.
class FileCotProvider final : public CotProvider {
 public:
  FileCotProvider(text::EmbeddingPack embeddings, std::unordered_map<std::string, std::string> texts = {},
                  std::string source = {});
  CotOutput generate(const data::Example& example, int label) const override;
  nlohmann::json describe() const override;

 private:
  text::EmbeddingPack embeddings_;
  std::unordered_map<std::string, std::string> texts_;
  std::string source_;
};

// Reads {"id": <example id>, "cot_text": "..."} lines.
std::unordered_map<std::string, std::string> read_cot_texts(const std::filesystem::path& path);

// CoT prompt asset with {features} and {label} placeholders filled in.
std::string render_cot_prompt(const std::string& prompt_template, const std::string& features_text, int label);

// One record per sampled example; ids are assigned 0..M-1 in input order.
std::vector<CoTRecord> make_records(std::span<const data::Example> subset, const text::TextEncoder& encoder,
                                    const CotProvider& provider);

struct StoreOptions {
  bool build_ivf = false;  // enables RetrievalConfig::approximate
  int nlist = 0;           // 0 -> about sqrt(M)
  int nprobe = 0;          // 0 -> about nlist / 4
  std::uint64_t seed = 0;
};

struct Retrieved {
  std::vector<const CoTRecord*> records;  // ascending similarity, ties by ascending id
  std::vector<double> similarities;       // aligned with records
  bool imbalanced = false;                // a class shortfall was filled from the other class
  std::size_t scanned = 0;                // candidates scored
};

class CoTStore {
 public:
  static CoTStore build(std::vector<CoTRecord> records, const StoreOptions& opts = {});

  // exclude_example_id drops the query's own record from the candidates.
  Retrieved retrieve(const text::TextEmbedding& query, std::int64_t query_timestamp, const RetrievalConfig& cfg,
                     std::optional<std::int64_t> exclude_example_id = std::nullopt) const;

  const std::vector<CoTRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  int dim() const { return dim_; }
  bool has_ivf() const { return !lists_.empty(); }
  int nlist() const { return static_cast<int>(lists_.size()); }
  int nprobe() const { return nprobe_; }

 private:
  std::vector<CoTRecord> records_;
  int dim_ = 0;
  std::vector<text::TextEmbedding> centroids_;
  std::vector<std::vector<std::size_t>> lists_;
  int nprobe_ = 0;
};

// Directory layout: store.jsonl, keys.lcfe, cots.lcfe, meta.json.
void write_store_dir(const std::filesystem::path& dir, const std::vector<CoTRecord>& records,
                     const data::Vocab& vocab, const nlohmann::json& meta);

struct LoadedStore {
  std::vector<CoTRecord> records;
  nlohmann::json meta;
};
// Resolves example_id against the train split and checks user/item/timestamp/label agree.
LoadedStore read_store_dir(const std::filesystem::path& dir, std::span<const data::Example> train,
                           const data::Vocab& vocab);

}  // namespace llmcf::cot
