#pragma once

// Interaction-log ingestion, vocabularies, leave-one-out splits, negative
// sampling and the textual rendering of recommendation features.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace llmcf::data {

inline constexpr int kMaxHistory = 10;
inline constexpr int kMinPositives = 3;
inline constexpr int kOov = 0;

using AttrMap = std::map<std::string, std::string>;

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  int label = 1;
  AttrMap user_attrs;
  AttrMap item_attrs;
};

// Inclusive bounds in epoch seconds.
struct TimeRange {
  std::optional<std::int64_t> begin;
  std::optional<std::int64_t> end;
  bool contains(std::int64_t ts) const {
    return (!begin || ts >= *begin) && (!end || ts <= *end);
  }
};

// "YYYY-MM-DD" -> epoch seconds at 00:00:00 UTC. Throws DataError on bad input.
std::int64_t parse_date(std::string_view ymd);
// Inclusive range covering whole days [from 00:00:00, to 23:59:59].
TimeRange day_range(std::optional<std::string> from, std::optional<std::string> to);

struct LoadResult {
  std::vector<Interaction> interactions;  // sorted by (user_id, timestamp), stable
  std::size_t malformed = 0;
  std::size_t filtered_out = 0;
  std::vector<std::string> warnings;  // first few malformed-line diagnostics
};

// Parses one log record; throws DataError when the record is malformed.
Interaction parse_interaction(const nlohmann::json& j);
LoadResult load_interactions(const std::filesystem::path& path, const TimeRange& filter = {});

// Token -> dense index; index 0 is the out-of-vocabulary slot.
class TokenVocab {
 public:
  TokenVocab();
  int add(const std::string& token);
  int lookup(const std::string& token) const;
  const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct Vocab {
  TokenVocab users;
  TokenVocab items;
  std::vector<std::string> user_fields;  // sorted attribute keys
  std::vector<std::string> item_fields;
  std::vector<TokenVocab> user_attr_vocab;  // aligned with user_fields
  std::vector<TokenVocab> item_attr_vocab;  // aligned with item_fields
  std::vector<std::vector<int>> item_attrs;  // per item index; the OOV row is all zeros

  // Tokens are inserted in sorted order so indices do not depend on file order.
  static Vocab build(const std::vector<Interaction>& interactions);

  std::vector<int> encode_user_attrs(const AttrMap& attrs) const;
  std::vector<int> encode_item_attrs(const AttrMap& attrs) const;
  AttrMap decode_user_attrs(const std::vector<int>& idx) const;
  AttrMap decode_item_attrs(const std::vector<int>& idx) const;
  int num_items() const { return items.size(); }

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);
};

struct Example {
  std::int64_t id = -1;
  int user_index = kOov;
  std::vector<int> user_attr_indices;
  std::vector<int> history;  // oldest first, at most kMaxHistory
  int target_item_index = kOov;
  std::vector<int> target_attr_indices;
  std::int64_t timestamp = 0;
  int label = 1;
  std::string text;
};

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

struct SplitResult {
  DatasetSplit split;
  std::size_t users_kept = 0;
  std::size_t users_dropped = 0;
};

// Leave-one-out per user: last -> test, second-to-last -> valid, rest -> train.
// Users with fewer than kMinPositives interactions are dropped.
SplitResult build_splits(const std::vector<Interaction>& interactions, const Vocab& vocab);

// Adds one label-0 example per positive (same user, timestamp and history)
// whose item the user never interacted with, then canonicalizes order and ids.
void sample_negatives(DatasetSplit& split, const Vocab& vocab, std::uint64_t seed);

// Sorts every split by (user, timestamp, label desc, item) and renumbers ids
// consecutively across train, valid, test.
void canonicalize(DatasetSplit& split);

struct RenderOptions {
  bool mask_target = false;  // retrieval-task queries hide the target item
};

std::string render_text(const Example& example, const Vocab& vocab, const RenderOptions& opts = {});

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t reviews = 0;
  double sparsity_pct = 0.0;
};

DatasetStats compute_stats(const std::vector<Interaction>& interactions);
// Statistics over the positives that survived the user threshold.
DatasetStats compute_stats(const DatasetSplit& split);
nlohmann::json stats_to_json(const DatasetStats& s);

nlohmann::json example_to_json(const Example& e, const Vocab& vocab);
Example example_from_json(const nlohmann::json& j, const Vocab& vocab);

void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples, const Vocab& vocab);
std::vector<Example> read_examples(const std::filesystem::path& path, const Vocab& vocab);

// Directory layout: train.jsonl, valid.jsonl, test.jsonl, vocab.json.
void write_split_dir(const std::filesystem::path& dir, const DatasetSplit& split, const Vocab& vocab);
struct LoadedSplit {
  DatasetSplit split;
  Vocab vocab;
};
LoadedSplit read_split_dir(const std::filesystem::path& dir);

}  // namespace llmcf::data
