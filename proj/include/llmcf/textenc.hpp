#pragma once

// Text encoders producing unit-norm embeddings, and the embedding-pack file
// format shared by file-backed encoders and CoT providers.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace llmcf::text {

inline constexpr int kDefaultDim = 64;

struct TextEmbedding {
  std::vector<float> values;
  int dim() const { return static_cast<int>(values.size()); }
};

// L2-normalizes in double precision, then stores as float.
TextEmbedding normalized(const std::vector<double>& v);
TextEmbedding normalized(const std::vector<float>& v);

// Throws std::invalid_argument on dimension mismatch, NumericalError on a zero vector.
double cosine(const TextEmbedding& a, const TextEmbedding& b);

// Lowercased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextEmbedding encode(std::string_view text) const = 0;
  virtual int dim() const = 0;
  virtual nlohmann::json describe() const = 0;
};

// Seeded signed feature hashing of word tokens into `dim` buckets.
class HashingEncoder final : public TextEncoder {
 public:
  HashingEncoder(std::uint64_t seed, int dim = kDefaultDim);
  TextEmbedding encode(std::string_view text) const override;
  int dim() const override { return dim_; }
  nlohmann::json describe() const override;

  // Unnormalized signed bucket counts; exposed for providers that mix it.
  std::vector<double> raw(std::string_view text) const;

 private:
  std::uint64_t seed_;
  int dim_;
};

// Key -> row table; index order is insertion order.
class EmbeddingPack {
 public:
  explicit EmbeddingPack(int dim = kDefaultDim) : dim_(dim) {}

  void add(const std::string& key, std::vector<float> row);
  const std::vector<float>* find(const std::string& key) const;
  int dim() const { return dim_; }
  std::size_t size() const { return keys_.size(); }
  const std::string& key(std::size_t i) const { return keys_[i]; }
  const std::vector<float>& row(std::size_t i) const { return rows_[i]; }

 private:
  int dim_;
  std::vector<std::string> keys_;
  std::vector<std::vector<float>> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binary layout: ASCII header line "LCFE1 <dim> <count>\n", then per row a
// little-endian uint32 key length, the key bytes and <dim> little-endian float32.
void write_pack(const std::filesystem::path& path, const EmbeddingPack& pack);
// Text layout: header "LCFE1 <dim> <count> text\n", then "key\tv1 v2 ...\n" rows.
void write_pack_text(const std::filesystem::path& path, const EmbeddingPack& pack);
// Reads either layout, detected from the header line.
EmbeddingPack read_pack(const std::filesystem::path& path);

// Looks texts up verbatim in a pack; unknown keys are a DataError naming the key.
class TableEncoder final : public TextEncoder {
 public:
  TableEncoder(EmbeddingPack pack, std::string source = {});
  TextEmbedding encode(std::string_view text) const override;
  int dim() const override { return pack_.dim(); }
  nlohmann::json describe() const override;

 private:
  EmbeddingPack pack_;
  std::string source_;
};

// {"kind": "hashing", "seed": s, "dim": d} or {"kind": "table", "path": p}.
std::unique_ptr<TextEncoder> make_encoder(const nlohmann::json& desc);

}  // namespace llmcf::text
