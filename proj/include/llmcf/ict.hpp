#pragma once

// In-context chain-of-thought (ICT) module: token assembly, token embedding,
// a pre-norm causal transformer decoder and the collaborative-filtering
// feature read off the query position.

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "llmcf/autograd.hpp"
#include "llmcf/cotstore.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/features.hpp"
#include "llmcf/rng.hpp"
#include "llmcf/textenc.hpp"

namespace llmcf::ict {

struct IctConfig {
  int d = 32;
  int layers = 2;
  int heads = 2;
  int k_max = 8;
  int d_text = text::kDefaultDim;
  int ff_mult = 4;

  int max_length() const { return 3 * k_max + 1; }
  void validate() const;
  nlohmann::json to_json() const;
  static IctConfig from_json(const nlohmann::json& j);
};

enum class TokenKind : std::uint8_t { kRecord, kCot, kLabel };

struct IctToken {
  TokenKind kind;
  int slot;  // index into context, -1 for the query
};

struct IctSequence {
  const data::Example* query = nullptr;
  const text::TextEmbedding* query_text = nullptr;
  bool mask_query_target = false;
  std::vector<const cot::CoTRecord*> context;
  std::vector<IctToken> tokens;
  std::vector<int> record_positions;  // R position of each context example

  std::size_t length() const { return tokens.size(); }
  int query_position() const { return static_cast<int>(tokens.size()) - 1; }
};

struct AssembleOptions {
  bool include_cot = true;   // false drops C tokens: (R, L) x K' then R
  bool mask_target = false;  // retrieval task: hide the query's target item
};

// (R, C, L) per context example in retrieval order, then the query R.
IctSequence assemble(const data::Example& query, const text::TextEmbedding& query_text,
                     std::span<const cot::CoTRecord* const> retrieved, const AssembleOptions& opts = {});

// Token embeddings for a batch of sequences, stacked row-wise.
struct TokenBatch {
  ag::Var tokens;                      // sum(lengths) x d, positions added
  ag::Var tokens_no_pos;               // same rows before positional embeddings
  ag::Segments segments;               // one segment per sequence
  std::vector<int> query_rows;         // global row of each query token
  std::vector<int> context_record_rows;  // global R rows of context examples, in order
  ag::Segments context_segments;       // per sequence over context_record_rows
  ag::Var cot_targets;                 // detached C rows aligned with context_record_rows (if C tokens present)
  bool has_cot = false;
};

class IctModule {
 public:
  IctModule(const IctConfig& cfg, const FeatureSpace& space, ag::ParamSet& ps);
  void init(Rng& rng);

  TokenBatch embed_tokens(ag::Tape& t, std::span<const IctSequence> seqs) const;

  // L pre-norm blocks; output has the input's shape. Throws NumericalError
  // naming the layer when activations go non-finite.
  ag::Var decoder_forward(ag::Tape& t, ag::Var tokens, const ag::Segments& segments) const;

  // Hidden state at each sequence's last position.
  static ag::Var cf_feature(ag::Var hidden, const TokenBatch& batch);
  // Mean over each sequence's pre-decoder token rows.
  static ag::Var mean_pool_feature(const TokenBatch& batch);
  // Per sequence: mean_k (1 - cos(c_k, h(r_k))); zero for sequences without context.
  static ag::Var recon_loss(ag::Var hidden, const TokenBatch& batch);

  const IctConfig& config() const { return cfg_; }

 private:
  struct Block {
    ag::Parameter* ln1_g;
    ag::Parameter* ln1_b;
    Linear qkv;
    Linear proj;
    ag::Parameter* ln2_g;
    ag::Parameter* ln2_b;
    Linear ff1;
    Linear ff2;
  };

  ag::Var encode_records(ag::Tape& t, std::span<const data::Example* const> examples,
                         std::span<const text::TextEmbedding* const> texts, std::span<const int> masked) const;

  IctConfig cfg_;
  FieldEmbeddings fields_;
  Linear text_proj_;
  Linear feat_proj_;
  Linear cot_proj1_;
  Linear cot_proj2_;
  ag::Parameter* label_emb_;
  ag::Parameter* pos_emb_;
  std::vector<Block> blocks_;
};

}  // namespace llmcf::ict
