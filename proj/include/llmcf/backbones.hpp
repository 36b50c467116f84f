#pragma once

// Recommendation backbones. Each accepts an optional CF feature w per example:
// ranking backbones concatenate it into the deep tower input, the two-tower
// retrieval model adds it to the user vector.

#include <optional>
#include <span>
#include <string>

#include "llmcf/autograd.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/features.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::backbone {

inline constexpr int kTowerWidth = 64;
inline constexpr int kAttentionWidth = 16;

enum class Kind { kFmDeep, kTargetAttention, kTwoTower };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

using Batch = std::span<const data::Example* const>;

// First-order + FM pairwise over field embeddings + deep tower over
// [fields | w]. The history field is the mean of history item embeddings.
class FmDeep {
 public:
  // w_dim = 0 builds the plain backbone.
  FmDeep(const FeatureSpace& space, int dim, int w_dim, ag::ParamSet& ps);
  void init(Rng& rng);
  ag::Var forward(ag::Tape& t, Batch batch, std::optional<ag::Var> w) const;  // B x 1 logits
  int w_dim() const { return w_dim_; }

 private:
  int dim_;
  int w_dim_;
  FieldEmbeddings fields_;
  FieldEmbeddings first_order_;  // dimension-1 tables
  ag::Parameter* bias_;
  Linear l1_;
  Linear l2_;
  Linear out_;
};

// Softmax attention over history items keyed by the target item, pooled
// history | target | user | attribute fields | w -> deep tower.
class TargetAttention {
 public:
  TargetAttention(const FeatureSpace& space, int dim, int w_dim, ag::ParamSet& ps);
  void init(Rng& rng);
  ag::Var forward(ag::Tape& t, Batch batch, std::optional<ag::Var> w) const;
  // Attention weights over the stacked history rows of the batch (for inspection).
  ag::Var attention(ag::Tape& t, Batch batch) const;
  int w_dim() const { return w_dim_; }

 private:
  struct Pooled {
    ag::Var weights;
    ag::Var pooled;
    FieldEmbeddings::Fields fields;
  };
  Pooled pool(ag::Tape& t, Batch batch) const;

  int dim_;
  int w_dim_;
  FieldEmbeddings fields_;
  Linear att1_;
  Linear att2_;
  Linear l1_;
  Linear l2_;
  Linear out_;
};

// user = tower(mean history embedding); fused = user + w; score = <fused, item>.
class TwoTower {
 public:
  TwoTower(const FeatureSpace& space, int dim, ag::ParamSet& ps);
  void init(Rng& rng);
  ag::Var user_vectors(ag::Tape& t, Batch batch) const;  // B x d
  ag::Var fuse(ag::Var user, std::optional<ag::Var> w) const;
  // Scores (B x G) against G item ids per example, row-major in `items`.
  ag::Var score(ag::Tape& t, ag::Var fused, std::span<const int> items, int group) const;
  const ag::Parameter& item_table() const { return *item_out_; }
  int dim() const { return dim_; }

 private:
  int dim_;
  ag::Parameter* hist_emb_;
  ag::Parameter* item_out_;
  Linear l1_;
  Linear l2_;
};

}  // namespace llmcf::backbone
