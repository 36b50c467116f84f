#pragma once

// Sparse ID fields of an Example mapped through embedding tables, shared by
// the ICT feature encoder and the backbones.

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "llmcf/autograd.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/rng.hpp"

namespace llmcf {

struct FeatureSpace {
  int n_users = 1;
  int n_items = 1;
  std::vector<int> user_attr_sizes;
  std::vector<int> item_attr_sizes;

  static FeatureSpace from_vocab(const data::Vocab& vocab);
  nlohmann::json to_json() const;
  static FeatureSpace from_json(const nlohmann::json& j);
  bool operator==(const FeatureSpace&) const = default;
};

// U(-bound, bound) with bound = 1/sqrt(fan_in).
void init_uniform(ag::Parameter& p, double fan_in, Rng& rng);

// Dense layer y = x W + b with W stored (in x out).
struct Linear {
  ag::Parameter* w = nullptr;
  ag::Parameter* b = nullptr;

  static Linear create(ag::ParamSet& ps, const std::string& name, int in, int out);
  void init(Rng& rng);
  ag::Var operator()(ag::Tape& t, ag::Var x) const;
};

class FieldEmbeddings {
 public:
  FieldEmbeddings(const std::string& prefix, const FeatureSpace& space, int dim, ag::ParamSet& ps);
  void init(Rng& rng);

  struct Fields {
    ag::Var user;                     // B x d
    std::vector<ag::Var> user_attrs;  // B x d each
    ag::Var item;                     // B x d
    std::vector<ag::Var> item_attrs;  // B x d each
    ag::Var history_mean;             // B x d, zero rows for empty histories
    ag::Var history_rows;             // all history items stacked
    ag::Segments history_seg;         // per example over history_rows
    std::vector<int> history_counts;
  };

  Fields lookup(ag::Tape& t, std::span<const data::Example* const> examples) const;

  int dim() const { return dim_; }
  int num_fields() const { return 3 + static_cast<int>(user_attr_.size() + item_attr_.size()); }
  ag::Parameter& item_table() const { return *item_; }
  ag::Parameter& user_table() const { return *user_; }

 private:
  int dim_;
  ag::Parameter* user_;
  ag::Parameter* item_;
  std::vector<ag::Parameter*> user_attr_;
  std::vector<ag::Parameter*> item_attr_;
};

}  // namespace llmcf
