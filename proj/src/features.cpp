#include "llmcf/features.hpp"

#include <cmath>

#include "llmcf/errors.hpp"

namespace llmcf {

FeatureSpace FeatureSpace::from_vocab(const data::Vocab& vocab) {
  FeatureSpace fs;
  fs.n_users = vocab.users.size();
  fs.n_items = vocab.items.size();
  for (const auto& tv : vocab.user_attr_vocab) fs.user_attr_sizes.push_back(tv.size());
  for (const auto& tv : vocab.item_attr_vocab) fs.item_attr_sizes.push_back(tv.size());
  return fs;
}

nlohmann::json FeatureSpace::to_json() const {
  return {{"n_users", n_users},
          {"n_items", n_items},
          {"user_attr_sizes", user_attr_sizes},
          {"item_attr_sizes", item_attr_sizes}};
}

FeatureSpace FeatureSpace::from_json(const nlohmann::json& j) {
  FeatureSpace fs;
  fs.n_users = j.at("n_users").get<int>();
  fs.n_items = j.at("n_items").get<int>();
  fs.user_attr_sizes = j.at("user_attr_sizes").get<std::vector<int>>();
  fs.item_attr_sizes = j.at("item_attr_sizes").get<std::vector<int>>();
  return fs;
}

void init_uniform(ag::Parameter& p, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  for (ag::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-bound, bound);
}

Linear Linear::create(ag::ParamSet& ps, const std::string& name, int in, int out) {
  Linear l;
  l.w = &ps.add(name + ".w", in, out);
  l.b = &ps.add(name + ".b", 1, out);
  return l;
}

void Linear::init(Rng& rng) {
  init_uniform(*w, static_cast<double>(w->value.rows()), rng);
  b->value.setZero();
}

ag::Var Linear::operator()(ag::Tape& t, ag::Var x) const {
  return ag::add_bias(ag::matmul(x, t.param(*w)), t.param(*b));
}

FieldEmbeddings::FieldEmbeddings(const std::string& prefix, const FeatureSpace& space, int dim, ag::ParamSet& ps)
    : dim_(dim) {
  user_ = &ps.add(prefix + ".user_emb", space.n_users, dim);
  item_ = &ps.add(prefix + ".item_emb", space.n_items, dim);
  for (std::size_t f = 0; f < space.user_attr_sizes.size(); ++f) {
    user_attr_.push_back(&ps.add(prefix + ".uattr" + std::to_string(f) + "_emb", space.user_attr_sizes[f], dim));
  }
  for (std::size_t f = 0; f < space.item_attr_sizes.size(); ++f) {
    item_attr_.push_back(&ps.add(prefix + ".iattr" + std::to_string(f) + "_emb", space.item_attr_sizes[f], dim));
  }
}

void FieldEmbeddings::init(Rng& rng) {
  const double fan = static_cast<double>(dim_);
  init_uniform(*user_, fan, rng);
  init_uniform(*item_, fan, rng);
  for (auto* p : user_attr_) init_uniform(*p, fan, rng);
  for (auto* p : item_attr_) init_uniform(*p, fan, rng);
}

FieldEmbeddings::Fields FieldEmbeddings::lookup(ag::Tape& t, std::span<const data::Example* const> examples) const {
  Fields f;
  std::vector<int> users;
  std::vector<int> items;
  std::vector<std::vector<int>> uattr(user_attr_.size());
  std::vector<std::vector<int>> iattr(item_attr_.size());
  std::vector<int> hist;
  f.history_seg.push_back(0);
  for (const data::Example* e : examples) {
    users.push_back(e->user_index);
    items.push_back(e->target_item_index);
    if (e->user_attr_indices.size() != user_attr_.size() || e->target_attr_indices.size() != item_attr_.size()) {
      throw DataError("example " + std::to_string(e->id) + " has the wrong number of attribute fields");
    }
    for (std::size_t a = 0; a < user_attr_.size(); ++a) uattr[a].push_back(e->user_attr_indices[a]);
    for (std::size_t a = 0; a < item_attr_.size(); ++a) iattr[a].push_back(e->target_attr_indices[a]);
    hist.insert(hist.end(), e->history.begin(), e->history.end());
    f.history_seg.push_back(static_cast<int>(hist.size()));
    f.history_counts.push_back(static_cast<int>(e->history.size()));
  }
  f.user = ag::gather(t, *user_, users);
  f.item = ag::gather(t, *item_, items);
  for (std::size_t a = 0; a < user_attr_.size(); ++a) f.user_attrs.push_back(ag::gather(t, *user_attr_[a], uattr[a]));
  for (std::size_t a = 0; a < item_attr_.size(); ++a) f.item_attrs.push_back(ag::gather(t, *item_attr_[a], iattr[a]));
  if (hist.empty()) {
    f.history_rows = t.constant(ag::Matrix::Zero(0, dim_));
    f.history_mean = t.constant(ag::Matrix::Zero(static_cast<ag::Index>(examples.size()), dim_));
  } else {
    f.history_rows = ag::gather(t, *item_, hist);
    f.history_mean = ag::segment_mean(f.history_rows, f.history_seg);
  }
  return f;
}

}  // namespace llmcf
