#pragma once

// Shared fixtures for the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "llmcf/autograd.hpp"
#include "llmcf/cotstore.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/features.hpp"
#include "llmcf/textenc.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::testing {

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("llmcf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline data::Interaction interaction(const std::string& user, const std::string& item, std::int64_t ts,
                                     data::AttrMap item_attrs = {}, data::AttrMap user_attrs = {}) {
  data::Interaction it;
  it.user_id = user;
  it.item_id = item;
  it.timestamp = ts;
  it.item_attrs = std::move(item_attrs);
  it.user_attrs = std::move(user_attrs);
  return it;
}

// Small random log: `users` users with 3..8 interactions over `items` items
// carrying title/category attributes and one user attribute.
inline std::vector<data::Interaction> random_log(std::uint64_t seed, int users, int items) {
  Rng rng(seed);
  std::vector<data::Interaction> log;
  for (int u = 0; u < users; ++u) {
    const int n = 3 + static_cast<int>(rng.below(6));
    std::int64_t ts = 1546300800 + static_cast<std::int64_t>(rng.below(1000)) * 60;
    std::vector<int> seen;
    for (int k = 0; k < n; ++k) {
      int item;
      do {
        item = static_cast<int>(rng.below(static_cast<std::uint64_t>(items)));
      } while (std::find(seen.begin(), seen.end(), item) != seen.end() && static_cast<int>(seen.size()) < items);
      seen.push_back(item);
      ts += 60 + static_cast<std::int64_t>(rng.below(3600));
      log.push_back(interaction("u" + std::to_string(u), "i" + std::to_string(item), ts,
                                {{"title", "thing " + std::to_string(item)}, {"category", "c" + std::to_string(item % 3)}},
                                {{"age", "a" + std::to_string(u % 2)}}));
    }
  }
  return log;
}

struct GradReport {
  std::string worst_param;
  double worst_rel = 0.0;
  std::map<std::string, double> per_param;
};

// Relative error per parameter tensor: ||analytic - numeric|| / max(||analytic||, ||numeric||),
// numeric from central differences. Tensors whose gradients are both below
// `zero_tol` in norm count as agreeing at zero.
inline GradReport grad_check(ag::ParamSet& ps, const std::function<ag::Var(ag::Tape&)>& loss, double h = 1e-6,
                             double zero_tol = 1e-9) {
  ps.zero_grad();
  {
    ag::Tape t;
    t.backward(loss(t));
  }
  GradReport rep;
  for (auto& p : ps) {
    const ag::Matrix analytic = p->grad;
    ag::Matrix numeric(analytic.rows(), analytic.cols());
    for (ag::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double x0 = x;
      x = x0 + h;
      double fp;
      {
        ag::Tape t;
        fp = loss(t).scalar();
      }
      x = x0 - h;
      double fm;
      {
        ag::Tape t;
        fm = loss(t).scalar();
      }
      x = x0;
      numeric.data()[i] = (fp - fm) / (2.0 * h);
    }
    const double na = analytic.norm();
    const double nn = numeric.norm();
    const double diff = (analytic - numeric).norm();
    const double rel = (na < zero_tol && nn < zero_tol) ? 0.0 : diff / std::max(na, nn);
    rep.per_param[p->name] = rel;
    if (rel >= rep.worst_rel) {
      rep.worst_rel = rel;
      rep.worst_param = p->name;
    }
  }
  return rep;
}

// Random examples and CoT records over a small feature space.
struct ToyWorld {
  FeatureSpace space;
  std::vector<data::Example> examples;
  std::vector<text::TextEmbedding> texts;  // one per example
  std::vector<cot::CoTRecord> records;
};

inline text::TextEmbedding random_unit(Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.normal();
  return text::normalized(v);
}

inline data::Example random_example(Rng& rng, const FeatureSpace& fs, std::int64_t id, int max_history = 3) {
  data::Example e;
  e.id = id;
  e.user_index = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fs.n_users - 1)));
  for (int s : fs.user_attr_sizes) e.user_attr_indices.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(s))));
  e.target_item_index = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fs.n_items - 1)));
  for (int s : fs.item_attr_sizes) e.target_attr_indices.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(s))));
  const int h = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_history + 1)));
  for (int i = 0; i < h; ++i) e.history.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fs.n_items - 1))));
  e.timestamp = 100 + static_cast<std::int64_t>(rng.below(100));
  e.label = static_cast<int>(rng.below(2));
  return e;
}

inline ToyWorld toy_world(std::uint64_t seed, int n_examples, int n_records, int d_text) {
  Rng rng(seed);
  ToyWorld w;
  w.space.n_users = 5;
  w.space.n_items = 7;
  w.space.user_attr_sizes = {3};
  w.space.item_attr_sizes = {4, 2};
  for (int i = 0; i < n_examples; ++i) {
    w.examples.push_back(random_example(rng, w.space, i));
    w.texts.push_back(random_unit(rng, d_text));
  }
  for (int i = 0; i < n_records; ++i) {
    cot::CoTRecord r;
    r.id = i;
    r.example = random_example(rng, w.space, 1000 + i);
    r.label = r.example.label;
    r.timestamp = r.example.timestamp;
    r.key_embedding = random_unit(rng, d_text);
    r.cot_embedding = random_unit(rng, d_text);
    w.records.push_back(std::move(r));
  }
  return w;
}

}  // namespace llmcf::testing
