#include "llmcf/cotstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::cot {

using nlohmann::json;

void RetrievalConfig::validate() const {
  if (k < 0) throw UsageError("K must be non-negative");
  if (balance && k % 2 != 0) throw UsageError("K must be even when label balance is on");
}

std::vector<data::Example> sample_subset(std::span<const data::Example> train, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0) throw UsageError("sampling ratio must be in (0, 1]");
  const auto n = train.size();
  const auto m = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (m == 0) throw DataError("CoT subset would be empty");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: the first m slots are a uniform sample.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::vector<data::Example> out;
  out.reserve(m);
  for (std::size_t i : idx) out.push_back(train[i]);
  std::sort(out.begin(), out.end(), [](const data::Example& a, const data::Example& b) { return a.id < b.id; });
  return out;
}

namespace {

std::string feature_tokens(const data::Example& e) {
  std::string s = "u" + std::to_string(e.user_index) + " i" + std::to_string(e.target_item_index);
  for (std::size_t f = 0; f < e.user_attr_indices.size(); ++f) {
    s += " ua" + std::to_string(f) + "x" + std::to_string(e.user_attr_indices[f]);
  }
  for (std::size_t f = 0; f < e.target_attr_indices.size(); ++f) {
    s += " ia" + std::to_string(f) + "x" + std::to_string(e.target_attr_indices[f]);
  }
  for (int h : e.history) s += " h" + std::to_string(h);
  return s;
}

std::vector<double> unit_gaussian(Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double ss = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  for (auto& x : v) x /= std::sqrt(ss);
  return v;
}

}  // namespace

SyntheticCotProvider::SyntheticCotProvider(std::uint64_t seed, double lambda, int dim, double noise)
    : seed_(seed), lambda_(lambda), dim_(dim), noise_(noise), features_(derive_seed(seed, "features"), dim) {
  if (lambda < 0.0 || lambda > 1.0) throw UsageError("synthetic CoT signal lambda must be in [0, 1]");
  if (noise < 0.0) throw UsageError("synthetic CoT noise must be non-negative");
  Rng rng(derive_seed(seed, "labels"));
  label_dirs_.push_back(unit_gaussian(rng, dim));
  label_dirs_.push_back(unit_gaussian(rng, dim));
}

CotOutput SyntheticCotProvider::generate(const data::Example& example, int label) const {
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1");
  const auto feat = text::normalized(features_.raw(feature_tokens(example)));
  Rng rng(derive_seed(seed_, "noise:" + std::to_string(example.id)));
  const double per_dim = noise_ / std::sqrt(static_cast<double>(dim_));
  std::vector<double> v(static_cast<std::size_t>(dim_));
  const auto& dir = label_dirs_[static_cast<std::size_t>(label)];
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = (1.0 - lambda_) * feat.values[i] + lambda_ * dir[i] + per_dim * rng.normal();
  }
  return CotOutput{std::nullopt, text::normalized(v)};
}

json SyntheticCotProvider::describe() const {
  return {{"kind", "synthetic"}, {"seed", seed_}, {"lambda", lambda_}, {"dim", dim_}, {"noise", noise_}};
}

FileCotProvider::FileCotProvider(text::EmbeddingPack embeddings, std::unordered_map<std::string, std::string> texts,
                                 std::string source)
    : embeddings_(std::move(embeddings)), texts_(std::move(texts)), source_(std::move(source)) {}

CotOutput FileCotProvider::generate(const data::Example& example, int /*label*/) const {
  const std::string key = std::to_string(example.id);
  const auto* row = embeddings_.find(key);
  if (row == nullptr) throw DataError("no CoT embedding for example id " + key);
  CotOutput out;
  out.embedding = text::normalized(*row);
  if (auto it = texts_.find(key); it != texts_.end()) out.text = it->second;
  return out;
}

json FileCotProvider::describe() const {
  return {{"kind", "file"}, {"path", source_}, {"dim", embeddings_.dim()}};
}

std::unordered_map<std::string, std::string> read_cot_texts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CoT text file " + path.string());
  std::unordered_map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out[std::to_string(j.at("id").get<std::int64_t>())] = j.at("cot_text").get<std::string>();
  }
  return out;
}

std::string render_cot_prompt(const std::string& prompt_template, const std::string& features_text, int label) {
  std::string out = prompt_template;
  auto replace = [&out](const std::string& key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace("{features}", features_text);
  replace("{label}", label == 1 ? "Yes" : "No");
  return out;
}

std::vector<CoTRecord> make_records(std::span<const data::Example> subset, const text::TextEncoder& encoder,
                                    const CotProvider& provider) {
  std::vector<CoTRecord> out;
  out.reserve(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const auto& e = subset[i];
    CoTRecord r;
    r.id = static_cast<std::int64_t>(i);
    r.example = e;
    r.label = e.label;
    r.timestamp = e.timestamp;
    r.key_embedding = encoder.encode(e.text);
    auto cot = provider.generate(e, e.label);
    r.cot_text = std::move(cot.text);
    r.cot_embedding = std::move(cot.embedding);
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

double dot(const text::TextEmbedding& a, const text::TextEmbedding& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += static_cast<double>(a.values[i]) * b.values[i];
  return s;
}

struct Candidate {
  double sim;
  std::size_t index;
  std::int64_t id;
};

bool more_similar(const Candidate& a, const Candidate& b) {
  if (a.sim != b.sim) return a.sim > b.sim;
  return a.id < b.id;
}

}  // namespace

CoTStore CoTStore::build(std::vector<CoTRecord> records, const StoreOptions& opts) {
  CoTStore s;
  if (!records.empty()) s.dim_ = records.front().key_embedding.dim();
  for (const auto& r : records) {
    if (r.key_embedding.dim() != s.dim_) {
      throw DataError("key embedding dimension mismatch at record " + std::to_string(r.id));
    }
  }
  s.records_ = std::move(records);
  if (!opts.build_ivf || s.records_.empty()) return s;

  // Spherical k-means over the keys, seeded from a uniform sample of records.
  const std::size_t m = s.records_.size();
  const int nlist = std::max(1, std::min<int>(static_cast<int>(m),
                                              opts.nlist > 0 ? opts.nlist : static_cast<int>(std::lround(std::sqrt(m)))));
  s.nprobe_ = std::clamp(opts.nprobe > 0 ? opts.nprobe : std::max(1, nlist / 4), 1, nlist);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(opts.seed, "ivf"));
  rng.shuffle(order);
  for (int c = 0; c < nlist; ++c) s.centroids_.push_back(s.records_[order[static_cast<std::size_t>(c)]].key_embedding);
  std::vector<int> assign(m, -1);
  for (int iter = 0; iter < 12; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < m; ++i) {
      int best = 0;
      double best_sim = -2.0;
      for (int c = 0; c < nlist; ++c) {
        const double sim = dot(s.records_[i].key_embedding, s.centroids_[static_cast<std::size_t>(c)]);
        if (sim > best_sim) {
          best_sim = sim;
          best = c;
        }
      }
      changed = changed || assign[i] != best;
      assign[i] = best;
    }
    if (!changed) break;
    std::vector<std::vector<double>> acc(static_cast<std::size_t>(nlist), std::vector<double>(static_cast<std::size_t>(s.dim_), 0.0));
    std::vector<int> counts(static_cast<std::size_t>(nlist), 0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++counts[c];
      for (int d = 0; d < s.dim_; ++d) acc[c][static_cast<std::size_t>(d)] += s.records_[i].key_embedding.values[static_cast<std::size_t>(d)];
    }
    for (std::size_t c = 0; c < acc.size(); ++c) {
      if (counts[c] == 0) continue;  // keep the previous centroid
      double ss = 0.0;
      for (double x : acc[c]) ss += x * x;
      if (ss > 0.0) s.centroids_[c] = text::normalized(acc[c]);
    }
  }
  s.lists_.assign(static_cast<std::size_t>(nlist), {});
  for (std::size_t i = 0; i < m; ++i) s.lists_[static_cast<std::size_t>(assign[i])].push_back(i);
  return s;
}

Retrieved CoTStore::retrieve(const text::TextEmbedding& query, std::int64_t query_timestamp, const RetrievalConfig& cfg,
                             std::optional<std::int64_t> exclude_example_id) const {
  cfg.validate();
  Retrieved out;
  if (cfg.k == 0 || records_.empty()) return out;
  if (query.dim() != dim_) throw std::invalid_argument("query embedding dimension does not match the store");
  if (cfg.approximate && !has_ivf()) throw UsageError("approximate retrieval requested but the store has no IVF index");

  const std::size_t half = static_cast<std::size_t>(cfg.k / 2);
  std::vector<Candidate> pos;
  std::vector<Candidate> neg;
  auto consider = [&](std::size_t i) {
    const CoTRecord& r = records_[i];
    if (cfg.anti_leakage && !(r.timestamp < query_timestamp)) return;
    if (exclude_example_id && r.example.id == *exclude_example_id) return;
    Candidate c{text::cosine(query, r.key_embedding), i, r.id};
    ++out.scanned;
    (r.label == 1 ? pos : neg).push_back(c);
  };
  auto satisfied = [&] {
    if (cfg.balance) return pos.size() >= half && neg.size() >= half;
    return pos.size() + neg.size() >= static_cast<std::size_t>(cfg.k);
  };

  if (cfg.approximate) {
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(lists_.size());
    for (std::size_t c = 0; c < centroids_.size(); ++c) order.emplace_back(-dot(query, centroids_[c]), c);
    std::sort(order.begin(), order.end());
    // Probe nprobe lists, then keep widening until the quotas can be met.
    for (std::size_t p = 0; p < order.size(); ++p) {
      if (p >= static_cast<std::size_t>(nprobe_) && satisfied()) break;
      for (std::size_t i : lists_[order[p].second]) consider(i);
    }
  } else {
    for (std::size_t i = 0; i < records_.size(); ++i) consider(i);
  }

  auto take_top = [](std::vector<Candidate>& v, std::size_t n) {
    n = std::min(n, v.size());
    std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), v.end(), more_similar);
    v.resize(n);
  };

  std::vector<Candidate> chosen;
  if (cfg.balance) {
    std::size_t n_pos = std::min(half, pos.size());
    std::size_t n_neg = std::min(half, neg.size());
    if (n_pos < half) n_neg = std::min(static_cast<std::size_t>(cfg.k) - n_pos, neg.size());
    if (n_neg < half) n_pos = std::min(static_cast<std::size_t>(cfg.k) - n_neg, pos.size());
    out.imbalanced = n_pos != n_neg;
    take_top(pos, n_pos);
    take_top(neg, n_neg);
    chosen = std::move(pos);
    chosen.insert(chosen.end(), neg.begin(), neg.end());
  } else {
    chosen = std::move(pos);
    chosen.insert(chosen.end(), neg.begin(), neg.end());
    take_top(chosen, static_cast<std::size_t>(cfg.k));
  }
  // Most similar example last, i.e. adjacent to the query token.
  std::sort(chosen.begin(), chosen.end(), [](const Candidate& a, const Candidate& b) {
    if (a.sim != b.sim) return a.sim < b.sim;
    return a.id < b.id;
  });
  for (const auto& c : chosen) {
    out.records.push_back(&records_[c.index]);
    out.similarities.push_back(c.sim);
  }
  return out;
}

void write_store_dir(const std::filesystem::path& dir, const std::vector<CoTRecord>& records,
                     const data::Vocab& vocab, const json& meta) {
  std::filesystem::create_directories(dir);
  const int dim_key = records.empty() ? text::kDefaultDim : records.front().key_embedding.dim();
  const int dim_cot = records.empty() ? text::kDefaultDim : records.front().cot_embedding.dim();
  text::EmbeddingPack keys(dim_key);
  text::EmbeddingPack cots(dim_cot);
  std::ofstream out(dir / "store.jsonl", std::ios::binary);
  if (!out) throw DataError("cannot write " + (dir / "store.jsonl").string());
  for (const auto& r : records) {
    const std::string kref = "key:" + std::to_string(r.id);
    const std::string cref = "cot:" + std::to_string(r.id);
    keys.add(kref, r.key_embedding.values);
    cots.add(cref, r.cot_embedding.values);
    json j{{"id", r.id},
           {"example_id", r.example.id},
           {"user_id", vocab.users.token(r.example.user_index)},
           {"item_id", vocab.items.token(r.example.target_item_index)},
           {"timestamp", r.timestamp},
           {"label", r.label},
           {"key_embedding_ref", kref},
           {"cot_embedding_ref", cref}};
    if (r.cot_text) j["cot_text"] = *r.cot_text;
    out << j.dump() << '\n';
  }
  text::write_pack(dir / "keys.lcfe", keys);
  text::write_pack(dir / "cots.lcfe", cots);
  std::ofstream m(dir / "meta.json", std::ios::binary);
  m << meta.dump(2) << '\n';
}

LoadedStore read_store_dir(const std::filesystem::path& dir, std::span<const data::Example> train,
                           const data::Vocab& vocab) {
  LoadedStore ls;
  {
    std::ifstream m(dir / "meta.json");
    if (!m) throw DataError("missing meta.json in " + dir.string());
    ls.meta = json::parse(m);
  }
  const auto keys = text::read_pack(dir / "keys.lcfe");
  const auto cots = text::read_pack(dir / "cots.lcfe");
  std::unordered_map<std::int64_t, const data::Example*> by_id;
  for (const auto& e : train) by_id.emplace(e.id, &e);
  std::ifstream in(dir / "store.jsonl");
  if (!in) throw DataError("missing store.jsonl in " + dir.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    CoTRecord r;
    r.id = j.at("id").get<std::int64_t>();
    const auto eid = j.at("example_id").get<std::int64_t>();
    auto it = by_id.find(eid);
    if (it == by_id.end()) throw DataError("store record " + std::to_string(r.id) + " references unknown example " + std::to_string(eid));
    r.example = *it->second;
    r.label = j.at("label").get<int>();
    r.timestamp = j.at("timestamp").get<std::int64_t>();
    if (vocab.users.token(r.example.user_index) != j.at("user_id").get<std::string>() ||
        vocab.items.token(r.example.target_item_index) != j.at("item_id").get<std::string>() ||
        r.example.timestamp != r.timestamp || r.example.label != r.label) {
      throw DataError("store record " + std::to_string(r.id) + " disagrees with example " + std::to_string(eid));
    }
    if (j.contains("cot_text")) r.cot_text = j.at("cot_text").get<std::string>();
    const auto kref = j.at("key_embedding_ref").get<std::string>();
    const auto cref = j.at("cot_embedding_ref").get<std::string>();
    const auto* k = keys.find(kref);
    const auto* c = cots.find(cref);
    if (k == nullptr) throw DataError("missing key embedding " + kref);
    if (c == nullptr) throw DataError("missing CoT embedding " + cref);
    r.key_embedding.values = *k;
    r.cot_embedding.values = *c;
    ls.records.push_back(std::move(r));
  }
  return ls;
}

}  // namespace llmcf::cot
