#include "llmcf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "llmcf/errors.hpp"

namespace llmcf::metrics {

MetricValue auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    return {std::nan(""), "AUC undefined: need at least one positive and one negative (got " + std::to_string(pos) +
                              " positive, " + std::to_string(neg) + " negative)"};
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank sums are kept doubled so tied groups stay integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_avg = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) twice_rank_sum += twice_avg;
    }
    i = j;
  }
  const double u = static_cast<double>(twice_rank_sum) / 2.0 - static_cast<double>(pos) * (pos + 1) / 2.0;
  return {u / (static_cast<double>(pos) * static_cast<double>(neg)), {}};
}

double relaimpr(double auc_model, double auc_base) {
  if (auc_base == 0.5) throw std::domain_error("RelaImpr undefined for a base AUC of exactly 0.5");
  return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double bce_loss(double logit, int label) {
  const double p = clamp_prob(1.0 / (1.0 + std::exp(-logit)));
  return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

double logloss(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw std::invalid_argument("logloss: length mismatch");
  if (probs.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = clamp_prob(probs[i]);
    s += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return s / static_cast<double>(probs.size());
}

int target_rank(std::span<const int> ranked, int target) {
  const auto it = std::find(ranked.begin(), ranked.end(), target);
  if (it == ranked.end()) throw DataError("target item " + std::to_string(target) + " is not among the candidates");
  return static_cast<int>(it - ranked.begin()) + 1;
}

TopK topk_from_rank(int rank, std::span<const int> ks) {
  TopK r;
  for (int k : ks) {
    const bool in = rank <= k;
    r.hit[k] = in ? 1.0 : 0.0;
    r.ndcg[k] = in ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
  }
  return r;
}

TopK topk_metrics(std::span<const int> ranked, int target, std::span<const int> ks) {
  return topk_from_rank(target_rank(ranked, target), ks);
}

void TopKAccumulator::add_rank(int rank) {
  const TopK t = topk_from_rank(rank, ks_);
  for (int k : ks_) {
    hit_sum_[k] += t.hit.at(k);
    ndcg_sum_[k] += t.ndcg.at(k);
  }
  ++n_;
}

TopK TopKAccumulator::mean() const {
  TopK r;
  for (int k : ks_) {
    r.hit[k] = n_ ? hit_sum_.at(k) / static_cast<double>(n_) : 0.0;
    r.ndcg[k] = n_ ? ndcg_sum_.at(k) / static_cast<double>(n_) : 0.0;
  }
  return r;
}

namespace {

nlohmann::json kmap(const std::map<int, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::map<int, double> kmap_from(const nlohmann::json& j) {
  std::map<int, double> m;
  for (const auto& [k, v] : j.items()) m[std::stoi(k)] = v.get<double>();
  return m;
}

template <typename T>
void put_opt(nlohmann::json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["task"] = task;
  j["split"] = split;
  put_opt(j, "auc", auc);
  put_opt(j, "logloss", logloss);
  put_opt(j, "relaimpr_pct", relaimpr_pct);
  put_opt(j, "base_auc", base_auc);
  if (!hit.empty()) j["hit"] = kmap(hit);
  if (!ndcg.empty()) j["ndcg"] = kmap(ndcg);
  j["counts"] = {{"examples", examples}, {"positives", positives}, {"negatives", negatives}};
  j["seed"] = seed;
  j["config"] = config;
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != kReportSchema) throw DataError("unsupported metrics report schema");
  MetricsReport r;
  r.task = j.at("task").get<std::string>();
  r.split = j.at("split").get<std::string>();
  if (j.contains("auc")) r.auc = j["auc"].get<double>();
  if (j.contains("logloss")) r.logloss = j["logloss"].get<double>();
  if (j.contains("relaimpr_pct")) r.relaimpr_pct = j["relaimpr_pct"].get<double>();
  if (j.contains("base_auc")) r.base_auc = j["base_auc"].get<double>();
  if (j.contains("hit")) r.hit = kmap_from(j["hit"]);
  if (j.contains("ndcg")) r.ndcg = kmap_from(j["ndcg"]);
  r.examples = j.at("counts").at("examples").get<std::size_t>();
  r.positives = j.at("counts").at("positives").get<std::size_t>();
  r.negatives = j.at("counts").at("negatives").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.value("config", nlohmann::json());
  r.extra = j.value("extra", nlohmann::json());
  return r;
}

}  // namespace llmcf::metrics
