#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace llmcf::metrics {

inline constexpr double kProbClamp = 1e-7;
inline constexpr const char* kReportSchema = "llmcf.metrics/1";

// A metric that may be undefined for its input; `error` says why.
struct MetricValue {
  double value = 0.0;
  std::string error;
  bool ok() const { return error.empty(); }
};

// Mann-Whitney AUC with average ranks for tied scores.
MetricValue auc(std::span<const double> scores, std::span<const int> labels);

// ((auc - 0.5) / (base - 0.5) - 1) * 100. Throws std::domain_error when base == 0.5.
double relaimpr(double auc_model, double auc_base);

double clamp_prob(double p);
double bce_loss(double logit, int label);
double logloss(std::span<const double> probs, std::span<const int> labels);

// 1-based rank of target in ranked; throws DataError if absent.
int target_rank(std::span<const int> ranked, int target);

struct TopK {
  std::map<int, double> hit;
  std::map<int, double> ndcg;
};
TopK topk_from_rank(int rank, std::span<const int> ks);
TopK topk_metrics(std::span<const int> ranked, int target, std::span<const int> ks);

// Running means of HIT/NDCG over users.
class TopKAccumulator {
 public:
  explicit TopKAccumulator(std::vector<int> ks) : ks_(std::move(ks)) {}
  void add_rank(int rank);
  TopK mean() const;
  std::size_t count() const { return n_; }
  const std::vector<int>& ks() const { return ks_; }

 private:
  std::vector<int> ks_;
  std::map<int, double> hit_sum_;
  std::map<int, double> ndcg_sum_;
  std::size_t n_ = 0;
};

struct MetricsReport {
  std::string task;
  std::string split;
  std::optional<double> auc;
  std::optional<double> logloss;
  std::optional<double> relaimpr_pct;
  std::optional<double> base_auc;
  std::map<int, double> hit;
  std::map<int, double> ndcg;
  std::size_t examples = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;
  nlohmann::json extra;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

}  // namespace llmcf::metrics
