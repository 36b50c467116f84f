#include <doctest.h>

#include <cmath>
#include <vector>

#include "llmcf/errors.hpp"
#include "llmcf/metrics.hpp"
#include "llmcf/rng.hpp"
#include "llmcf/training.hpp"

using namespace llmcf;

namespace {

// Brute-force pair counting; ties count one half.
double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) good += 1.0;
      else if (s[i] == s[j]) good += 0.5;
    }
  }
  return good / pairs;
}

}  // namespace

TEST_CASE("auc fixtures") {
  CHECK(metrics::auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}).value == 1.0);
  CHECK(metrics::auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}).value == 0.5);
  CHECK(metrics::auc(std::vector<double>{0.3, 0.5, 0.9}, std::vector<int>{1, 0, 1}).value == 0.5);
}

TEST_CASE("auc single class is an error value") {
  const auto r = metrics::auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
  CHECK_FALSE(r.ok());
  CHECK(r.error.find("positive") != std::string::npos);
}

TEST_CASE("auc equals pair counting, is rank-invariant and complements under reversal") {
  Rng rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(60));
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng.below(8));  // many ties
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
    }
    y[0] = 1;
    y[1] = 0;
    const double a = metrics::auc(s, y).value;
    CHECK(a == pair_auc(s, y));
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(0.7 * s[i]) - 3.0;
    CHECK(metrics::auc(t, y).value == a);
    std::vector<double> neg(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) neg[i] = -s[i];
    CHECK(metrics::auc(neg, y).value == doctest::Approx(1.0 - a).epsilon(1e-12));
  }
}

TEST_CASE("relaimpr") {
  CHECK(metrics::relaimpr(0.8137, 0.7990) == doctest::Approx(4.916).epsilon(1e-4));
  CHECK(metrics::relaimpr(0.8044, 0.7853) == doctest::Approx(6.695).epsilon(1e-4));
  CHECK(metrics::relaimpr(0.73, 0.73) == 0.0);
  CHECK_THROWS_AS(metrics::relaimpr(0.7, 0.5), std::domain_error);
}

TEST_CASE("logloss") {
  CHECK(metrics::logloss(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}) < 1e-6);
  CHECK(metrics::logloss(std::vector<double>{0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1}) ==
        doctest::Approx(std::log(2.0)));
  // Cross-check against the training loss on the same pairs.
  const std::vector<double> logits = {-2.0, 0.3, 1.7, 4.0};
  const std::vector<int> labels = {0, 1, 0, 1};
  std::vector<double> probs;
  double mean_bce = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs.push_back(1.0 / (1.0 + std::exp(-logits[i])));
    mean_bce += train::bce_loss(logits[i], labels[i]) / 4.0;
  }
  CHECK(metrics::logloss(probs, labels) == doctest::Approx(mean_bce).epsilon(1e-12));
}

TEST_CASE("topk fixtures") {
  const std::vector<int> ks = {5, 10};
  const std::vector<int> ranked = {7, 3, 9, 1, 4, 8, 2, 6, 5, 0, 11};
  auto r1 = metrics::topk_metrics(ranked, 7, ks);
  CHECK(r1.hit[5] == 1.0);
  CHECK(r1.ndcg[5] == 1.0);
  auto r3 = metrics::topk_metrics(ranked, 9, ks);
  CHECK(r3.ndcg[10] == doctest::Approx(0.5));
  auto r6 = metrics::topk_metrics(ranked, 8, ks);
  CHECK(r6.hit[5] == 0.0);
  CHECK(r6.ndcg[5] == 0.0);
  CHECK(r6.hit[10] == 1.0);
  CHECK_THROWS_AS(metrics::topk_metrics(ranked, 42, ks), DataError);
}

TEST_CASE("ndcg never decreases as the rank improves") {
  const std::vector<int> ks = {5, 10};
  for (int r = 2; r <= 20; ++r) {
    const auto worse = metrics::topk_from_rank(r, ks);
    const auto better = metrics::topk_from_rank(r - 1, ks);
    for (int k : ks) CHECK(better.ndcg.at(k) >= worse.ndcg.at(k));
  }
}

TEST_CASE("report round trip and task gating") {
  metrics::MetricsReport r;
  r.task = "ranking";
  r.split = "test";
  r.auc = 0.8137;
  r.logloss = 0.45;
  r.base_auc = 0.7990;
  r.relaimpr_pct = metrics::relaimpr(0.8137, 0.7990);
  r.examples = 10;
  r.positives = 5;
  r.negatives = 5;
  r.seed = 3;
  const auto j = r.to_json();
  CHECK(j["schema"] == metrics::kReportSchema);
  CHECK_FALSE(j.contains("hit"));
  const auto back = metrics::MetricsReport::from_json(j);
  CHECK(back.to_json() == j);
}
