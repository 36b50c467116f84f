#pragma once

// Model assembly (ICT module + backbone), the combined loss, Adam, early
// stopping and the seeded training loop.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "llmcf/autograd.hpp"
#include "llmcf/backbones.hpp"
#include "llmcf/cotstore.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/features.hpp"
#include "llmcf/ict.hpp"
#include "llmcf/metrics.hpp"
#include "llmcf/textenc.hpp"

namespace llmcf::train {

enum class Task { kRanking, kRetrieval };
// plain: backbone alone, no CF feature. no_cot: C tokens and L_r removed.
// mean_pool: mean of token embeddings replaces the decoder. no_balance:
// retrieval without the P/N quota.
enum class Variant { kFull, kNoCot, kMeanPool, kNoBalance, kPlain };

std::string to_string(Task t);
std::string to_string(Variant v);
Task task_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  double alpha = 0.5;
  std::uint64_t seed = 0;
  int max_epochs = 20;
  int patience = 3;
  Task task = Task::kRanking;
  int k = 4;
  Variant variant = Variant::kFull;
  backbone::Kind backbone = backbone::Kind::kFmDeep;
  int dim = 32;  // backbone field-embedding width
  int num_negatives = 128;
  double clip_norm = 0.0;  // global-norm clipping; 0 disables
  bool approximate = false;
  ict::IctConfig ict;

  bool uses_ict() const { return variant != Variant::kPlain; }
  bool uses_cot() const { return variant != Variant::kNoCot; }
  cot::RetrievalConfig retrieval() const;

  // Throws UsageError on out-of-range values or backbone/task mismatch.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep defaults; unknown keys are a UsageError.
  static TrainConfig from_json(const nlohmann::json& j);
};

// One query with its retrieved context.
struct Query {
  const data::Example* example = nullptr;
  const text::TextEmbedding* text = nullptr;
  std::vector<const cot::CoTRecord*> context;
};

class Model {
 public:
  Model(const TrainConfig& cfg, const FeatureSpace& space);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Seeds from derive_seed(cfg.seed, "init.*").
  void init();

  struct Output {
    ag::Var score;  // ranking: B x 1 logits; retrieval: B x d fused user vectors
    ag::Var recon;  // B x 1 per-example L_r, zeros when unused
    std::optional<ag::Var> w;
  };
  Output forward(ag::Tape& t, std::span<const Query> batch) const;

  // Retrieval task: B x G scores against G candidate items per query.
  ag::Var candidate_scores(ag::Tape& t, ag::Var fused, std::span<const int> items, int group) const;
  const ag::Parameter& item_table() const;

  ag::ParamSet& params() { return params_; }
  const ag::ParamSet& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const FeatureSpace& space() const { return space_; }
  const ict::IctModule* ict() const { return ict_.get(); }

  // Checkpoint header: train config plus feature space.
  nlohmann::json describe() const;

 private:
  TrainConfig cfg_;
  FeatureSpace space_;
  ag::ParamSet params_;
  std::unique_ptr<ict::IctModule> ict_;
  std::unique_ptr<backbone::FmDeep> fm_;
  std::unique_ptr<backbone::TargetAttention> din_;
  std::unique_ptr<backbone::TwoTower> tt_;
};

// Scalar losses.
double bce_loss(double logit, int label);
// Cross-entropy of index 0 against softmax(scores).
double sampled_softmax_loss(std::span<const double> scores);
double total_loss(double l_r, double l_o, double alpha);
// Batch mean of alpha * l_r + l_o over B x 1 columns.
ag::Var total_loss(ag::Var l_r, ag::Var l_o, double alpha);

// Per query: the positive item followed by `n` negatives drawn uniformly from
// items 1..n_items-1 other than the positive.
std::vector<int> sample_candidates(std::span<const Query> batch, int n_items, int n, Rng& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const AdamConfig& cfg, const ag::ParamSet& params);
  // Throws NumericalError naming the parameter when a gradient is non-finite;
  // no parameter is modified in that case.
  void step(ag::ParamSet& params);
  std::int64_t steps() const { return t_; }
  const ag::Matrix& first_moment(std::size_t i) const { return m_[i]; }
  const ag::Matrix& second_moment(std::size_t i) const { return v_[i]; }

 private:
  AdamConfig cfg_;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
  std::int64_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ag::ParamSet& params, double max_norm);

// Stops once the metric has failed to strictly improve `patience` epochs in a row.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true when training should stop after this epoch.
  bool update(double metric);
  bool last_improved() const { return last_improved_; }
  int best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int bad_ = 0;
  double best_ = 0.0;
  bool last_improved_ = false;
};

struct TrainData {
  const data::DatasetSplit* split = nullptr;
  const data::Vocab* vocab = nullptr;
  const cot::CoTStore* store = nullptr;  // required unless the variant is plain or k = 0
  const text::TextEncoder* encoder = nullptr;
};

// Query texts and retrieved contexts for a list of examples, computed once;
// the store is immutable so the per-example result never changes.
struct PreparedSet {
  std::vector<const data::Example*> examples;
  std::vector<text::TextEmbedding> texts;
  std::vector<std::vector<const cot::CoTRecord*>> contexts;
  std::size_t imbalanced = 0;

  std::size_t size() const { return examples.size(); }
  Query query(std::size_t i) const { return {examples[i], &texts[i], contexts[i]}; }
};

// Retrieval-task sets keep only positives and mask the query's target item.
PreparedSet prepare(const TrainConfig& cfg, const TrainData& data, std::span<const data::Example> examples);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double task_loss = 0.0;
  double valid_metric = 0.0;
  bool improved = false;

  nlohmann::json to_json() const;
};

struct TrainHooks {
  // Called for every query of every training batch before the forward pass.
  std::function<void(const Query&)> on_context;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_metric = 0.0;
  bool stopped_early = false;
  std::string monitored;  // "valid_auc" or "valid_ndcg@10"
};

// Trains in place; on return the model holds the best-epoch parameters.
// Throws NumericalError with epoch and batch on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const TrainData& data, Model& model, const TrainHooks& hooks = {});

// Logits for a prepared ranking set, in set order.
std::vector<double> predict_logits(const Model& model, const PreparedSet& set, int batch_size);
// 1-based rank of each query's target among items 1..n_items-1 (ties by ascending index).
std::vector<int> target_ranks(const Model& model, const PreparedSet& set, int batch_size);

metrics::MetricsReport evaluate(const Model& model, const PreparedSet& set, const std::string& split_name);

}  // namespace llmcf::train
