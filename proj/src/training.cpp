#include "llmcf/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::train {

std::string to_string(Task t) { return t == Task::kRanking ? "ranking" : "retrieval"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kNoCot:
      return "no_cot";
    case Variant::kMeanPool:
      return "mean_pool";
    case Variant::kNoBalance:
      return "no_balance";
    case Variant::kPlain:
      return "plain";
  }
  return "unknown";
}

Task task_from_string(const std::string& s) {
  if (s == "ranking") return Task::kRanking;
  if (s == "retrieval") return Task::kRetrieval;
  throw UsageError("unknown task: " + s);
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::kFull, Variant::kNoCot, Variant::kMeanPool, Variant::kNoBalance, Variant::kPlain}) {
    if (to_string(v) == s) return v;
  }
  throw UsageError("unknown variant: " + s);
}

cot::RetrievalConfig TrainConfig::retrieval() const {
  cot::RetrievalConfig r;
  r.k = k;
  r.balance = variant != Variant::kNoBalance;
  r.anti_leakage = true;
  r.approximate = approximate;
  return r;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("lr must be positive");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in (0, 1]");
  if (max_epochs < 1) throw UsageError("max_epochs must be at least 1");
  if (patience < 1) throw UsageError("patience must be at least 1");
  if (k < 0 || k > ict.k_max) throw UsageError("k must lie in [0, k_max]");
  if (dim < 1) throw UsageError("dim must be positive");
  if (num_negatives < 1) throw UsageError("num_negatives must be positive");
  if (clip_norm < 0.0) throw UsageError("clip_norm must be non-negative");
  ict.validate();
  retrieval().validate();
  const bool ranking_backbone = backbone != backbone::Kind::kTwoTower;
  if ((task == Task::kRanking) != ranking_backbone) {
    throw UsageError("backbone " + backbone::to_string(backbone) + " does not serve the " + to_string(task) + " task");
  }
  if (task == Task::kRetrieval && uses_ict() && ict.d != dim) {
    throw UsageError("additive fusion needs ict.d equal to dim");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"alpha", alpha},
          {"seed", seed},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"task", to_string(task)},
          {"k", k},
          {"variant", to_string(variant)},
          {"backbone", backbone::to_string(backbone)},
          {"dim", dim},
          {"num_negatives", num_negatives},
          {"clip_norm", clip_norm},
          {"approximate", approximate},
          {"ict", ict.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {"lr",       "batch_size", "alpha",        "seed",      "max_epochs",
                                              "patience", "task",       "k",            "variant",   "backbone",
                                              "dim",      "num_negatives", "clip_norm", "approximate", "ict"};
  static const std::set<std::string> kIctKeys = {"d", "layers", "heads", "k_max", "d_text", "ff_mult"};
  if (!j.is_object()) throw UsageError("train config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw UsageError("unknown train config key: " + key);
  }
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.alpha = j.value("alpha", c.alpha);
    c.seed = j.value("seed", c.seed);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    if (j.contains("task")) c.task = task_from_string(j["task"].get<std::string>());
    c.k = j.value("k", c.k);
    if (j.contains("variant")) c.variant = variant_from_string(j["variant"].get<std::string>());
    if (j.contains("backbone")) c.backbone = backbone::kind_from_string(j["backbone"].get<std::string>());
    c.dim = j.value("dim", c.dim);
    c.num_negatives = j.value("num_negatives", c.num_negatives);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.approximate = j.value("approximate", c.approximate);
    if (j.contains("ict")) {
      const auto& ij = j["ict"];
      if (!ij.is_object()) throw UsageError("ict config must be an object");
      for (const auto& [key, _] : ij.items()) {
        if (!kIctKeys.count(key)) throw UsageError("unknown ict config key: " + key);
      }
      c.ict.d = ij.value("d", c.ict.d);
      c.ict.layers = ij.value("layers", c.ict.layers);
      c.ict.heads = ij.value("heads", c.ict.heads);
      c.ict.k_max = ij.value("k_max", c.ict.k_max);
      c.ict.d_text = ij.value("d_text", c.ict.d_text);
      c.ict.ff_mult = ij.value("ff_mult", c.ict.ff_mult);
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("bad train config value: ") + e.what());
  }
  return c;
}

Model::Model(const TrainConfig& cfg, const FeatureSpace& space) : cfg_(cfg), space_(space) {
  cfg_.validate();
  const int w_dim = cfg_.uses_ict() ? cfg_.ict.d : 0;
  if (cfg_.uses_ict()) ict_ = std::make_unique<ict::IctModule>(cfg_.ict, space_, params_);
  switch (cfg_.backbone) {
    case backbone::Kind::kFmDeep:
      fm_ = std::make_unique<backbone::FmDeep>(space_, cfg_.dim, w_dim, params_);
      break;
    case backbone::Kind::kTargetAttention:
      din_ = std::make_unique<backbone::TargetAttention>(space_, cfg_.dim, w_dim, params_);
      break;
    case backbone::Kind::kTwoTower:
      tt_ = std::make_unique<backbone::TwoTower>(space_, cfg_.dim, params_);
      break;
  }
}

void Model::init() {
  if (ict_) {
    Rng rng(derive_seed(cfg_.seed, "init.ict"));
    ict_->init(rng);
  }
  // Separate stream so the backbone starts identically with or without the ICT module.
  Rng rng(derive_seed(cfg_.seed, "init.backbone"));
  if (fm_) fm_->init(rng);
  if (din_) din_->init(rng);
  if (tt_) tt_->init(rng);
}

Model::Output Model::forward(ag::Tape& t, std::span<const Query> batch) const {
  Output out;
  const auto n = static_cast<ag::Index>(batch.size());
  std::vector<const data::Example*> examples;
  examples.reserve(batch.size());
  for (const auto& q : batch) examples.push_back(q.example);

  out.recon = t.constant(ag::Matrix::Zero(n, 1));
  if (ict_) {
    ict::AssembleOptions opts;
    opts.include_cot = cfg_.uses_cot();
    opts.mask_target = cfg_.task == Task::kRetrieval;
    std::vector<ict::IctSequence> seqs;
    seqs.reserve(batch.size());
    for (const auto& q : batch) seqs.push_back(ict::assemble(*q.example, *q.text, q.context, opts));
    const ict::TokenBatch tb = ict_->embed_tokens(t, seqs);
    if (cfg_.variant == Variant::kMeanPool) {
      out.w = ict::IctModule::mean_pool_feature(tb);
    } else {
      const ag::Var h = ict_->decoder_forward(t, tb.tokens, tb.segments);
      out.w = ict::IctModule::cf_feature(h, tb);
      if (cfg_.uses_cot()) out.recon = ict::IctModule::recon_loss(h, tb);
    }
  }
  if (fm_) out.score = fm_->forward(t, examples, out.w);
  if (din_) out.score = din_->forward(t, examples, out.w);
  if (tt_) out.score = tt_->fuse(tt_->user_vectors(t, examples), out.w);
  return out;
}

ag::Var Model::candidate_scores(ag::Tape& t, ag::Var fused, std::span<const int> items, int group) const {
  if (!tt_) throw std::logic_error("candidate scores need the two-tower backbone");
  return tt_->score(t, fused, items, group);
}

const ag::Parameter& Model::item_table() const {
  if (!tt_) throw std::logic_error("item table needs the two-tower backbone");
  return tt_->item_table();
}

nlohmann::json Model::describe() const { return {{"train", cfg_.to_json()}, {"space", space_.to_json()}}; }

double bce_loss(double logit, int label) { return metrics::bce_loss(logit, label); }

double sampled_softmax_loss(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("sampled_softmax_loss needs at least one score");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double x : scores) s += std::exp(x - mx);
  return mx + std::log(s) - scores[0];
}

double total_loss(double l_r, double l_o, double alpha) { return alpha * l_r + l_o; }

ag::Var total_loss(ag::Var l_r, ag::Var l_o, double alpha) { return ag::mean(ag::add(ag::scale(l_r, alpha), l_o)); }

std::vector<int> sample_candidates(std::span<const Query> batch, int n_items, int n, Rng& rng) {
  if (n_items < 3) throw DataError("catalog too small for negative sampling");
  std::vector<int> items;
  items.reserve(batch.size() * static_cast<std::size_t>(n + 1));
  for (const auto& q : batch) {
    const int pos = q.example->target_item_index;
    items.push_back(pos);
    for (int i = 0; i < n; ++i) {
      int c;
      do {
        c = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_items - 1)));
      } while (c == pos);
      items.push_back(c);
    }
  }
  return items;
}

Adam::Adam(const AdamConfig& cfg, const ag::ParamSet& params) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.push_back(ag::Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ag::Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(ag::ParamSet& params) {
  if (params.size() != m_.size()) throw std::logic_error("optimizer state does not match the parameter set");
  for (const auto& p : params) {
    if (!p->grad.allFinite()) throw NumericalError("non-finite gradient for parameter " + p->name);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t i = 0;
  for (auto& p : params) {
    auto& m = m_[i];
    auto& v = v_[i];
    ++i;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p->grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

double clip_grad_norm(ag::ParamSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) p->grad *= s;
  }
  return norm;
}

bool EarlyStopping::update(double metric) {
  ++epoch_;
  last_improved_ = best_epoch_ == 0 || metric > best_;
  if (last_improved_) {
    best_ = metric;
    best_epoch_ = epoch_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return bad_ >= patience_;
}

PreparedSet prepare(const TrainConfig& cfg, const TrainData& data, std::span<const data::Example> examples) {
  if (data.vocab == nullptr || data.encoder == nullptr) throw std::invalid_argument("prepare needs a vocab and an encoder");
  const bool retrieval_task = cfg.task == Task::kRetrieval;
  const bool need_context = cfg.uses_ict() && cfg.k > 0;
  if (need_context && data.store == nullptr) throw UsageError("a CoT store is required for k > 0");
  const cot::RetrievalConfig rc = cfg.retrieval();
  PreparedSet s;
  for (const auto& e : examples) {
    if (retrieval_task && e.label != 1) continue;
    s.examples.push_back(&e);
  }
  s.texts.reserve(s.examples.size());
  s.contexts.resize(s.examples.size());
  for (std::size_t i = 0; i < s.examples.size(); ++i) {
    const data::Example& e = *s.examples[i];
    if (retrieval_task) {
      s.texts.push_back(data.encoder->encode(data::render_text(e, *data.vocab, {.mask_target = true})));
    } else {
      s.texts.push_back(data.encoder->encode(e.text));
    }
    if (need_context) {
      cot::Retrieved r = data.store->retrieve(s.texts.back(), e.timestamp, rc, e.id);
      s.contexts[i] = std::move(r.records);
      if (r.imbalanced) ++s.imbalanced;
    }
  }
  return s;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},       {"loss", loss},         {"recon", recon},
          {"task_loss", task_loss}, {"valid_metric", valid_metric}, {"improved", improved}};
}

namespace {

std::vector<Query> gather_queries(const PreparedSet& set, std::span<const std::size_t> idx) {
  std::vector<Query> qs;
  qs.reserve(idx.size());
  for (std::size_t i : idx) qs.push_back(set.query(i));
  return qs;
}

double validation_metric(const Model& model, const PreparedSet& valid, int batch) {
  if (model.config().task == Task::kRanking) {
    const auto logits = predict_logits(model, valid, batch);
    std::vector<int> labels;
    for (const auto* e : valid.examples) labels.push_back(e->label);
    const auto a = metrics::auc(logits, labels);
    if (!a.ok()) throw DataError("validation " + a.error);
    return a.value;
  }
  metrics::TopKAccumulator acc({10});
  for (int r : target_ranks(model, valid, batch)) acc.add_rank(r);
  return acc.mean().ndcg.at(10);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainData& data, Model& model, const TrainHooks& hooks) {
  cfg.validate();
  if (data.split == nullptr) throw std::invalid_argument("train needs a dataset split");
  const PreparedSet train_set = prepare(cfg, data, data.split->train);
  const PreparedSet valid_set = prepare(cfg, data, data.split->valid);
  if (train_set.size() == 0) throw DataError("no training examples for the " + to_string(cfg.task) + " task");
  if (valid_set.size() == 0) throw DataError("no validation examples for the " + to_string(cfg.task) + " task");

  TrainResult result;
  result.monitored = cfg.task == Task::kRanking ? "valid_auc" : "valid_ndcg@10";
  Adam opt({.lr = cfg.lr}, model.params());
  EarlyStopping stopper(cfg.patience);
  std::vector<ag::Matrix> best;

  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle." + std::to_string(epoch)));
    shuffle_rng.shuffle(order);
    Rng neg_rng(derive_seed(cfg.seed, "negatives." + std::to_string(epoch)));

    double sum_loss = 0.0;
    double sum_recon = 0.0;
    double sum_task = 0.0;
    std::size_t n_seen = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto queries = gather_queries(train_set, std::span(order).subspan(start, end - start));
      if (hooks.on_context) {
        for (const auto& q : queries) hooks.on_context(q);
      }
      ag::Tape t;
      model.params().zero_grad();
      const Model::Output out = model.forward(t, queries);
      ag::Var task_loss;
      if (cfg.task == Task::kRanking) {
        std::vector<int> labels;
        for (const auto& q : queries) labels.push_back(q.example->label);
        task_loss = ag::bce_with_logits(out.score, labels);
      } else {
        const auto items = sample_candidates(queries, model.space().n_items, cfg.num_negatives, neg_rng);
        const std::vector<int> targets(queries.size(), 0);
        task_loss = ag::softmax_xent(model.candidate_scores(t, out.score, items, cfg.num_negatives + 1), targets);
      }
      const ag::Var loss = total_loss(out.recon, task_loss, cfg.alpha);
      if (!std::isfinite(loss.scalar())) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      t.backward(loss);
      if (cfg.clip_norm > 0.0) clip_grad_norm(model.params(), cfg.clip_norm);
      opt.step(model.params());

      const double b = static_cast<double>(queries.size());
      sum_loss += loss.scalar() * b;
      sum_recon += out.recon.value().sum();
      sum_task += task_loss.value().sum();
      n_seen += queries.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sum_loss / static_cast<double>(n_seen);
    rec.recon = sum_recon / static_cast<double>(n_seen);
    rec.task_loss = sum_task / static_cast<double>(n_seen);
    rec.valid_metric = validation_metric(model, valid_set, std::max(cfg.batch_size, 256));
    const bool stop = stopper.update(rec.valid_metric);
    rec.improved = stopper.last_improved();
    if (rec.improved) {
      best.clear();
      for (const auto& p : model.params()) best.push_back(p->value);
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  std::size_t i = 0;
  for (auto& p : model.params()) p->value = best[i++];
  result.best_epoch = stopper.best_epoch();
  result.best_metric = stopper.best();
  return result;
}

std::vector<double> predict_logits(const Model& model, const PreparedSet& set, int batch_size) {
  if (model.config().task != Task::kRanking) throw std::logic_error("logits are defined for the ranking task");
  std::vector<double> out;
  out.reserve(set.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(set.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    ag::Tape t;
    const auto o = model.forward(t, gather_queries(set, idx));
    for (ag::Index r = 0; r < o.score.rows(); ++r) out.push_back(o.score.value()(r, 0));
  }
  return out;
}

std::vector<int> target_ranks(const Model& model, const PreparedSet& set, int batch_size) {
  if (model.config().task != Task::kRetrieval) throw std::logic_error("ranks are defined for the retrieval task");
  const ag::Matrix& items = model.item_table().value;
  std::vector<int> ranks;
  ranks.reserve(set.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(set.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    ag::Tape t;
    const auto o = model.forward(t, gather_queries(set, idx));
    const ag::Matrix scores = o.score.value() * items.transpose();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto r = static_cast<ag::Index>(b);
      const int target = set.examples[idx[b]]->target_item_index;
      if (target < 1 || target >= items.rows()) {
        throw DataError("target item " + std::to_string(target) + " is not among the candidates");
      }
      const double ts = scores(r, target);
      int rank = 1;
      for (ag::Index c = 1; c < items.rows(); ++c) {
        const double s = scores(r, c);
        if (s > ts || (s == ts && c < target)) ++rank;
      }
      ranks.push_back(rank);
    }
  }
  return ranks;
}

metrics::MetricsReport evaluate(const Model& model, const PreparedSet& set, const std::string& split_name) {
  const TrainConfig& cfg = model.config();
  metrics::MetricsReport rep;
  rep.task = to_string(cfg.task);
  rep.split = split_name;
  rep.seed = cfg.seed;
  rep.config = cfg.to_json();
  rep.examples = set.size();
  for (const auto* e : set.examples) (e->label == 1 ? rep.positives : rep.negatives)++;
  const int batch = std::max(cfg.batch_size, 256);
  if (cfg.task == Task::kRanking) {
    const auto logits = predict_logits(model, set, batch);
    std::vector<int> labels;
    std::vector<double> probs;
    for (std::size_t i = 0; i < set.size(); ++i) {
      labels.push_back(set.examples[i]->label);
      probs.push_back(1.0 / (1.0 + std::exp(-logits[i])));
    }
    const auto a = metrics::auc(logits, labels);
    if (!a.ok()) throw DataError(a.error);
    rep.auc = a.value;
    rep.logloss = metrics::logloss(probs, labels);
  } else {
    metrics::TopKAccumulator acc({5, 10});
    for (int r : target_ranks(model, set, batch)) acc.add_rank(r);
    const auto m = acc.mean();
    rep.hit = m.hit;
    rep.ndcg = m.ndcg;
  }
  rep.extra = {{"imbalanced_contexts", set.imbalanced}};
  return rep;
}

}  // namespace llmcf::train
