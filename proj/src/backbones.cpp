#include "llmcf/backbones.hpp"

#include <vector>

#include "llmcf/errors.hpp"

namespace llmcf::backbone {

std::string to_string(Kind k) {
  switch (k) {
    case Kind::kFmDeep:
      return "fm_deep";
    case Kind::kTargetAttention:
      return "target_attention";
    case Kind::kTwoTower:
      return "two_tower";
  }
  return "unknown";
}

Kind kind_from_string(const std::string& s) {
  if (s == "fm_deep") return Kind::kFmDeep;
  if (s == "target_attention") return Kind::kTargetAttention;
  if (s == "two_tower") return Kind::kTwoTower;
  throw UsageError("unknown backbone: " + s);
}

namespace {

ag::Var tower(ag::Tape& t, const Linear& l1, const Linear& l2, const Linear& out, ag::Var x) {
  return out(t, ag::gelu(l2(t, ag::gelu(l1(t, x)))));
}

void check_w(const std::optional<ag::Var>& w, int w_dim, std::size_t batch) {
  if (!w) return;
  if (w_dim == 0) throw std::invalid_argument("backbone was built without a CF-feature input");
  if (w->cols() != w_dim || w->rows() != static_cast<ag::Index>(batch)) {
    throw std::invalid_argument("CF feature has the wrong shape");
  }
}

}  // namespace

FmDeep::FmDeep(const FeatureSpace& space, int dim, int w_dim, ag::ParamSet& ps)
    : dim_(dim),
      w_dim_(w_dim),
      fields_("fm", space, dim, ps),
      first_order_("fm.linear", space, 1, ps),
      bias_(&ps.add("fm.bias", 1, 1)) {
  const int in = fields_.num_fields() * dim + w_dim;
  l1_ = Linear::create(ps, "fm.tower1", in, kTowerWidth);
  l2_ = Linear::create(ps, "fm.tower2", kTowerWidth, kTowerWidth);
  out_ = Linear::create(ps, "fm.out", kTowerWidth, 1);
}

void FmDeep::init(Rng& rng) {
  fields_.init(rng);
  first_order_.init(rng);
  bias_->value.setZero();
  l1_.init(rng);
  l2_.init(rng);
  out_.init(rng);
}

ag::Var FmDeep::forward(ag::Tape& t, Batch batch, std::optional<ag::Var> w) const {
  check_w(w, w_dim_, batch.size());
  const auto f = fields_.lookup(t, batch);
  std::vector<ag::Var> v{f.user, f.item, f.history_mean};
  v.insert(v.end(), f.user_attrs.begin(), f.user_attrs.end());
  v.insert(v.end(), f.item_attrs.begin(), f.item_attrs.end());

  const auto lin = first_order_.lookup(t, batch);
  std::vector<ag::Var> lv{lin.user, lin.item, lin.history_mean};
  lv.insert(lv.end(), lin.user_attrs.begin(), lin.user_attrs.end());
  lv.insert(lv.end(), lin.item_attrs.begin(), lin.item_attrs.end());
  ag::Var first = lv.front();
  for (std::size_t i = 1; i < lv.size(); ++i) first = ag::add(first, lv[i]);

  // sum_{i<j} <v_i, v_j> = 0.5 * (|sum v|^2 - sum |v_i|^2)
  ag::Var s = v.front();
  ag::Var sq = ag::mul(v.front(), v.front());
  for (std::size_t i = 1; i < v.size(); ++i) {
    s = ag::add(s, v[i]);
    sq = ag::add(sq, ag::mul(v[i], v[i]));
  }
  ag::Var pairwise = ag::scale(ag::row_sum(ag::sub(ag::mul(s, s), sq)), 0.5);

  std::vector<ag::Var> deep_in = v;
  if (w) deep_in.push_back(*w);
  else if (w_dim_ > 0) deep_in.push_back(t.constant(ag::Matrix::Zero(static_cast<ag::Index>(batch.size()), w_dim_)));
  ag::Var deep = tower(t, l1_, l2_, out_, ag::hcat(deep_in));

  ag::Var logit = ag::add(ag::add(first, pairwise), deep);
  return ag::add_bias(logit, t.param(*bias_));
}

TargetAttention::TargetAttention(const FeatureSpace& space, int dim, int w_dim, ag::ParamSet& ps)
    : dim_(dim), w_dim_(w_dim), fields_("din", space, dim, ps) {
  att1_ = Linear::create(ps, "din.att1", 4 * dim, kAttentionWidth);
  att2_ = Linear::create(ps, "din.att2", kAttentionWidth, 1);
  // pooled history (in place of the history mean) + item + user + attribute fields
  const int in = fields_.num_fields() * dim + w_dim;
  l1_ = Linear::create(ps, "din.tower1", in, kTowerWidth);
  l2_ = Linear::create(ps, "din.tower2", kTowerWidth, kTowerWidth);
  out_ = Linear::create(ps, "din.out", kTowerWidth, 1);
}

void TargetAttention::init(Rng& rng) {
  fields_.init(rng);
  att1_.init(rng);
  att2_.init(rng);
  l1_.init(rng);
  l2_.init(rng);
  out_.init(rng);
}

TargetAttention::Pooled TargetAttention::pool(ag::Tape& t, Batch batch) const {
  Pooled p;
  p.fields = fields_.lookup(t, batch);
  const auto& f = p.fields;
  const auto n = static_cast<ag::Index>(batch.size());
  if (f.history_rows.rows() == 0) {
    p.weights = t.constant(ag::Matrix::Zero(0, 1));
    p.pooled = t.constant(ag::Matrix::Zero(n, dim_));
    return p;
  }
  // Repeat each example's target row once per history item.
  std::vector<int> owner;
  for (std::size_t b = 0; b + 1 < f.history_seg.size(); ++b) {
    for (int r = f.history_seg[b]; r < f.history_seg[b + 1]; ++r) owner.push_back(static_cast<int>(b));
  }
  ag::Var tgt = ag::select_rows(f.item, owner);
  const ag::Var feats[] = {f.history_rows, tgt, ag::mul(f.history_rows, tgt), ag::sub(f.history_rows, tgt)};
  ag::Var scores = att2_(t, ag::gelu(att1_(t, ag::hcat(feats))));
  p.weights = ag::segment_softmax(scores, f.history_seg);
  p.pooled = ag::segment_sum(ag::scale_rows(f.history_rows, p.weights), f.history_seg);
  return p;
}

ag::Var TargetAttention::attention(ag::Tape& t, Batch batch) const { return pool(t, batch).weights; }

ag::Var TargetAttention::forward(ag::Tape& t, Batch batch, std::optional<ag::Var> w) const {
  check_w(w, w_dim_, batch.size());
  const auto p = pool(t, batch);
  std::vector<ag::Var> in{p.pooled, p.fields.item, p.fields.user};
  in.insert(in.end(), p.fields.user_attrs.begin(), p.fields.user_attrs.end());
  in.insert(in.end(), p.fields.item_attrs.begin(), p.fields.item_attrs.end());
  if (w) in.push_back(*w);
  else if (w_dim_ > 0) in.push_back(t.constant(ag::Matrix::Zero(static_cast<ag::Index>(batch.size()), w_dim_)));
  return tower(t, l1_, l2_, out_, ag::hcat(in));
}

TwoTower::TwoTower(const FeatureSpace& space, int dim, ag::ParamSet& ps)
    : dim_(dim),
      hist_emb_(&ps.add("tt.hist_emb", space.n_items, dim)),
      item_out_(&ps.add("tt.item_out", space.n_items, dim)) {
  l1_ = Linear::create(ps, "tt.tower1", dim, kTowerWidth);
  l2_ = Linear::create(ps, "tt.tower2", kTowerWidth, dim);
}

void TwoTower::init(Rng& rng) {
  init_uniform(*hist_emb_, dim_, rng);
  init_uniform(*item_out_, dim_, rng);
  l1_.init(rng);
  l2_.init(rng);
}

ag::Var TwoTower::user_vectors(ag::Tape& t, Batch batch) const {
  std::vector<int> hist;
  ag::Segments seg{0};
  for (const auto* e : batch) {
    hist.insert(hist.end(), e->history.begin(), e->history.end());
    seg.push_back(static_cast<int>(hist.size()));
  }
  ag::Var mean_hist = hist.empty() ? t.constant(ag::Matrix::Zero(static_cast<ag::Index>(batch.size()), dim_))
                                   : ag::segment_mean(ag::gather(t, *hist_emb_, hist), seg);
  return l2_(t, ag::gelu(l1_(t, mean_hist)));
}

ag::Var TwoTower::fuse(ag::Var user, std::optional<ag::Var> w) const {
  if (!w) return user;
  return ag::add(user, *w);
}

ag::Var TwoTower::score(ag::Tape& t, ag::Var fused, std::span<const int> items, int group) const {
  return ag::group_dot(fused, ag::gather(t, *item_out_, items), group);
}

}  // namespace llmcf::backbone
