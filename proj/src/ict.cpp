#include "llmcf/ict.hpp"

#include <stdexcept>

#include "llmcf/errors.hpp"

namespace llmcf::ict {

void IctConfig::validate() const {
  if (d <= 0 || heads <= 0 || d % heads != 0) throw UsageError("ICT model dim must be divisible by the head count");
  if (layers < 0 || k_max < 0 || d_text <= 0 || ff_mult <= 0) throw UsageError("invalid ICT configuration");
}

nlohmann::json IctConfig::to_json() const {
  return {{"d", d}, {"layers", layers}, {"heads", heads}, {"k_max", k_max}, {"d_text", d_text}, {"ff_mult", ff_mult}};
}

IctConfig IctConfig::from_json(const nlohmann::json& j) {
  IctConfig c;
  c.d = j.at("d").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.k_max = j.at("k_max").get<int>();
  c.d_text = j.at("d_text").get<int>();
  c.ff_mult = j.value("ff_mult", 4);
  return c;
}

IctSequence assemble(const data::Example& query, const text::TextEmbedding& query_text,
                     std::span<const cot::CoTRecord* const> retrieved, const AssembleOptions& opts) {
  IctSequence s;
  s.query = &query;
  s.query_text = &query_text;
  s.mask_query_target = opts.mask_target;
  s.context.assign(retrieved.begin(), retrieved.end());
  for (std::size_t k = 0; k < retrieved.size(); ++k) {
    const int slot = static_cast<int>(k);
    s.record_positions.push_back(static_cast<int>(s.tokens.size()));
    s.tokens.push_back({TokenKind::kRecord, slot});
    if (opts.include_cot) s.tokens.push_back({TokenKind::kCot, slot});
    s.tokens.push_back({TokenKind::kLabel, slot});
  }
  s.tokens.push_back({TokenKind::kRecord, -1});
  return s;
}

IctModule::IctModule(const IctConfig& cfg, const FeatureSpace& space, ag::ParamSet& ps)
    : cfg_(cfg), fields_("ict", space, cfg.d, ps) {
  cfg_.validate();
  const int d = cfg.d;
  text_proj_ = Linear::create(ps, "ict.text_proj", cfg.d_text, d);
  feat_proj_ = Linear::create(ps, "ict.feat_proj", 2 * d, d);
  cot_proj1_ = Linear::create(ps, "ict.cot_proj1", cfg.d_text, d);
  cot_proj2_ = Linear::create(ps, "ict.cot_proj2", d, d);
  label_emb_ = &ps.add("ict.label_emb", 2, d);
  pos_emb_ = &ps.add("ict.pos_emb", cfg.max_length(), d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "ict.block" + std::to_string(l);
    Block b{};
    b.ln1_g = &ps.add(p + ".ln1.g", 1, d);
    b.ln1_b = &ps.add(p + ".ln1.b", 1, d);
    b.qkv = Linear::create(ps, p + ".attn.qkv", d, 3 * d);
    b.proj = Linear::create(ps, p + ".attn.proj", d, d);
    b.ln2_g = &ps.add(p + ".ln2.g", 1, d);
    b.ln2_b = &ps.add(p + ".ln2.b", 1, d);
    b.ff1 = Linear::create(ps, p + ".ff1", d, cfg.ff_mult * d);
    b.ff2 = Linear::create(ps, p + ".ff2", cfg.ff_mult * d, d);
    blocks_.push_back(b);
  }
}

void IctModule::init(Rng& rng) {
  fields_.init(rng);
  text_proj_.init(rng);
  feat_proj_.init(rng);
  cot_proj1_.init(rng);
  cot_proj2_.init(rng);
  init_uniform(*label_emb_, cfg_.d, rng);
  init_uniform(*pos_emb_, cfg_.d, rng);
  for (auto& b : blocks_) {
    b.ln1_g->value.setOnes();
    b.ln1_b->value.setZero();
    b.qkv.init(rng);
    b.proj.init(rng);
    b.ln2_g->value.setOnes();
    b.ln2_b->value.setZero();
    b.ff1.init(rng);
    b.ff2.init(rng);
  }
}

ag::Var IctModule::encode_records(ag::Tape& t, std::span<const data::Example* const> examples,
                                  std::span<const text::TextEmbedding* const> texts,
                                  std::span<const int> masked) const {
  const auto n = static_cast<ag::Index>(examples.size());
  const auto f = fields_.lookup(t, examples);
  // Mean over the ID fields present for each token: history only when
  // non-empty, target fields only when not masked.
  std::vector<ag::Var> always{f.user, f.history_mean};
  always.insert(always.end(), f.user_attrs.begin(), f.user_attrs.end());
  ag::Var acc = always.front();
  for (std::size_t i = 1; i < always.size(); ++i) acc = ag::add(acc, always[i]);
  ag::Var target = f.item;
  for (const auto& a : f.item_attrs) target = ag::add(target, a);
  ag::Matrix keep(n, 1);
  ag::Matrix inv_count(n, 1);
  const int n_target = 1 + static_cast<int>(f.item_attrs.size());
  const int n_user = 1 + static_cast<int>(f.user_attrs.size());
  for (ag::Index r = 0; r < n; ++r) {
    const bool m = masked[static_cast<std::size_t>(r)] != 0;
    keep(r, 0) = m ? 0.0 : 1.0;
    const int count = n_user + (f.history_counts[static_cast<std::size_t>(r)] > 0 ? 1 : 0) + (m ? 0 : n_target);
    inv_count(r, 0) = 1.0 / count;
  }
  acc = ag::add(acc, ag::scale_rows(target, t.constant(keep)));
  ag::Var field_mean = ag::scale_rows(acc, t.constant(inv_count));

  ag::Matrix tx(n, cfg_.d_text);
  for (ag::Index r = 0; r < n; ++r) {
    const auto& v = texts[static_cast<std::size_t>(r)]->values;
    if (static_cast<int>(v.size()) != cfg_.d_text) throw std::invalid_argument("text embedding dimension mismatch");
    for (int c = 0; c < cfg_.d_text; ++c) tx(r, c) = v[static_cast<std::size_t>(c)];
  }
  ag::Var text_part = text_proj_(t, t.constant(std::move(tx)));
  const ag::Var parts[] = {field_mean, text_part};
  return feat_proj_(t, ag::hcat(parts));
}

TokenBatch IctModule::embed_tokens(ag::Tape& t, std::span<const IctSequence> seqs) const {
  TokenBatch out;
  std::vector<const data::Example*> r_examples;
  std::vector<const text::TextEmbedding*> r_texts;
  std::vector<int> r_masked;
  std::vector<int> r_rows;
  std::vector<const text::TextEmbedding*> c_embs;
  std::vector<int> c_rows;
  std::vector<int> l_labels;
  std::vector<int> l_rows;
  std::vector<int> positions;
  out.segments.push_back(0);
  out.context_segments.push_back(0);
  int row = 0;
  for (const auto& s : seqs) {
    if (static_cast<int>(s.length()) > cfg_.max_length()) {
      throw std::invalid_argument("ICT sequence of length " + std::to_string(s.length()) +
                                  " exceeds the positional table (" + std::to_string(cfg_.max_length()) + ")");
    }
    for (std::size_t p = 0; p < s.tokens.size(); ++p, ++row) {
      const IctToken& tok = s.tokens[p];
      positions.push_back(static_cast<int>(p));
      const cot::CoTRecord* rec = tok.slot >= 0 ? s.context[static_cast<std::size_t>(tok.slot)] : nullptr;
      switch (tok.kind) {
        case TokenKind::kRecord:
          r_rows.push_back(row);
          if (rec == nullptr) {
            r_examples.push_back(s.query);
            r_texts.push_back(s.query_text);
            r_masked.push_back(s.mask_query_target ? 1 : 0);
            out.query_rows.push_back(row);
          } else {
            r_examples.push_back(&rec->example);
            r_texts.push_back(&rec->key_embedding);
            r_masked.push_back(0);
            out.context_record_rows.push_back(row);
          }
          break;
        case TokenKind::kCot:
          c_embs.push_back(&rec->cot_embedding);
          c_rows.push_back(row);
          break;
        case TokenKind::kLabel:
          l_labels.push_back(rec->label);
          l_rows.push_back(row);
          break;
      }
    }
    out.segments.push_back(row);
    out.context_segments.push_back(static_cast<int>(out.context_record_rows.size()));
  }

  std::vector<ag::Var> parts;
  std::vector<int> perm(static_cast<std::size_t>(row), -1);
  int stacked = 0;
  parts.push_back(encode_records(t, r_examples, r_texts, r_masked));
  for (int r : r_rows) perm[static_cast<std::size_t>(r)] = stacked++;
  if (!c_rows.empty()) {
    ag::Matrix cx(static_cast<ag::Index>(c_embs.size()), cfg_.d_text);
    for (std::size_t i = 0; i < c_embs.size(); ++i) {
      const auto& v = c_embs[i]->values;
      if (static_cast<int>(v.size()) != cfg_.d_text) throw std::invalid_argument("CoT embedding dimension mismatch");
      for (int c = 0; c < cfg_.d_text; ++c) cx(static_cast<ag::Index>(i), c) = v[static_cast<std::size_t>(c)];
    }
    ag::Var c_tok = cot_proj2_(t, ag::gelu(cot_proj1_(t, t.constant(std::move(cx)))));
    parts.push_back(c_tok);
    for (int r : c_rows) perm[static_cast<std::size_t>(r)] = stacked++;
    // C rows are produced in context order, matching context_record_rows.
    out.cot_targets = ag::detach(c_tok);
    out.has_cot = true;
  }
  if (!l_rows.empty()) {
    parts.push_back(ag::gather(t, *label_emb_, l_labels));
    for (int r : l_rows) perm[static_cast<std::size_t>(r)] = stacked++;
  }
  out.tokens_no_pos = ag::select_rows(ag::vstack(parts), perm);
  out.tokens = ag::add(out.tokens_no_pos, ag::gather(t, *pos_emb_, positions));
  return out;
}

ag::Var IctModule::decoder_forward(ag::Tape& t, ag::Var x, const ag::Segments& segments) const {
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    ag::Var h = ag::layer_norm(x, t.param(*b.ln1_g), t.param(*b.ln1_b));
    ag::Var a = ag::causal_attention(b.qkv(t, h), segments, cfg_.heads);
    x = ag::add(x, b.proj(t, a));
    ag::Var h2 = ag::layer_norm(x, t.param(*b.ln2_g), t.param(*b.ln2_b));
    x = ag::add(x, b.ff2(t, ag::gelu(b.ff1(t, h2))));
    if (!x.value().allFinite()) {
      throw NumericalError("non-finite activations in decoder layer " + std::to_string(l));
    }
  }
  return x;
}

ag::Var IctModule::cf_feature(ag::Var hidden, const TokenBatch& batch) {
  return ag::select_rows(hidden, batch.query_rows);
}

ag::Var IctModule::mean_pool_feature(const TokenBatch& batch) {
  return ag::segment_mean(batch.tokens, batch.segments);
}

ag::Var IctModule::recon_loss(ag::Var hidden, const TokenBatch& batch) {
  ag::Tape& t = *hidden.tape;
  const auto n_seq = static_cast<ag::Index>(batch.segments.size()) - 1;
  if (!batch.has_cot || batch.context_record_rows.empty()) {
    return t.constant(ag::Matrix::Zero(n_seq, 1));
  }
  ag::Var h = ag::select_rows(hidden, batch.context_record_rows);
  ag::Var cos = ag::cosine_rows(batch.cot_targets, h);
  ag::Var ones = t.constant(ag::Matrix::Ones(cos.rows(), 1));
  return ag::segment_mean(ag::sub(ones, cos), batch.context_segments);
}

}  // namespace llmcf::ict
