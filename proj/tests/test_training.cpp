#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "llmcf/errors.hpp"
#include "llmcf/training.hpp"
#include "small_data.hpp"
#include "support.hpp"

using namespace llmcf;
using namespace llmcf::train;
using ag::Matrix;

namespace {

double batch_loss(const Model& m, std::span<const Query> qs, double alpha) {
  ag::Tape t;
  const auto out = m.forward(t, qs);
  std::vector<int> labels;
  for (const auto& q : qs) labels.push_back(q.example->label);
  return total_loss(out.recon, ag::bce_with_logits(out.score, labels), alpha).scalar();
}

std::vector<Query> first_queries(const PreparedSet& set, std::size_t n) {
  std::vector<Query> qs;
  for (std::size_t i = 0; i < std::min(n, set.size()); ++i) qs.push_back(set.query(i));
  return qs;
}

}  // namespace

TEST_CASE("bce_loss fixtures") {
  CHECK(bce_loss(0.0, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(0.0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(1e6, 1) < 1e-6);
  CHECK(std::isfinite(bce_loss(1e6, 0)));
  CHECK(std::isfinite(bce_loss(-1e6, 1)));
}

TEST_CASE("sampled softmax loss") {
  const std::vector<double> equal(129, 0.37);
  CHECK(sampled_softmax_loss(equal) == doctest::Approx(std::log(129.0)).epsilon(1e-12));
  std::vector<double> sat(129, 0.0);
  sat[0] = 30.0;
  CHECK(sampled_softmax_loss(sat) < 1e-10);

  // Dense oracle over a 129-item catalog, and agreement with the tape op.
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(129);
    for (auto& x : s) x = rng.uniform(-5, 5);
    double z = 0.0;
    for (double x : s) z += std::exp(x);
    const double dense = -std::log(std::exp(s[0]) / z);
    CHECK(sampled_softmax_loss(s) == doctest::Approx(dense).epsilon(1e-10));
    ag::Tape t;
    Matrix m(1, 129);
    for (int i = 0; i < 129; ++i) m(0, i) = s[static_cast<std::size_t>(i)];
    const std::vector<int> target{0};
    CHECK(ag::softmax_xent(t.constant(m), target).value()(0, 0) == doctest::Approx(dense).epsilon(1e-10));
  }
}

TEST_CASE("total_loss fixtures") {
  CHECK(total_loss(0.2, 0.7, 0.5) == doctest::Approx(0.8));
  CHECK(total_loss(0.0, 0.7, 0.5) == 0.7);
  CHECK(std::abs(total_loss(0.9, 0.7, 1e-9) - 0.7) < 1e-8);
  ag::Tape t;
  Matrix lr(2, 1);
  lr << 0.0, 0.4;
  Matrix lo(2, 1);
  lo << 0.4, 0.4;
  CHECK(total_loss(t.constant(lr), t.constant(lo), 0.5).scalar() == doctest::Approx(0.5));
}

TEST_CASE("Adam single-step closed form, zero gradient and shared histories") {
  ag::ParamSet ps;
  auto& a = ps.add("a", 1, 1);
  auto& b = ps.add("b", 1, 1);
  auto& z = ps.add("z", 2, 2);
  z.value << 1, 2, 3, 4;
  const Matrix z0 = z.value;
  Adam opt(AdamConfig{}, ps);
  a.grad(0, 0) = 1.0;
  b.grad(0, 0) = 1.0;
  opt.step(ps);
  CHECK(a.value(0, 0) == doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(z.value == z0);
  for (double g : {0.3, -2.0, 5.0}) {
    a.grad(0, 0) = g;
    b.grad(0, 0) = g;
    opt.step(ps);
  }
  CHECK(a.value(0, 0) == b.value(0, 0));
  CHECK(opt.steps() == 4);
}

TEST_CASE("Adam rejects non-finite gradients before touching parameters") {
  ag::ParamSet ps;
  auto& a = ps.add("first", 1, 2);
  auto& b = ps.add("poisoned", 1, 2);
  a.grad.setConstant(1.0);
  b.grad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  Adam opt(AdamConfig{}, ps);
  try {
    opt.step(ps);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("poisoned") != std::string::npos);
  }
  CHECK(a.value.isZero());
  CHECK(opt.steps() == 0);
}

TEST_CASE("gradient clipping") {
  ag::ParamSet ps;
  auto& a = ps.add("a", 1, 2);
  a.grad << 3.0, 4.0;
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad.norm() == doctest::Approx(1.0));
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad.norm() == doctest::Approx(1.0));
}

TEST_CASE("early stopping rule") {
  EarlyStopping es(3);
  const std::vector<double> seq = {0.60, 0.61, 0.60, 0.60, 0.60};
  std::vector<bool> stops;
  for (double m : seq) stops.push_back(es.update(m));
  CHECK(stops == std::vector<bool>{false, false, false, false, true});
  CHECK(es.best_epoch() == 2);
  CHECK(es.best() == 0.61);
}

TEST_CASE("train config JSON: round trip, unknown keys and validation") {
  TrainConfig c = testing::small_config(3);
  c.alpha = 0.3;
  c.variant = Variant::kNoCot;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto j = c.to_json();
  j["learning_rate"] = 0.1;
  CHECK_THROWS_AS(TrainConfig::from_json(j), UsageError);
  auto ji = c.to_json();
  ji["ict"]["depth"] = 3;
  CHECK_THROWS_AS(TrainConfig::from_json(ji), UsageError);

  TrainConfig bad = c;
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  TrainConfig odd = c;
  odd.k = 3;
  CHECK_THROWS_AS(odd.validate(), UsageError);
  TrainConfig mismatch = c;
  mismatch.backbone = backbone::Kind::kTwoTower;
  CHECK_THROWS_AS(mismatch.validate(), UsageError);

  for (Variant v : {Variant::kFull, Variant::kNoCot, Variant::kMeanPool, Variant::kNoBalance, Variant::kPlain}) {
    CHECK(variant_from_string(to_string(v)) == v);
  }
  CHECK_THROWS(variant_from_string("w/o cot"));
}

TEST_CASE("sample_candidates") {
  const auto w = testing::toy_world(1, 8, 0, 4);
  std::vector<Query> qs;
  for (const auto& e : w.examples) qs.push_back({&e, nullptr, {}});
  Rng r1(9);
  Rng r2(9);
  const auto a = sample_candidates(qs, 7, 5, r1);
  const auto b = sample_candidates(qs, 7, 5, r2);
  CHECK(a == b);
  REQUIRE(a.size() == 8 * 6);
  for (std::size_t q = 0; q < qs.size(); ++q) {
    CHECK(a[q * 6] == qs[q].example->target_item_index);
    for (std::size_t j = 1; j < 6; ++j) {
      const int item = a[q * 6 + j];
      CHECK(item != qs[q].example->target_item_index);
      CHECK(item >= 1);
      CHECK(item <= 6);
    }
  }
}

TEST_CASE("a single Adam step decreases the batch loss") {
  const auto sd = testing::small_data(11);
  const auto td = sd.train_data();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (Variant v : {Variant::kFull, Variant::kPlain}) {
      auto cfg = testing::small_config(seed, v);
      Model m(cfg, sd.space());
      m.init();
      const auto set = prepare(cfg, td, sd.data.split.train);
      const auto qs = first_queries(set, 32);
      const double before = batch_loss(m, qs, cfg.alpha);
      ag::Tape t;
      m.params().zero_grad();
      const auto out = m.forward(t, qs);
      std::vector<int> labels;
      for (const auto& q : qs) labels.push_back(q.example->label);
      t.backward(total_loss(out.recon, ag::bce_with_logits(out.score, labels), cfg.alpha));
      Adam opt(AdamConfig{cfg.lr}, m.params());
      opt.step(m.params());
      CHECK(batch_loss(m, qs, cfg.alpha) < before);
    }
  }
}

TEST_CASE("training is deterministic and honours anti-leakage") {
  const auto sd = testing::small_data(12);
  const auto td = sd.train_data();
  const auto cfg = testing::small_config(4);
  auto run = [&](std::size_t* audited, std::size_t* violations) {
    auto m = std::make_unique<Model>(cfg, sd.space());
    m->init();
    TrainHooks hooks;
    hooks.on_context = [&](const Query& q) {
      for (const auto* r : q.context) {
        ++*audited;
        if (!(r->timestamp < q.example->timestamp)) ++*violations;
        if (r->example.id == q.example->id) ++*violations;
      }
    };
    const auto res = train::train(cfg, td, *m, hooks);
    return std::make_pair(std::move(m), res);
  };
  std::size_t audited = 0;
  std::size_t violations = 0;
  auto [m1, r1] = run(&audited, &violations);
  auto [m2, r2] = run(&audited, &violations);
  CHECK(audited > 0);
  CHECK(violations == 0);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].loss == r2.history[i].loss);
    CHECK(r1.history[i].valid_metric == r2.history[i].valid_metric);
  }
  auto p1 = m1->params().begin();
  for (auto p2 = m2->params().begin(); p2 != m2->params().end(); ++p1, ++p2) CHECK((*p1)->value == (*p2)->value);
  CHECK(r1.monitored == "valid_auc");
  CHECK(r1.best_epoch >= 1);
}

TEST_CASE("every variant trains and evaluates") {
  const auto sd = testing::small_data(13);
  const auto td = sd.train_data();
  for (Variant v : {Variant::kFull, Variant::kNoCot, Variant::kMeanPool, Variant::kNoBalance, Variant::kPlain}) {
    auto cfg = testing::small_config(1, v);
    cfg.max_epochs = 1;
    Model m(cfg, sd.space());
    m.init();
    const auto res = train::train(cfg, td, m);
    CHECK(res.history.size() == 1);
    const auto test = prepare(cfg, td, sd.data.split.test);
    const auto rep = evaluate(m, test, "test");
    REQUIRE(rep.auc.has_value());
    CHECK(*rep.auc >= 0.0);
    CHECK(*rep.auc <= 1.0);
    CHECK(rep.hit.empty());
    if (v == Variant::kNoCot || v == Variant::kPlain || v == Variant::kMeanPool) {
      CHECK(res.history[0].recon == 0.0);
    } else {
      CHECK(res.history[0].recon > 0.0);
    }
  }
}

TEST_CASE("retrieval task with the two-tower backbone") {
  const auto sd = testing::small_data(14);
  const auto td = sd.train_data();
  auto cfg = testing::small_config(2);
  cfg.task = Task::kRetrieval;
  cfg.backbone = backbone::Kind::kTwoTower;
  cfg.num_negatives = 8;
  cfg.max_epochs = 1;
  Model m(cfg, sd.space());
  m.init();
  const auto res = train::train(cfg, td, m);
  CHECK(res.monitored == "valid_ndcg@10");
  const auto test = prepare(cfg, td, sd.data.split.test);
  for (const auto* e : test.examples) CHECK(e->label == 1);
  const auto ranks = target_ranks(m, test, 64);
  for (int r : ranks) {
    CHECK(r >= 1);
    CHECK(r <= sd.space().n_items - 1);
  }
  const auto rep = evaluate(m, test, "test");
  CHECK_FALSE(rep.auc.has_value());
  CHECK(rep.hit.count(10) == 1);
}

TEST_CASE("k = 0 needs no store") {
  const auto sd = testing::small_data(15);
  auto td = sd.train_data();
  td.store = nullptr;
  auto cfg = testing::small_config(3);
  cfg.k = 0;
  cfg.max_epochs = 1;
  Model m(cfg, sd.space());
  m.init();
  CHECK_NOTHROW(train::train(cfg, td, m));
}
