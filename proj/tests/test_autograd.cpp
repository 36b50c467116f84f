#include <doctest.h>

#include <cmath>

#include "llmcf/autograd.hpp"
#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"
#include "support.hpp"

using namespace llmcf;
using ag::Matrix;
using ag::Var;

namespace {

void fill(ag::Parameter& p, Rng& rng, double scale = 1.0) {
  for (ag::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = scale * rng.uniform(-1.0, 1.0);
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Var probe(ag::Tape& t, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Matrix w(y.rows(), y.cols());
  for (ag::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1.0, 1.0);
  return ag::sum(ag::mul(y, t.constant(w)));
}

void check(ag::ParamSet& ps, const std::function<Var(ag::Tape&)>& f) {
  const auto rep = testing::grad_check(ps, f);
  INFO("worst parameter " << rep.worst_param);
  CHECK(rep.worst_rel < 1e-6);
}

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
  Rng rng(7);
  ag::ParamSet ps;
  auto& a = ps.add("a", 3, 4);
  auto& b = ps.add("b", 4, 2);
  auto& c = ps.add("c", 3, 4);
  auto& bias = ps.add("bias", 1, 4);
  fill(a, rng);
  fill(b, rng);
  fill(c, rng);
  fill(bias, rng);
  check(ps, [&](ag::Tape& t) {
    Var x = ag::add_bias(t.param(a), t.param(bias));
    Var y = ag::sub(ag::mul(x, t.param(c)), ag::scale(t.param(c), 0.3));
    Var z = ag::matmul(ag::gelu(y), t.param(b));
    return ag::add(probe(t, z, 1), ag::mean(ag::add(x, t.param(c))));
  });
}

TEST_CASE("layer norm gradient") {
  Rng rng(3);
  ag::ParamSet ps;
  auto& x = ps.add("x", 5, 6);
  auto& g = ps.add("g", 1, 6);
  auto& b = ps.add("b", 1, 6);
  fill(x, rng);
  fill(g, rng);
  fill(b, rng);
  check(ps, [&](ag::Tape& t) { return probe(t, ag::layer_norm(t.param(x), t.param(g), t.param(b)), 2); });
}

TEST_CASE("row plumbing ops") {
  Rng rng(5);
  ag::ParamSet ps;
  auto& table = ps.add("table", 6, 3);
  auto& a = ps.add("a", 4, 3);
  auto& col = ps.add("col", 4, 1);
  fill(table, rng);
  fill(a, rng);
  fill(col, rng);
  const std::vector<int> rows = {2, 0, 2, 5};
  const std::vector<int> sel = {3, 1, 1};
  check(ps, [&](ag::Tape& t) {
    Var gth = ag::gather(t, table, rows);
    const Var parts[] = {gth, t.param(a)};
    Var v = ag::vstack(parts);
    const Var cols[] = {gth, ag::scale_rows(t.param(a), t.param(col))};
    Var h = ag::hcat(cols);
    Var s = ag::select_rows(v, sel);
    return ag::add(ag::add(probe(t, h, 3), probe(t, s, 4)), ag::sum(ag::row_sum(v)));
  });
}

TEST_CASE("segment reductions and softmax") {
  Rng rng(11);
  ag::ParamSet ps;
  auto& a = ps.add("a", 6, 3);
  auto& s = ps.add("s", 6, 1);
  fill(a, rng);
  fill(s, rng);
  const ag::Segments seg = {0, 2, 2, 6};
  check(ps, [&](ag::Tape& t) {
    Var sm = ag::segment_softmax(t.param(s), seg);
    return ag::add(ag::add(probe(t, ag::segment_sum(t.param(a), seg), 5), probe(t, ag::segment_mean(t.param(a), seg), 6)),
                   probe(t, sm, 7));
  });

  ag::Tape t;
  Var sm = ag::segment_mean(t.constant(Matrix::Ones(6, 3)), seg);
  CHECK(sm.value().row(1).isZero());
  CHECK(sm.value()(0, 0) == doctest::Approx(1.0));
  Var sw = ag::segment_softmax(t.constant(Matrix::Zero(6, 1)), seg);
  CHECK(sw.value()(0, 0) == doctest::Approx(0.5));
  CHECK(sw.value()(2, 0) == doctest::Approx(0.25));
}

TEST_CASE("causal attention gradient and masking") {
  Rng rng(13);
  ag::ParamSet ps;
  auto& qkv = ps.add("qkv", 7, 12);
  fill(qkv, rng);
  const ag::Segments seg = {0, 3, 7};
  check(ps, [&](ag::Tape& t) { return probe(t, ag::causal_attention(t.param(qkv), seg, 2), 8); });

  // Changing row 5 (segment two) cannot affect rows 0..4.
  ag::Tape t1;
  const Matrix base = ag::causal_attention(t1.constant(qkv.value), seg, 2).value();
  Matrix moved = qkv.value;
  moved.row(5).setConstant(3.0);
  ag::Tape t2;
  const Matrix after = ag::causal_attention(t2.constant(moved), seg, 2).value();
  CHECK(base.topRows(5) == after.topRows(5));
  CHECK(base.row(5) != after.row(5));
}

TEST_CASE("losses and cosine") {
  Rng rng(17);
  ag::ParamSet ps;
  auto& a = ps.add("a", 4, 5);
  auto& b = ps.add("b", 4, 5);
  auto& logits = ps.add("logits", 4, 1);
  auto& u = ps.add("u", 2, 3);
  auto& items = ps.add("items", 6, 3);
  fill(a, rng);
  fill(b, rng);
  fill(logits, rng, 2.0);
  fill(u, rng);
  fill(items, rng);
  const std::vector<int> labels = {1, 0, 0, 1};
  const std::vector<int> targets = {0, 2};
  check(ps, [&](ag::Tape& t) {
    Var c = ag::cosine_rows(t.param(a), t.param(b));
    Var l = ag::bce_with_logits(t.param(logits), labels);
    Var s = ag::group_dot(t.param(u), t.param(items), 3);
    Var x = ag::softmax_xent(s, targets);
    return ag::add(ag::add(probe(t, c, 9), ag::sum(l)), ag::sum(x));
  });
}

TEST_CASE("detach blocks gradient") {
  ag::ParamSet ps;
  auto& a = ps.add("a", 2, 2);
  a.value.setConstant(1.5);
  ag::Tape t;
  Var y = ag::mul(ag::detach(t.param(a)), t.param(a));
  t.backward(ag::sum(y));
  CHECK(a.grad(0, 0) == doctest::Approx(1.5));
}

TEST_CASE("bce clamps and zeroes gradient beyond the clamp") {
  ag::ParamSet ps;
  auto& z = ps.add("z", 1, 1);
  z.value(0, 0) = 40.0;
  ag::Tape t;
  Var l = ag::bce_with_logits(t.param(z), std::vector<int>{1});
  CHECK(l.scalar() < 1e-6);
  t.backward(ag::sum(l));
  CHECK(z.grad(0, 0) == 0.0);
}

TEST_CASE("gather rejects out-of-range indices") {
  ag::ParamSet ps;
  auto& table = ps.add("tbl", 3, 2);
  ag::Tape t;
  CHECK_THROWS_AS(ag::gather(t, table, std::vector<int>{3}), std::out_of_range);
  CHECK_THROWS_AS(ag::gather(t, table, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("cosine rejects zero vectors") {
  ag::Tape t;
  CHECK_THROWS_AS(ag::cosine_rows(t.constant(Matrix::Zero(1, 3)), t.constant(Matrix::Ones(1, 3))), NumericalError);
}
