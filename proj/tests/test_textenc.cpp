#include <doctest.h>

#include <cmath>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"
#include "llmcf/textenc.hpp"
#include "support.hpp"

using namespace llmcf;
using namespace llmcf::text;

namespace {

double norm(const TextEmbedding& e) {
  double s = 0.0;
  for (float v : e.values) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

std::string random_text(Rng& rng) {
  static const char* words[] = {"red", "blue", "soap", "lamp", "desk", "chair", "book", "pen", "cup", "shoe",
                                "hat", "sun", "moon", "tree", "leaf", "rock", "fish", "bird", "door", "key"};
  std::string s;
  const int n = 3 + static_cast<int>(rng.below(8));
  for (int i = 0; i < n; ++i) s += std::string(words[rng.below(20)]) + " ";
  return s;
}

}  // namespace

TEST_CASE("hashing encoder is deterministic, unit norm and seed dependent") {
  HashingEncoder e1(1);
  HashingEncoder e2(2);
  Rng rng(4);
  double mean_cos = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::string t = random_text(rng);
    const auto a = e1.encode(t);
    const auto b = e1.encode(t);
    CHECK(a.values == b.values);
    CHECK(norm(a) == doctest::Approx(1.0).epsilon(1e-6));
    mean_cos += cosine(a, e2.encode(t)) / 100.0;
  }
  CHECK(mean_cos < 0.99);
  CHECK(e1.dim() == kDefaultDim);
}

TEST_CASE("hashing encoder ignores trailing whitespace and case") {
  HashingEncoder e(3);
  CHECK(e.encode("Red lamp").values == e.encode("red lamp   \n").values);
  CHECK(norm(e.encode("")) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("overlapping texts are more similar") {
  HashingEncoder e(5);
  const auto a = e.encode("user bought red lamp blue desk green chair");
  const auto b = e.encode("user bought red lamp blue desk green sofa");
  const auto c = e.encode("moon rock fish bird door key");
  CHECK(cosine(a, b) > cosine(a, c));
}

TEST_CASE("cosine fixtures and symmetry") {
  const auto v = normalized(std::vector<double>{1.0, 2.0, -0.5});
  const auto w = normalized(std::vector<double>{-1.0, -2.0, 0.5});
  const auto o1 = normalized(std::vector<double>{1.0, 0.0, 0.0});
  const auto o2 = normalized(std::vector<double>{0.0, 1.0, 0.0});
  CHECK(cosine(v, v) == doctest::Approx(1.0));
  CHECK(cosine(o1, o2) == 0.0);
  CHECK(cosine(v, w) == doctest::Approx(-1.0));
  CHECK(cosine(v, o1) == cosine(o1, v));
  const auto scaled = normalized(std::vector<double>{10.0, 20.0, -5.0});
  CHECK(cosine(scaled, o1) == doctest::Approx(cosine(v, o1)).epsilon(1e-7));
  TextEmbedding zero{{0.0f, 0.0f, 0.0f}};
  CHECK_THROWS_AS(cosine(zero, v), NumericalError);
  CHECK_THROWS_AS(cosine(v, normalized(std::vector<double>{1.0, 0.0})), std::invalid_argument);
  CHECK_THROWS_AS(normalized(std::vector<double>{0.0, 0.0}), NumericalError);
}

TEST_CASE("embedding packs round-trip in binary and text layouts") {
  const auto dir = testing::temp_dir("packs");
  EmbeddingPack pack(3);
  pack.add("alpha", {0.25f, -1.5f, 3.0f});
  pack.add("key with spaces", {1.0f, 0.0f, -0.125f});
  write_pack(dir / "p.lcfe", pack);
  write_pack_text(dir / "p.txt", pack);
  for (const auto& p : {dir / "p.lcfe", dir / "p.txt"}) {
    const auto back = read_pack(p);
    REQUIRE(back.size() == 2);
    CHECK(back.dim() == 3);
    CHECK(back.key(1) == "key with spaces");
    CHECK(*back.find("alpha") == pack.row(0));
  }
}

TEST_CASE("table encoder normalizes and names unknown keys") {
  EmbeddingPack pack(2);
  pack.add("hello", {3.0f, 4.0f});
  TableEncoder enc(pack);
  const auto e = enc.encode("hello");
  CHECK(e.values[0] == doctest::Approx(0.6));
  try {
    enc.encode("missing text");
    FAIL("expected DataError");
  } catch (const DataError& err) {
    CHECK(std::string(err.what()).find("missing text") != std::string::npos);
  }
}

TEST_CASE("make_encoder") {
  auto h = make_encoder({{"kind", "hashing"}, {"seed", 3}, {"dim", 16}});
  CHECK(h->dim() == 16);
  CHECK_THROWS(make_encoder({{"kind", "nope"}}));
}
