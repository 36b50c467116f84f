#include <doctest.h>

#include "llmcf/checkpoint.hpp"
#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"
#include "support.hpp"

using namespace llmcf;

namespace {

void fill(ag::ParamSet& ps, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : ps) {
    for (ag::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = rng.normal();
  }
}

ag::ParamSet sample_params() {
  ag::ParamSet ps;
  ps.add("layer.w", 3, 4);
  ps.add("layer.b", 1, 4);
  ps.add("table", 5, 2);
  return ps;
}

}  // namespace

TEST_CASE("checkpoint bytes round-trip exactly") {
  auto ps = sample_params();
  fill(ps, 1);
  const nlohmann::json cfg = {{"answer", 42}, {"name", "x"}};
  const std::string bytes = ckpt::serialize(ps, cfg);
  CHECK(bytes.rfind(ckpt::kMagic, 0) == 0);
  const auto back = ckpt::deserialize(bytes);
  CHECK(back.config == cfg);
  REQUIRE(back.params.size() == ps.size());
  CHECK(back.params.at("layer.w").value == ps.at("layer.w").value);
  CHECK(ckpt::serialize(back.params, back.config) == bytes);
}

TEST_CASE("checkpoint files, hashes and load_into") {
  const auto dir = testing::temp_dir("ckpt");
  auto ps = sample_params();
  fill(ps, 2);
  ckpt::write(dir / "a.ckpt", ps, {});
  ckpt::write(dir / "b.ckpt", ps, {});
  CHECK(ckpt::hash_file(dir / "a.ckpt") == ckpt::hash_file(dir / "b.ckpt"));
  CHECK(ckpt::hash_file(dir / "a.ckpt").size() == 16);
  ps.at("table").value(0, 0) += 1e-12;
  ckpt::write(dir / "c.ckpt", ps, {});
  CHECK(ckpt::hash_file(dir / "a.ckpt") != ckpt::hash_file(dir / "c.ckpt"));

  auto target = sample_params();
  ckpt::load_into(ckpt::read(dir / "c.ckpt").params, target);
  CHECK(target.at("table").value == ps.at("table").value);

  ag::ParamSet wrong_shape;
  wrong_shape.add("layer.w", 4, 3);
  wrong_shape.add("layer.b", 1, 4);
  wrong_shape.add("table", 5, 2);
  CHECK_THROWS_AS(ckpt::load_into(ps, wrong_shape), DataError);
  ag::ParamSet wrong_name;
  wrong_name.add("layer.w", 3, 4);
  wrong_name.add("layer.bias", 1, 4);
  wrong_name.add("table", 5, 2);
  CHECK_THROWS_AS(ckpt::load_into(ps, wrong_name), DataError);
}

TEST_CASE("corrupt checkpoints are data errors") {
  auto ps = sample_params();
  const std::string bytes = ckpt::serialize(ps, {});
  CHECK_THROWS_AS(ckpt::deserialize("NOTACKPT" + bytes.substr(8)), DataError);
  CHECK_THROWS_AS(ckpt::deserialize(bytes.substr(0, bytes.size() - 8)), DataError);
  CHECK_THROWS_AS(ckpt::read(testing::temp_dir("ckpt_missing") / "none.ckpt"), DataError);
}
