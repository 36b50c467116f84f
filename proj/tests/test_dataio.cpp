#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "llmcf/dataio.hpp"
#include "llmcf/errors.hpp"
#include "support.hpp"

using namespace llmcf;
using namespace llmcf::data;

namespace {

std::filesystem::path write_file(const std::filesystem::path& dir, const std::string& name, const std::string& body) {
  const auto p = dir / name;
  std::ofstream(p) << body;
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Interaction> user_log(const std::string& user, int n, std::int64_t t0 = 1000) {
  std::vector<Interaction> log;
  for (int i = 0; i < n; ++i) {
    log.push_back(testing::interaction(user, user + "_item" + std::to_string(i), t0 + 10 * i,
                                       {{"title", "T" + std::to_string(i)}}));
  }
  return log;
}

}  // namespace

TEST_CASE("load_interactions: well-formed, malformed and filtered input") {
  const auto dir = testing::temp_dir("dataio_load");
  const std::string good =
      R"({"user_id":"u1","item_id":"a","timestamp":1546300800,"user_attrs":{},"item_attrs":{"title":"A"}})" "\n"
      R"({"user_id":"u1","item_id":"b","timestamp":1546300900,"user_attrs":{},"item_attrs":{"title":"B"}})" "\n"
      R"({"user_id":"u2","item_id":"a","timestamp":1546301000,"user_attrs":{},"item_attrs":{"title":"A"}})" "\n";
  auto r = load_interactions(write_file(dir, "good.jsonl", good));
  CHECK(r.interactions.size() == 3);
  CHECK(r.malformed == 0);
  CHECK(r.warnings.empty());

  auto bad = load_interactions(write_file(dir, "bad.jsonl", good + "{not json\n"));
  CHECK(bad.interactions.size() == 3);
  CHECK(bad.malformed == 1);
  CHECK(bad.warnings.size() == 1);

  const std::string with_2018 =
      good + R"({"user_id":"u3","item_id":"c","timestamp":1514764800,"user_attrs":{},"item_attrs":{}})" "\n";
  auto filtered = load_interactions(write_file(dir, "f.jsonl", with_2018), day_range("2019-01-01", "2019-12-31"));
  CHECK(filtered.interactions.size() == 3);
  CHECK(filtered.filtered_out == 1);
  for (const auto& it : filtered.interactions) CHECK(it.user_id != "u3");

  CHECK_THROWS_AS(load_interactions(dir / "missing.jsonl"), DataError);
  CHECK_THROWS_AS(load_interactions(write_file(dir, "empty.jsonl", "")), DataError);
}

TEST_CASE("load_interactions sorts by user then timestamp, stably") {
  const auto dir = testing::temp_dir("dataio_sort");
  const std::string body =
      R"({"user_id":"b","item_id":"x","timestamp":5})" "\n"
      R"({"user_id":"a","item_id":"y","timestamp":9})" "\n"
      R"({"user_id":"a","item_id":"z","timestamp":3})" "\n"
      R"({"user_id":"a","item_id":"w","timestamp":3})" "\n";
  auto r = load_interactions(write_file(dir, "s.jsonl", body));
  REQUIRE(r.interactions.size() == 4);
  CHECK(r.interactions[0].item_id == "z");
  CHECK(r.interactions[1].item_id == "w");
  CHECK(r.interactions[2].item_id == "y");
  CHECK(r.interactions[3].user_id == "b");
}

TEST_CASE("vocab maps unseen tokens to the OOV slot") {
  auto log = user_log("u", 3);
  const Vocab v = Vocab::build(log);
  CHECK(v.items.lookup("never") == kOov);
  CHECK(v.users.lookup("u") > 0);
  const auto back = Vocab::from_json(v.to_json());
  CHECK(back.to_json() == v.to_json());
}

TEST_CASE("build_splits: leave-one-out, threshold and history cap") {
  auto log = user_log("five", 5);
  auto two = user_log("two", 2);
  auto twelve = user_log("twelve", 12);
  log.insert(log.end(), two.begin(), two.end());
  log.insert(log.end(), twelve.begin(), twelve.end());
  const Vocab v = Vocab::build(log);
  const auto res = build_splits(log, v);
  CHECK(res.users_dropped == 1);
  CHECK(res.users_kept == 2);
  const int five = v.users.lookup("five");
  const int tw = v.users.lookup("twelve");
  auto count = [&](const std::vector<Example>& part, int user) {
    return std::count_if(part.begin(), part.end(), [&](const Example& e) { return e.user_index == user; });
  };
  CHECK(count(res.split.train, five) == 3);
  CHECK(count(res.split.valid, five) == 1);
  CHECK(count(res.split.test, five) == 1);
  for (const auto* part : {&res.split.train, &res.split.valid, &res.split.test}) {
    for (const auto& e : *part) {
      CHECK(e.history.size() <= static_cast<std::size_t>(kMaxHistory));
      if (e.user_index == tw) {
        const std::size_t pos = static_cast<std::size_t>(e.timestamp - 1000) / 10;
        CHECK(e.history.size() == std::min<std::size_t>(pos, kMaxHistory));
      }
    }
  }
  // The test example of "twelve" keeps the 10 most recent items, oldest first.
  for (const auto& e : res.split.test) {
    if (e.user_index != tw) continue;
    REQUIRE(e.history.size() == 10);
    CHECK(e.history.front() == v.items.lookup("twelve_item1"));
    CHECK(e.history.back() == v.items.lookup("twelve_item10"));
  }
  CHECK_THROWS_AS(build_splits(user_log("x", 2), Vocab::build(user_log("x", 2))), DataError);
}

TEST_CASE("split invariants on a random log") {
  const auto log = testing::random_log(5, 40, 30);
  const Vocab v = Vocab::build(log);
  auto split = build_splits(log, v).split;
  sample_negatives(split, v, 9);
  std::set<std::tuple<int, int, std::int64_t>> seen;
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    std::size_t pos = 0;
    std::size_t neg = 0;
    for (const auto& e : *part) {
      (e.label == 1 ? pos : neg)++;
      if (e.label == 1) CHECK(seen.insert({e.user_index, e.target_item_index, e.timestamp}).second);
    }
    CHECK(pos == neg);
  }
  // History items strictly precede the example: every history item is an earlier positive of the user.
  std::map<int, std::map<int, std::int64_t>> first_seen;
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (const auto& e : *part) {
      if (e.label == 1) first_seen[e.user_index][e.target_item_index] = e.timestamp;
    }
  }
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (const auto& e : *part) {
      for (int h : e.history) CHECK(first_seen[e.user_index].at(h) < e.timestamp);
    }
  }
}

TEST_CASE("sample_negatives: ratio, determinism and membership") {
  std::vector<Interaction> log;
  for (int u = 0; u < 20; ++u) {
    auto l = user_log("user" + std::to_string(u), 5, 1000 + u);
    log.insert(log.end(), l.begin(), l.end());
  }
  const Vocab v = Vocab::build(log);
  const auto base = build_splits(log, v).split;
  std::size_t positives = base.train.size() + base.valid.size() + base.test.size();
  CHECK(positives == 100);
  auto a = base;
  auto b = base;
  sample_negatives(a, v, 42);
  sample_negatives(b, v, 42);
  std::size_t total = 0;
  std::size_t zeros = 0;
  std::map<int, std::set<int>> pos_items;
  for (const auto* part : {&a.train, &a.valid, &a.test}) {
    for (const auto& e : *part) {
      ++total;
      zeros += e.label == 0;
      if (e.label == 1) pos_items[e.user_index].insert(e.target_item_index);
    }
  }
  CHECK(total == 200);
  CHECK(zeros == 100);
  for (const auto* part : {&a.train, &a.valid, &a.test}) {
    for (const auto& e : *part) {
      if (e.label == 0) CHECK(pos_items[e.user_index].count(e.target_item_index) == 0);
    }
  }
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].target_item_index == b.train[i].target_item_index);
}

TEST_CASE("sample_negatives fails when a user saw every item") {
  auto log = user_log("solo", 3);
  const Vocab v = Vocab::build(log);
  auto split = build_splits(log, v).split;
  CHECK_THROWS_AS(sample_negatives(split, v, 1), DataError);
}

TEST_CASE("render_text template") {
  std::vector<Interaction> log = {
      testing::interaction("u", "a", 1, {{"title", "Alpha"}}),
      testing::interaction("u", "b", 2, {{"title", "Bravo"}}),
      testing::interaction("u", "c", 3, {{"title", "Charlie"}}),
  };
  const Vocab v = Vocab::build(log);
  Example e;
  e.user_index = v.users.lookup("u");
  e.history = {v.items.lookup("a"), v.items.lookup("b")};
  e.target_item_index = v.items.lookup("c");
  e.target_attr_indices = v.item_attrs[static_cast<std::size_t>(e.target_item_index)];
  e.label = 1;
  const std::string s = render_text(e, v);
  const auto pa = s.find("Alpha");
  const auto pb = s.find("Bravo");
  const auto pc = s.find("Charlie");
  REQUIRE(pa != std::string::npos);
  CHECK(pa < pb);
  CHECK(pb < pc);

  Example neg = e;
  neg.label = 0;
  CHECK(render_text(neg, v) == s);

  Example empty = e;
  empty.history.clear();
  CHECK(render_text(empty, v).find("no prior interactions") != std::string::npos);

  const std::string masked = render_text(e, v, {.mask_target = true});
  CHECK(masked.find("Charlie") == std::string::npos);

  Example unknown = e;
  unknown.target_attr_indices = {kOov};
  CHECK(render_text(unknown, v).find("unknown") != std::string::npos);
}

TEST_CASE("serialized splits are byte-identical across runs and round-trip") {
  const auto log = testing::random_log(8, 25, 20);
  auto run = [&](const std::string& name) {
    const Vocab v = Vocab::build(log);
    auto split = build_splits(log, v).split;
    sample_negatives(split, v, 77);
    const auto dir = testing::temp_dir(name);
    write_split_dir(dir, split, v);
    return dir;
  };
  const auto d1 = run("split_a");
  const auto d2 = run("split_b");
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json"}) {
    CHECK(slurp(d1 / f) == slurp(d2 / f));
  }
  const auto loaded = read_split_dir(d1);
  const auto d3 = testing::temp_dir("split_c");
  write_split_dir(d3, loaded.split, loaded.vocab);
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json"}) {
    CHECK(slurp(d1 / f) == slurp(d3 / f));
  }
}

TEST_CASE("stats on a toy log") {
  std::vector<Interaction> log = {
      testing::interaction("u1", "a", 1), testing::interaction("u1", "b", 2), testing::interaction("u2", "a", 3),
      testing::interaction("u3", "c", 4), testing::interaction("u3", "a", 5),
  };
  const auto s = compute_stats(log);
  CHECK(s.users == 3);
  CHECK(s.items == 3);
  CHECK(s.reviews == 5);
  CHECK(s.sparsity_pct == doctest::Approx(100.0 * (1.0 - 5.0 / 9.0)));
}

TEST_CASE("parse_date and day_range") {
  CHECK(parse_date("2019-01-01") == 1546300800);
  const auto r = day_range("2019-01-01", "2019-12-31");
  CHECK(r.contains(1577836799));
  CHECK_FALSE(r.contains(1577836800));
  CHECK_THROWS_AS(parse_date("2019-13-01"), DataError);
}
