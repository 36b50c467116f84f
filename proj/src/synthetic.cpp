#include "llmcf/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::synth {

namespace {

constexpr std::array<const char*, 16> kTopicWords = {
    "serum",  "lipstick", "shampoo", "sunscreen", "perfume", "polish", "moisturizer", "mascara",
    "cleanser", "toner",  "conditioner", "blush", "eyeliner", "scrub", "lotion",      "mask"};
constexpr std::array<const char*, 12> kAdjectives = {"gentle", "classic", "daily",  "luxe",  "pure",  "bright",
                                                     "velvet", "fresh",   "silk",   "bold",  "clear", "soft"};
constexpr std::array<const char*, 4> kAges = {"18-24", "25-34", "35-44", "45+"};
constexpr std::array<const char*, 5> kRegions = {"north", "south", "east", "west", "central"};
constexpr int kBrands = 30;
constexpr std::int64_t kStart = 1546300800;  // 2019-01-01T00:00:00Z
constexpr std::int64_t kDay = 86400;

}  // namespace

nlohmann::json SyntheticConfig::to_json() const {
  return {{"users", users},
          {"items", items},
          {"topics", topics},
          {"min_interactions", min_interactions},
          {"max_interactions", max_interactions},
          {"preference", preference},
          {"zipf", zipf},
          {"seed", seed}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  c.users = j.value("users", c.users);
  c.items = j.value("items", c.items);
  c.topics = j.value("topics", c.topics);
  c.min_interactions = j.value("min_interactions", c.min_interactions);
  c.max_interactions = j.value("max_interactions", c.max_interactions);
  c.preference = j.value("preference", c.preference);
  c.zipf = j.value("zipf", c.zipf);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<data::Interaction> generate(const SyntheticConfig& cfg) {
  if (cfg.topics < 2 || cfg.topics > static_cast<int>(kTopicWords.size())) {
    throw UsageError("topics must lie in [2, " + std::to_string(kTopicWords.size()) + "]");
  }
  if (cfg.users < 1 || cfg.items < cfg.topics || cfg.min_interactions < 1 || cfg.max_interactions < cfg.min_interactions) {
    throw UsageError("invalid synthetic generator configuration");
  }
  Rng rng(derive_seed(cfg.seed, "synthetic"));

  struct Item {
    std::string id;
    int topic;
    data::AttrMap attrs;
  };
  std::vector<Item> items;
  std::vector<std::vector<int>> by_topic(static_cast<std::size_t>(cfg.topics));
  for (int i = 0; i < cfg.items; ++i) {
    Item it;
    it.id = "i" + std::to_string(i);
    it.topic = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topics)));
    const char* adj = kAdjectives[rng.below(kAdjectives.size())];
    it.attrs["title"] = std::string(adj) + " " + kTopicWords[static_cast<std::size_t>(it.topic)];
    it.attrs["category"] = "group" + std::to_string(it.topic / 3);
    it.attrs["brand"] = "brand" + std::to_string(rng.below(kBrands));
    by_topic[static_cast<std::size_t>(it.topic)].push_back(i);
    items.push_back(std::move(it));
  }
  for (auto& members : by_topic) {
    if (members.empty()) members.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.items))));
  }

  std::vector<data::Interaction> log;
  for (int u = 0; u < cfg.users; ++u) {
    data::AttrMap uattrs{{"age", kAges[rng.below(kAges.size())]}, {"region", kRegions[rng.below(kRegions.size())]}};
    const int t1 = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topics)));
    int t2 = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topics - 1)));
    if (t2 >= t1) ++t2;
    const int n = cfg.min_interactions +
                  static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_interactions - cfg.min_interactions + 1)));
    std::int64_t ts = kStart + static_cast<std::int64_t>(rng.below(180)) * kDay;
    std::vector<int> seen;
    for (int k = 0; k < n; ++k) {
      int item = -1;
      for (int attempt = 0; attempt < 50 && item < 0; ++attempt) {
        int topic;
        if (rng.uniform() < cfg.preference) {
          topic = rng.uniform() < 0.5 ? t1 : t2;
        } else {
          topic = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topics)));
        }
        const auto& members = by_topic[static_cast<std::size_t>(topic)];
        // Zipf over the topic's members in id order.
        double z = 0.0;
        for (std::size_t r = 0; r < members.size(); ++r) z += std::pow(static_cast<double>(r + 1), -cfg.zipf);
        double u01 = rng.uniform() * z;
        std::size_t pick = members.size() - 1;
        for (std::size_t r = 0; r < members.size(); ++r) {
          u01 -= std::pow(static_cast<double>(r + 1), -cfg.zipf);
          if (u01 < 0.0) {
            pick = r;
            break;
          }
        }
        const int cand = members[pick];
        if (std::find(seen.begin(), seen.end(), cand) == seen.end()) item = cand;
      }
      if (item < 0) continue;
      seen.push_back(item);
      ts += kDay + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(10 * kDay)));
      data::Interaction it;
      it.user_id = "u" + std::to_string(u);
      it.item_id = items[static_cast<std::size_t>(item)].id;
      it.timestamp = ts;
      it.user_attrs = uattrs;
      it.item_attrs = items[static_cast<std::size_t>(item)].attrs;
      log.push_back(std::move(it));
    }
  }
  return log;
}

void write_log(const std::filesystem::path& path, const std::vector<data::Interaction>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& it : log) {
    nlohmann::json j = {{"user_id", it.user_id},
                        {"item_id", it.item_id},
                        {"timestamp", it.timestamp},
                        {"user_attrs", it.user_attrs},
                        {"item_attrs", it.item_attrs}};
    out << j.dump() << '\n';
  }
}

}  // namespace llmcf::synth
