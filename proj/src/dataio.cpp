#include "llmcf/dataio.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::data {

using nlohmann::json;

std::int64_t parse_date(std::string_view ymd) {
  int y = 0;
  unsigned m = 0;
  unsigned d = 0;
  char dash1 = 0;
  char dash2 = 0;
  std::istringstream in{std::string(ymd)};
  if (!(in >> y >> dash1 >> m >> dash2 >> d) || dash1 != '-' || dash2 != '-') {
    throw DataError("bad date (want YYYY-MM-DD): " + std::string(ymd));
  }
  const std::chrono::year_month_day date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw DataError("invalid calendar date: " + std::string(ymd));
  return std::chrono::sys_days{date}.time_since_epoch().count() * 86400LL;
}

TimeRange day_range(std::optional<std::string> from, std::optional<std::string> to) {
  TimeRange r;
  if (from) r.begin = parse_date(*from);
  if (to) r.end = parse_date(*to) + 86400 - 1;
  return r;
}

namespace {

std::string scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number() || v.is_boolean()) return v.dump();
  throw DataError("attribute values must be scalars");
}

AttrMap parse_attrs(const json& j, const char* key) {
  AttrMap out;
  if (!j.contains(key) || j.at(key).is_null()) return out;
  const json& m = j.at(key);
  if (!m.is_object()) throw DataError(std::string(key) + " must be an object");
  for (const auto& [k, v] : m.items()) out[k] = scalar_to_string(v);
  return out;
}

json attrs_to_json(const AttrMap& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

}  // namespace

Interaction parse_interaction(const json& j) {
  if (!j.is_object()) throw DataError("record is not an object");
  Interaction it;
  if (!j.contains("user_id") || !j.contains("item_id") || !j.contains("timestamp")) {
    throw DataError("record lacks user_id, item_id or timestamp");
  }
  it.user_id = scalar_to_string(j.at("user_id"));
  it.item_id = scalar_to_string(j.at("item_id"));
  if (it.user_id.empty() || it.item_id.empty()) throw DataError("empty user_id or item_id");
  const json& ts = j.at("timestamp");
  if (!ts.is_number_integer()) throw DataError("timestamp must be an integer");
  it.timestamp = ts.get<std::int64_t>();
  if (it.timestamp < 0) throw DataError("negative timestamp");
  if (j.contains("label")) {
    const json& l = j.at("label");
    if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1)) throw DataError("label must be 0 or 1");
    it.label = l.get<int>();
  }
  it.user_attrs = parse_attrs(j, "user_attrs");
  it.item_attrs = parse_attrs(j, "item_attrs");
  return it;
}

LoadResult load_interactions(const std::filesystem::path& path, const TimeRange& filter) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction log: " + path.string());
  LoadResult res;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Interaction it = parse_interaction(json::parse(line));
      if (!filter.contains(it.timestamp)) {
        ++res.filtered_out;
        continue;
      }
      res.interactions.push_back(std::move(it));
    } catch (const std::exception& e) {
      ++res.malformed;
      if (res.warnings.size() < 10) {
        res.warnings.push_back(path.filename().string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  if (res.interactions.empty()) throw DataError("no usable interactions in " + path.string());
  std::stable_sort(res.interactions.begin(), res.interactions.end(), [](const Interaction& a, const Interaction& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.timestamp < b.timestamp;
  });
  return res;
}

TokenVocab::TokenVocab() : tokens_{"<oov>"} {}

int TokenVocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int idx = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, idx);
  return idx;
}

int TokenVocab::lookup(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kOov : it->second;
}

Vocab Vocab::build(const std::vector<Interaction>& interactions) {
  std::set<std::string> users;
  std::set<std::string> items;
  std::map<std::string, std::set<std::string>> uvals;
  std::map<std::string, std::set<std::string>> ivals;
  for (const auto& it : interactions) {
    users.insert(it.user_id);
    items.insert(it.item_id);
    for (const auto& [k, v] : it.user_attrs) uvals[k].insert(v);
    for (const auto& [k, v] : it.item_attrs) ivals[k].insert(v);
  }
  Vocab v;
  for (const auto& u : users) v.users.add(u);
  for (const auto& i : items) v.items.add(i);
  for (const auto& [k, vals] : uvals) {
    v.user_fields.push_back(k);
    TokenVocab tv;
    for (const auto& s : vals) tv.add(s);
    v.user_attr_vocab.push_back(std::move(tv));
  }
  for (const auto& [k, vals] : ivals) {
    v.item_fields.push_back(k);
    TokenVocab tv;
    for (const auto& s : vals) tv.add(s);
    v.item_attr_vocab.push_back(std::move(tv));
  }
  // First occurrence in log order defines an item's attributes.
  v.item_attrs.assign(static_cast<std::size_t>(v.items.size()), std::vector<int>(v.item_fields.size(), kOov));
  std::vector<bool> seen(static_cast<std::size_t>(v.items.size()), false);
  for (const auto& it : interactions) {
    const auto idx = static_cast<std::size_t>(v.items.lookup(it.item_id));
    if (seen[idx]) continue;
    seen[idx] = true;
    v.item_attrs[idx] = v.encode_item_attrs(it.item_attrs);
  }
  return v;
}

std::vector<int> Vocab::encode_user_attrs(const AttrMap& attrs) const {
  std::vector<int> out(user_fields.size(), kOov);
  for (std::size_t f = 0; f < user_fields.size(); ++f) {
    auto it = attrs.find(user_fields[f]);
    if (it != attrs.end()) out[f] = user_attr_vocab[f].lookup(it->second);
  }
  return out;
}

std::vector<int> Vocab::encode_item_attrs(const AttrMap& attrs) const {
  std::vector<int> out(item_fields.size(), kOov);
  for (std::size_t f = 0; f < item_fields.size(); ++f) {
    auto it = attrs.find(item_fields[f]);
    if (it != attrs.end()) out[f] = item_attr_vocab[f].lookup(it->second);
  }
  return out;
}

AttrMap Vocab::decode_user_attrs(const std::vector<int>& idx) const {
  AttrMap m;
  for (std::size_t f = 0; f < user_fields.size() && f < idx.size(); ++f) {
    if (idx[f] != kOov) m[user_fields[f]] = user_attr_vocab[f].token(idx[f]);
  }
  return m;
}

AttrMap Vocab::decode_item_attrs(const std::vector<int>& idx) const {
  AttrMap m;
  for (std::size_t f = 0; f < item_fields.size() && f < idx.size(); ++f) {
    if (idx[f] != kOov) m[item_fields[f]] = item_attr_vocab[f].token(idx[f]);
  }
  return m;
}

json Vocab::to_json() const {
  auto tail = [](const TokenVocab& tv) {
    return std::vector<std::string>(tv.tokens().begin() + 1, tv.tokens().end());
  };
  json j;
  j["version"] = 1;
  j["users"] = tail(users);
  j["items"] = tail(items);
  j["user_fields"] = user_fields;
  j["item_fields"] = item_fields;
  json ua = json::array();
  for (const auto& tv : user_attr_vocab) ua.push_back(tail(tv));
  json ia = json::array();
  for (const auto& tv : item_attr_vocab) ia.push_back(tail(tv));
  j["user_attr_values"] = ua;
  j["item_attr_values"] = ia;
  j["item_attrs"] = item_attrs;
  return j;
}

Vocab Vocab::from_json(const json& j) {
  try {
    Vocab v;
    for (const auto& s : j.at("users")) v.users.add(s.get<std::string>());
    for (const auto& s : j.at("items")) v.items.add(s.get<std::string>());
    v.user_fields = j.at("user_fields").get<std::vector<std::string>>();
    v.item_fields = j.at("item_fields").get<std::vector<std::string>>();
    for (const auto& vals : j.at("user_attr_values")) {
      TokenVocab tv;
      for (const auto& s : vals) tv.add(s.get<std::string>());
      v.user_attr_vocab.push_back(std::move(tv));
    }
    for (const auto& vals : j.at("item_attr_values")) {
      TokenVocab tv;
      for (const auto& s : vals) tv.add(s.get<std::string>());
      v.item_attr_vocab.push_back(std::move(tv));
    }
    v.item_attrs = j.at("item_attrs").get<std::vector<std::vector<int>>>();
    if (v.user_attr_vocab.size() != v.user_fields.size() || v.item_attr_vocab.size() != v.item_fields.size() ||
        static_cast<int>(v.item_attrs.size()) != v.items.size()) {
      throw DataError("vocab: inconsistent sizes");
    }
    return v;
  } catch (const json::exception& e) {
    throw DataError(std::string("vocab: ") + e.what());
  }
}

SplitResult build_splits(const std::vector<Interaction>& interactions, const Vocab& vocab) {
  // Group by user, preserving the (stable) per-user time order.
  std::map<std::string, std::vector<const Interaction*>> by_user;
  for (const auto& it : interactions) {
    if (it.label == 1) by_user[it.user_id].push_back(&it);
  }
  SplitResult res;
  for (auto& [user, events] : by_user) {
    std::stable_sort(events.begin(), events.end(),
                     [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    if (static_cast<int>(events.size()) < kMinPositives) {
      ++res.users_dropped;
      continue;
    }
    ++res.users_kept;
    const std::size_t n = events.size();
    for (std::size_t j = 0; j < n; ++j) {
      const Interaction& ev = *events[j];
      Example e;
      e.user_index = vocab.users.lookup(ev.user_id);
      e.user_attr_indices = vocab.encode_user_attrs(ev.user_attrs);
      e.target_item_index = vocab.items.lookup(ev.item_id);
      e.target_attr_indices = vocab.encode_item_attrs(ev.item_attrs);
      e.timestamp = ev.timestamp;
      e.label = 1;
      for (std::size_t h = 0; h < j; ++h) {
        if (events[h]->timestamp < ev.timestamp) e.history.push_back(vocab.items.lookup(events[h]->item_id));
      }
      if (e.history.size() > static_cast<std::size_t>(kMaxHistory)) {
        e.history.erase(e.history.begin(), e.history.end() - kMaxHistory);
      }
      e.text = render_text(e, vocab);
      if (j + 1 == n) {
        res.split.test.push_back(std::move(e));
      } else if (j + 2 == n) {
        res.split.valid.push_back(std::move(e));
      } else {
        res.split.train.push_back(std::move(e));
      }
    }
  }
  if (res.split.train.empty()) throw DataError("empty train split after leave-one-out partitioning");
  canonicalize(res.split);
  return res;
}

void canonicalize(DatasetSplit& split) {
  auto order = [](const Example& a, const Example& b) {
    if (a.user_index != b.user_index) return a.user_index < b.user_index;
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    if (a.label != b.label) return a.label > b.label;
    return a.target_item_index < b.target_item_index;
  };
  std::int64_t next = 0;
  for (auto* part : {&split.train, &split.valid, &split.test}) {
    std::stable_sort(part->begin(), part->end(), order);
    for (auto& e : *part) e.id = next++;
  }
}

void sample_negatives(DatasetSplit& split, const Vocab& vocab, std::uint64_t seed) {
  std::unordered_map<int, std::unordered_set<int>> positives;
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (const auto& e : *part) {
      if (e.label == 1) positives[e.user_index].insert(e.target_item_index);
    }
  }
  const int n_items = vocab.num_items() - 1;  // indices 1..n_items
  if (n_items <= 0) throw DataError("empty item vocabulary");
  Rng rng(seed);
  for (auto* part : {&split.train, &split.valid, &split.test}) {
    std::vector<Example> negs;
    negs.reserve(part->size());
    for (const auto& e : *part) {
      if (e.label != 1) continue;
      const auto& seen = positives[e.user_index];
      if (static_cast<int>(seen.size()) >= n_items) {
        throw DataError("user " + vocab.users.token(e.user_index) + " interacted with every item; cannot sample a negative");
      }
      int item = 0;
      do {
        item = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_items)));
      } while (seen.count(item) != 0);
      Example neg = e;
      neg.target_item_index = item;
      neg.target_attr_indices = vocab.item_attrs[static_cast<std::size_t>(item)];
      neg.label = 0;
      neg.text = render_text(neg, vocab);
      negs.push_back(std::move(neg));
    }
    part->insert(part->end(), std::make_move_iterator(negs.begin()), std::make_move_iterator(negs.end()));
  }
  canonicalize(split);
}

namespace {

std::string item_display(int item, const std::vector<int>& attrs, const Vocab& vocab) {
  std::string name;
  std::string details;
  for (std::size_t f = 0; f < vocab.item_fields.size(); ++f) {
    const int a = f < attrs.size() ? attrs[f] : kOov;
    const std::string value = a == kOov ? "unknown" : vocab.item_attr_vocab[f].token(a);
    if (vocab.item_fields[f] == "title") {
      name = value;
      continue;
    }
    if (!details.empty()) details += "; ";
    details += vocab.item_fields[f] + ": " + value;
  }
  if (name.empty()) name = item == kOov ? "unknown" : vocab.items.token(item);
  return details.empty() ? name : name + " (" + details + ")";
}

}  // namespace

std::string render_text(const Example& example, const Vocab& vocab, const RenderOptions& opts) {
  std::string s =
      "Given the user's profile and interaction history, predict whether the user is likely to be "
      "interested in the target item. Answer Yes or No.";
  if (!vocab.user_fields.empty()) {
    s += " User profile:";
    for (std::size_t f = 0; f < vocab.user_fields.size(); ++f) {
      const int a = f < example.user_attr_indices.size() ? example.user_attr_indices[f] : kOov;
      s += " " + vocab.user_fields[f] + ": " + (a == kOov ? "unknown" : vocab.user_attr_vocab[f].token(a)) + ";";
    }
  }
  if (example.history.empty()) {
    s += " The user has no prior interactions.";
  } else {
    s += " The user interacted with the following items, oldest first:";
    for (std::size_t h = 0; h < example.history.size(); ++h) {
      const int item = example.history[h];
      const auto& attrs = vocab.item_attrs.at(static_cast<std::size_t>(item));
      s += " " + std::to_string(h + 1) + ". " + item_display(item, attrs, vocab) + ";";
    }
  }
  if (opts.mask_target) {
    s += " Target item: withheld.";
  } else {
    s += " Target item: " + item_display(example.target_item_index, example.target_attr_indices, vocab) + ".";
  }
  return s;
}

DatasetStats compute_stats(const std::vector<Interaction>& interactions) {
  std::unordered_set<std::string> users;
  std::unordered_set<std::string> items;
  DatasetStats s;
  for (const auto& it : interactions) {
    if (it.label != 1) continue;
    users.insert(it.user_id);
    items.insert(it.item_id);
    ++s.reviews;
  }
  s.users = users.size();
  s.items = items.size();
  if (s.users > 0 && s.items > 0) {
    s.sparsity_pct = 100.0 * (1.0 - static_cast<double>(s.reviews) / (static_cast<double>(s.users) * static_cast<double>(s.items)));
  }
  return s;
}

DatasetStats compute_stats(const DatasetSplit& split) {
  std::unordered_set<int> users;
  std::unordered_set<int> items;
  DatasetStats s;
  for (const auto* part : {&split.train, &split.valid, &split.test}) {
    for (const auto& e : *part) {
      if (e.label != 1) continue;
      users.insert(e.user_index);
      items.insert(e.target_item_index);
      ++s.reviews;
    }
  }
  s.users = users.size();
  s.items = items.size();
  if (s.users > 0 && s.items > 0) {
    s.sparsity_pct = 100.0 * (1.0 - static_cast<double>(s.reviews) / (static_cast<double>(s.users) * static_cast<double>(s.items)));
  }
  return s;
}

json stats_to_json(const DatasetStats& s) {
  return json{{"users", s.users}, {"items", s.items}, {"reviews", s.reviews}, {"sparsity_pct", s.sparsity_pct}};
}

json example_to_json(const Example& e, const Vocab& vocab) {
  json hist = json::array();
  for (int h : e.history) hist.push_back(vocab.items.token(h));
  return json{{"id", e.id},
              {"user_id", vocab.users.token(e.user_index)},
              {"item_id", vocab.items.token(e.target_item_index)},
              {"timestamp", e.timestamp},
              {"label", e.label},
              {"user_attrs", attrs_to_json(vocab.decode_user_attrs(e.user_attr_indices))},
              {"item_attrs", attrs_to_json(vocab.decode_item_attrs(e.target_attr_indices))},
              {"history", hist}};
}

Example example_from_json(const json& j, const Vocab& vocab) {
  Interaction it = parse_interaction(j);
  Example e;
  e.id = j.at("id").get<std::int64_t>();
  e.user_index = vocab.users.lookup(it.user_id);
  e.user_attr_indices = vocab.encode_user_attrs(it.user_attrs);
  e.target_item_index = vocab.items.lookup(it.item_id);
  e.target_attr_indices = vocab.encode_item_attrs(it.item_attrs);
  e.timestamp = it.timestamp;
  e.label = it.label;
  for (const auto& h : j.at("history")) e.history.push_back(vocab.items.lookup(h.get<std::string>()));
  if (e.history.size() > static_cast<std::size_t>(kMaxHistory)) throw DataError("history longer than the cap");
  e.text = render_text(e, vocab);
  return e;
}

void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : examples) out << example_to_json(e, vocab).dump() << '\n';
}

std::vector<Example> read_examples(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(json::parse(line), vocab));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_split_dir(const std::filesystem::path& dir, const DatasetSplit& split, const Vocab& vocab) {
  std::filesystem::create_directories(dir);
  write_examples(dir / "train.jsonl", split.train, vocab);
  write_examples(dir / "valid.jsonl", split.valid, vocab);
  write_examples(dir / "test.jsonl", split.test, vocab);
  std::ofstream out(dir / "vocab.json", std::ios::binary);
  out << vocab.to_json().dump() << '\n';
}

LoadedSplit read_split_dir(const std::filesystem::path& dir) {
  std::ifstream in(dir / "vocab.json");
  if (!in) throw DataError("missing vocab.json in " + dir.string());
  LoadedSplit ls;
  try {
    ls.vocab = Vocab::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw DataError(std::string("vocab.json: ") + e.what());
  }
  ls.split.train = read_examples(dir / "train.jsonl", ls.vocab);
  ls.split.valid = read_examples(dir / "valid.jsonl", ls.vocab);
  ls.split.test = read_examples(dir / "test.jsonl", ls.vocab);
  if (ls.split.train.empty()) throw DataError("empty train split in " + dir.string());
  return ls;
}

}  // namespace llmcf::data
