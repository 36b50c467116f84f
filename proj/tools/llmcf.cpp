// llmcf: data preparation, CoT store construction, training, evaluation and
// ablation sweeps from the command line.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical abort.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "llmcf/checkpoint.hpp"
#include "llmcf/cotstore.hpp"
#include "llmcf/dataio.hpp"
#include "llmcf/errors.hpp"
#include "llmcf/metrics.hpp"
#include "llmcf/pipeline.hpp"
#include "llmcf/rng.hpp"
#include "llmcf/synthetic.hpp"
#include "llmcf/textenc.hpp"
#include "llmcf/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace llmcf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

constexpr const char* kSnapshotFile = "config.json";
constexpr const char* kMetricsFile = "metrics.jsonl";
constexpr const char* kCheckpointFile = "best.ckpt";
constexpr const char* kReportFile = "report.json";

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw UsageError("unknown config key: " + (where.empty() ? key : where + "." + key));
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void require_exists(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " path is not set");
  if (!fs::exists(path)) throw DataError(what + " not found: " + path);
}

// Everything a command needs, assembled from defaults, the --config document
// and per-command flags, in that order of precedence.
struct RunConfig {
  std::uint64_t seed = 0;
  struct Paths {
    std::string data;            // raw interaction log
    std::string splits;          // prepared split directory
    std::string store;           // CoT store directory
    std::string embeddings;      // text embedding pack for the table encoder
    std::string cot_embeddings;  // CoT embedding pack for the file provider
    std::string cot_texts;       // optional CoT texts for the file provider
    std::string output;
  } paths;
  std::optional<std::string> date_from;
  std::optional<std::string> date_to;
  std::string encoder = "hashing";  // hashing | table
  int d_text = text::kDefaultDim;
  std::string provider = "synthetic";  // synthetic | file
  double lambda = 0.7;
  double noise = 0.1;
  double ratio = 0.1;
  bool ivf = false;
  int nlist = 0;
  int nprobe = 0;
  synth::SyntheticConfig synthetic;
  train::TrainConfig train;

  json to_json() const {
    json p{{"data", paths.data},
           {"splits", paths.splits},
           {"store", paths.store},
           {"embeddings", paths.embeddings},
           {"cot_embeddings", paths.cot_embeddings},
           {"cot_texts", paths.cot_texts},
           {"output", paths.output}};
    json j{{"seed", seed},
           {"paths", p},
           {"encoder", {{"kind", encoder}, {"dim", d_text}}},
           {"provider", {{"kind", provider}, {"lambda", lambda}, {"noise", noise}}},
           {"store", {{"ratio", ratio}, {"ivf", ivf}, {"nlist", nlist}, {"nprobe", nprobe}}},
           {"synthetic", synthetic.to_json()},
           {"train", train.to_json()}};
    json range = json::object();
    if (date_from) range["from"] = *date_from;
    if (date_to) range["to"] = *date_to;
    j["date_range"] = range;
    return j;
  }

  // Overlays a config document; unknown keys at any level are rejected.
  void merge(const json& j) {
    check_keys(j, {"seed", "paths", "encoder", "provider", "store", "synthetic", "train", "date_range"}, "");
    try {
      seed = j.value("seed", seed);
      if (j.contains("paths")) {
        const json& p = j["paths"];
        check_keys(p, {"data", "splits", "store", "embeddings", "cot_embeddings", "cot_texts", "output"}, "paths");
        paths.data = p.value("data", paths.data);
        paths.splits = p.value("splits", paths.splits);
        paths.store = p.value("store", paths.store);
        paths.embeddings = p.value("embeddings", paths.embeddings);
        paths.cot_embeddings = p.value("cot_embeddings", paths.cot_embeddings);
        paths.cot_texts = p.value("cot_texts", paths.cot_texts);
        paths.output = p.value("output", paths.output);
      }
      if (j.contains("date_range")) {
        const json& r = j["date_range"];
        check_keys(r, {"from", "to"}, "date_range");
        if (r.contains("from")) date_from = r["from"].get<std::string>();
        if (r.contains("to")) date_to = r["to"].get<std::string>();
      }
      if (j.contains("encoder")) {
        const json& e = j["encoder"];
        check_keys(e, {"kind", "dim"}, "encoder");
        encoder = e.value("kind", encoder);
        d_text = e.value("dim", d_text);
      }
      if (j.contains("provider")) {
        const json& p = j["provider"];
        check_keys(p, {"kind", "lambda", "noise"}, "provider");
        provider = p.value("kind", provider);
        lambda = p.value("lambda", lambda);
        noise = p.value("noise", noise);
      }
      if (j.contains("store")) {
        const json& s = j["store"];
        check_keys(s, {"ratio", "ivf", "nlist", "nprobe"}, "store");
        ratio = s.value("ratio", ratio);
        ivf = s.value("ivf", ivf);
        nlist = s.value("nlist", nlist);
        nprobe = s.value("nprobe", nprobe);
      }
      if (j.contains("synthetic")) {
        check_keys(j["synthetic"],
                   {"users", "items", "topics", "min_interactions", "max_interactions", "preference", "zipf", "seed"},
                   "synthetic");
        synthetic = synth::SyntheticConfig::from_json(j["synthetic"]);
      }
      if (j.contains("train")) train = train::TrainConfig::from_json(j["train"]);
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad config value: ") + e.what());
    }
  }

  void validate() const {
    if (encoder != "hashing" && encoder != "table") throw UsageError("encoder.kind must be hashing or table");
    if (provider != "synthetic" && provider != "file") throw UsageError("provider.kind must be synthetic or file");
    if (d_text <= 0) throw UsageError("encoder.dim must be positive");
    if (lambda < 0.0 || lambda > 1.0) throw UsageError("provider.lambda must be in [0, 1]");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw UsageError("store.ratio must be in (0, 1]");
    train.validate();
  }
};

// Flags shared by every subcommand.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON config document");
  app->add_option("--seed", f.seed, "Master seed; sub-seeds are derived by name");
  app->add_option("--output", f.output, "Output path");
}

RunConfig base_config(const CommonFlags& f) {
  RunConfig rc;
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw DataError("config not found: " + f.config);
    rc.merge(read_json(f.config));
  }
  if (f.seed) rc.seed = *f.seed;
  if (!f.output.empty()) rc.paths.output = f.output;
  return rc;
}

// The run seed governs every stochastic step.
void finalize(RunConfig& rc) {
  rc.train.seed = rc.seed;
  rc.synthetic.seed = rc.seed;
  rc.validate();
}

void snapshot(const RunConfig& rc, const fs::path& dir) { write_json(dir / kSnapshotFile, rc.to_json()); }

std::unique_ptr<text::TextEncoder> make_encoder(const RunConfig& rc) {
  if (rc.encoder == "table") {
    require_exists(rc.paths.embeddings, "text embedding pack");
    return text::make_encoder({{"kind", "table"}, {"path", rc.paths.embeddings}});
  }
  return text::make_encoder({{"kind", "hashing"}, {"seed", rc.seed}, {"dim", rc.d_text}});
}

// Splits, store and the encoder the store was built with.
struct Loaded {
  data::LoadedSplit splits;
  std::unique_ptr<text::TextEncoder> encoder;
  std::optional<cot::CoTStore> store;
  json store_meta;

  train::TrainData view() const {
    return {&splits.split, &splits.vocab, store ? &*store : nullptr, encoder.get()};
  }
};

Loaded load_inputs(const RunConfig& rc, bool need_store) {
  Loaded l;
  require_exists(rc.paths.splits, "split directory");
  l.splits = data::read_split_dir(rc.paths.splits);
  const bool have_store = !rc.paths.store.empty() && fs::exists(rc.paths.store);
  if (need_store) require_exists(rc.paths.store, "CoT store");
  if (have_store) {
    auto loaded = cot::read_store_dir(rc.paths.store, l.splits.split.train, l.splits.vocab);
    l.store_meta = loaded.meta;
    cot::StoreOptions opts;
    opts.build_ivf = rc.train.approximate || rc.ivf;
    opts.nlist = rc.nlist;
    opts.nprobe = rc.nprobe;
    opts.seed = derive_seed(rc.seed, "ivf");
    l.store = cot::CoTStore::build(std::move(loaded.records), opts);
    if (!l.store_meta.contains("encoder")) throw DataError("store meta.json has no encoder description");
    l.encoder = text::make_encoder(l.store_meta["encoder"]);
  } else {
    l.encoder = make_encoder(rc);
  }
  return l;
}

bool needs_store(const train::TrainConfig& c) { return c.uses_ict() && c.k > 0; }

// The ICT text width follows the encoder the queries go through.
void match_text_width(train::TrainConfig& c, const text::TextEncoder& enc) { c.ict.d_text = enc.dim(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string summarize(const metrics::MetricsReport& r) {
  std::ostringstream os;
  os << r.task << "/" << r.split;
  if (r.auc) os << " auc=" << fmt(*r.auc);
  if (r.logloss) os << " logloss=" << fmt(*r.logloss);
  if (r.relaimpr_pct) os << " relaimpr=" << fmt(*r.relaimpr_pct, 3) << "%";
  for (const auto& [k, v] : r.hit) os << " hit@" << k << "=" << fmt(v);
  for (const auto& [k, v] : r.ndcg) os << " ndcg@" << k << "=" << fmt(v);
  return os.str();
}

// Test metric used to rank ablation cells.
double primary_metric(const metrics::MetricsReport& r) {
  if (r.auc) return *r.auc;
  if (auto it = r.ndcg.find(10); it != r.ndcg.end()) return it->second;
  return 0.0;
}

// ---------------------------------------------------------------- commands

int cmd_generate_data(RunConfig rc) {
  finalize(rc);
  if (rc.paths.output.empty()) throw UsageError("--output is required");
  const auto log = synth::generate(rc.synthetic);
  if (fs::path(rc.paths.output).has_parent_path()) fs::create_directories(fs::path(rc.paths.output).parent_path());
  synth::write_log(rc.paths.output, log);
  std::cout << "wrote " << log.size() << " interactions to " << rc.paths.output << "\n";
  return kExitOk;
}

int cmd_prepare_data(RunConfig rc) {
  finalize(rc);
  if (rc.paths.output.empty()) throw UsageError("--output is required");
  require_exists(rc.paths.data, "interaction log");
  const fs::path out = rc.paths.output;
  fs::create_directories(out);
  snapshot(rc, out);

  const auto loaded = data::load_interactions(rc.paths.data, data::day_range(rc.date_from, rc.date_to));
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  if (loaded.interactions.empty()) throw DataError("no usable interactions in " + rc.paths.data);
  const auto prepared = pipeline::prepare_data(loaded.interactions, rc.seed);
  data::write_split_dir(out, prepared.split, prepared.vocab);

  const auto raw = data::compute_stats(loaded.interactions);
  json stats{{"raw", data::stats_to_json(raw)},
             {"kept", data::stats_to_json(prepared.stats)},
             {"malformed_lines", loaded.malformed},
             {"filtered_out", loaded.filtered_out},
             {"users_dropped", prepared.users_dropped},
             {"examples",
              {{"train", prepared.split.train.size()},
               {"valid", prepared.split.valid.size()},
               {"test", prepared.split.test.size()}}}};
  write_json(out / "stats.json", stats);
  std::cout << "users=" << raw.users << " items=" << raw.items << " reviews=" << raw.reviews
            << " sparsity=" << fmt(raw.sparsity_pct, 4) << "%"
            << " kept_users=" << prepared.stats.users << " dropped_users=" << prepared.users_dropped
            << " malformed=" << loaded.malformed << " train=" << prepared.split.train.size()
            << " valid=" << prepared.split.valid.size() << " test=" << prepared.split.test.size() << "\n";
  return kExitOk;
}

int cmd_build_cot_store(RunConfig rc, const std::string& prompt_out) {
  finalize(rc);
  if (rc.paths.output.empty()) throw UsageError("--output is required");
  require_exists(rc.paths.splits, "split directory");
  if (rc.provider == "file") require_exists(rc.paths.cot_embeddings, "CoT embedding pack");
  const fs::path out = rc.paths.output;
  fs::create_directories(out);
  snapshot(rc, out);

  const auto splits = data::read_split_dir(rc.paths.splits);
  const auto encoder = make_encoder(rc);

  if (!prompt_out.empty()) {
    // Rendered prompts for the sampled examples, for offline CoT generation.
    const std::string asset = fs::path(LLMCF_ASSET_DIR) / "cot_prompt_v1.txt";
    std::ifstream in(asset, std::ios::binary);
    if (!in) throw DataError("cannot read prompt asset " + asset);
    const std::string tmpl((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream os;
    for (const auto& e : cot::sample_subset(splits.split.train, rc.ratio, derive_seed(rc.seed, "store"))) {
      os << json{{"id", e.id}, {"label", e.label}, {"prompt", cot::render_cot_prompt(tmpl, e.text, e.label)}}.dump()
         << "\n";
    }
    write_text(prompt_out, os.str());
  }

  std::unique_ptr<cot::CotProvider> provider;
  if (rc.provider == "file") {
    std::unordered_map<std::string, std::string> texts;
    if (!rc.paths.cot_texts.empty()) {
      require_exists(rc.paths.cot_texts, "CoT text file");
      texts = cot::read_cot_texts(rc.paths.cot_texts);
    }
    provider = std::make_unique<cot::FileCotProvider>(text::read_pack(rc.paths.cot_embeddings), std::move(texts),
                                                      rc.paths.cot_embeddings);
  } else {
    provider = std::make_unique<cot::SyntheticCotProvider>(derive_seed(rc.seed, "provider"), rc.lambda,
                                                           encoder->dim(), rc.noise);
  }

  auto built = pipeline::build_records(splits.split.train, rc.ratio, rc.seed, *encoder, *provider);
  const std::size_t m = built.records.size();
  json meta{{"encoder", encoder->describe()},
            {"provider", provider->describe()},
            {"ratio", rc.ratio},
            {"seed", rc.seed},
            {"train_examples", splits.split.train.size()},
            {"records", m},
            {"positives", built.positives},
            {"negatives", built.negatives}};
  cot::write_store_dir(out, built.records, splits.vocab, meta);

  // Share of validation queries whose top-K had to borrow from the other class.
  const auto store = cot::CoTStore::build(std::move(built.records));
  cot::RetrievalConfig retrieval = rc.train.retrieval();
  retrieval.approximate = false;
  std::size_t short_queries = 0;
  if (retrieval.k > 0) {
    for (const auto& e : splits.split.valid) {
      if (store.retrieve(encoder->encode(e.text), e.timestamp, retrieval, e.id).imbalanced) ++short_queries;
    }
  }
  const double pos_frac = m ? static_cast<double>(built.positives) / static_cast<double>(m) : 0.0;
  const double short_frac =
      splits.split.valid.empty() ? 0.0 : static_cast<double>(short_queries) / splits.split.valid.size();
  std::cout << "M=" << m << " N=" << splits.split.train.size() << " positives=" << built.positives
            << " negatives=" << built.negatives << " positive_fraction=" << fmt(pos_frac, 3)
            << " class_imbalance=" << fmt(m ? std::fabs(2.0 * pos_frac - 1.0) : 0.0, 3)
            << " short_contexts@k" << retrieval.k << "=" << fmt(short_frac, 3) << "\n";
  return kExitOk;
}

struct TrainedRun {
  metrics::MetricsReport report;
  train::TrainResult result;
  std::string checkpoint_hash;
};

// Trains one configuration into `dir`: metrics log, best checkpoint, test report.
TrainedRun train_into(const train::TrainConfig& cfg, const Loaded& in, const fs::path& dir) {
  fs::create_directories(dir);
  train::Model model(cfg, FeatureSpace::from_vocab(in.splits.vocab));
  model.init();
  std::ofstream log(dir / kMetricsFile, std::ios::binary);
  if (!log) throw DataError("cannot write " + (dir / kMetricsFile).string());
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochRecord& r) {
    log << r.to_json().dump() << "\n";
    log.flush();
  };
  TrainedRun run;
  run.result = train::train(cfg, in.view(), model, hooks);
  const std::string bytes = ckpt::serialize(model.params(), model.describe());
  write_text(dir / kCheckpointFile, bytes);
  run.checkpoint_hash = ckpt::hash_bytes(bytes);
  const auto test = train::prepare(cfg, in.view(), in.splits.split.test);
  run.report = train::evaluate(model, test, "test");
  run.report.extra["variant"] = train::to_string(cfg.variant);
  run.report.extra["best_epoch"] = run.result.best_epoch;
  run.report.extra["best_valid"] = run.result.best_metric;
  run.report.extra["monitored"] = run.result.monitored;
  run.report.extra["epochs"] = run.result.history.size();
  run.report.extra["checkpoint_fnv1a64"] = run.checkpoint_hash;
  write_json(dir / kReportFile, run.report.to_json());
  return run;
}

int cmd_train(RunConfig rc) {
  finalize(rc);
  if (rc.paths.output.empty()) throw UsageError("--output is required");
  require_exists(rc.paths.splits, "split directory");
  if (needs_store(rc.train)) require_exists(rc.paths.store, "CoT store");
  const fs::path out = rc.paths.output;
  fs::create_directories(out);
  snapshot(rc, out);

  const Loaded in = load_inputs(rc, needs_store(rc.train));
  train::TrainConfig cfg = rc.train;
  match_text_width(cfg, *in.encoder);
  const TrainedRun run = train_into(cfg, in, out);
  std::cout << "variant=" << train::to_string(cfg.variant) << " best_epoch=" << run.result.best_epoch << " "
            << run.result.monitored << "=" << fmt(run.result.best_metric) << " " << summarize(run.report)
            << " checkpoint=" << run.checkpoint_hash << "\n";
  return kExitOk;
}

int cmd_evaluate(RunConfig rc, const std::string& run_dir, std::string checkpoint, const std::string& split,
                 std::optional<double> base_auc) {
  if (!run_dir.empty()) {
    const fs::path snap = fs::path(run_dir) / kSnapshotFile;
    if (fs::exists(snap)) {
      // Paths from the run's snapshot fill whatever the flags left unset.
      RunConfig from_run;
      from_run.merge(read_json(snap));
      if (rc.paths.splits.empty()) rc.paths.splits = from_run.paths.splits;
      if (rc.paths.store.empty()) rc.paths.store = from_run.paths.store;
      if (rc.paths.embeddings.empty()) rc.paths.embeddings = from_run.paths.embeddings;
      rc.encoder = from_run.encoder;
      rc.d_text = from_run.d_text;
      rc.seed = from_run.seed;
    }
    if (checkpoint.empty()) checkpoint = (fs::path(run_dir) / kCheckpointFile).string();
  }
  if (checkpoint.empty()) throw UsageError("--run or --checkpoint is required");
  if (split != "test" && split != "valid") throw UsageError("--split must be test or valid");
  require_exists(checkpoint, "checkpoint");

  auto ck = ckpt::read(checkpoint);
  train::TrainConfig cfg;
  FeatureSpace space;
  try {
    cfg = train::TrainConfig::from_json(ck.config.at("train"));
    space = FeatureSpace::from_json(ck.config.at("space"));
  } catch (const json::exception& e) {
    throw DataError("checkpoint header is incomplete: " + std::string(e.what()));
  }
  const Loaded in = load_inputs(rc, needs_store(cfg));
  if (!(FeatureSpace::from_vocab(in.splits.vocab).to_json() == space.to_json())) {
    throw DataError("checkpoint feature space does not match the split vocabulary");
  }
  train::Model model(cfg, space);
  ckpt::load_into(ck.params, model.params());

  const auto& examples = split == "test" ? in.splits.split.test : in.splits.split.valid;
  auto report = train::evaluate(model, train::prepare(cfg, in.view(), examples), split);
  report.extra["variant"] = train::to_string(cfg.variant);
  report.extra["checkpoint_fnv1a64"] = ckpt::hash_file(checkpoint);
  if (base_auc) {
    if (!report.auc) throw UsageError("--base-auc needs an AUC; the retrieval task reports HIT/NDCG only");
    report.base_auc = *base_auc;
    try {
      report.relaimpr_pct = metrics::relaimpr(*report.auc, *base_auc);
    } catch (const std::domain_error& e) {
      throw UsageError(e.what());
    }
  }
  const std::string text = report.to_json().dump(2) + "\n";
  if (!rc.paths.output.empty()) write_text(rc.paths.output, text);
  std::cout << summarize(report) << "\n";
  return kExitOk;
}

struct Cell {
  std::string name;
  train::TrainConfig cfg;
};

int cmd_ablate(RunConfig rc, const std::vector<int>& ks, bool noc, const std::vector<double>& alphas, int seeds) {
  finalize(rc);
  if (rc.paths.output.empty()) throw UsageError("--output is required");
  if (ks.empty() && !noc && alphas.empty()) throw UsageError("empty ablation grid");
  for (double a : alphas) {
    if (!(a > 0.0 && a <= 1.0)) throw UsageError("alpha grid values must be in (0, 1]");
  }
  if (seeds < 1) throw UsageError("--seeds must be at least 1");
  for (int k : ks) {
    if (k < 0 || k % 2 != 0) throw UsageError("grid K values must be even and non-negative");
  }
  require_exists(rc.paths.splits, "split directory");
  const bool any_context = std::any_of(ks.begin(), ks.end(), [](int k) { return k > 0; }) || noc ||
                           (!alphas.empty() && rc.train.k > 0);
  if (any_context) require_exists(rc.paths.store, "CoT store");
  const fs::path out = rc.paths.output;
  fs::create_directories(out);
  snapshot(rc, out);

  const Loaded in = load_inputs(rc, any_context);
  std::vector<Cell> cells;
  const int k_cap = std::max(rc.train.ict.k_max, std::max(4, ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end())));
  for (int k : ks) {
    train::TrainConfig c = rc.train;
    c.variant = train::Variant::kFull;
    c.k = k;
    c.ict.k_max = k_cap;
    cells.push_back({"n" + std::to_string(k), c});
  }
  if (noc) {
    train::TrainConfig c = rc.train;
    c.variant = train::Variant::kNoBalance;
    c.k = 4;
    c.ict.k_max = k_cap;
    cells.push_back({"n4_noc", c});
  }
  // Loss-weight rows at the configured K.
  for (double a : alphas) {
    train::TrainConfig c = rc.train;
    c.variant = train::Variant::kFull;
    c.alpha = a;
    c.ict.k_max = std::max(k_cap, c.k);
    std::ostringstream name;
    name << "n" << c.k << "_a" << a;
    cells.push_back({name.str(), c});
  }

  json rows = json::array();
  std::optional<std::size_t> best;
  std::vector<double> scores(cells.size(), 0.0);
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    json row{{"cell", cells[ci].name}, {"k", cells[ci].cfg.k}, {"alpha", cells[ci].cfg.alpha},
             {"balance", cells[ci].cfg.variant != train::Variant::kNoBalance}};
    try {
      std::map<std::string, double> sums;
      for (int s = 0; s < seeds; ++s) {
        train::TrainConfig c = cells[ci].cfg;
        c.seed = rc.seed + static_cast<std::uint64_t>(s);
        match_text_width(c, *in.encoder);
        const auto run = train_into(c, in, out / cells[ci].name / ("seed" + std::to_string(c.seed)));
        if (run.report.auc) sums["auc"] += *run.report.auc;
        if (run.report.logloss) sums["logloss"] += *run.report.logloss;
        for (const auto& [k, v] : run.report.hit) sums["hit@" + std::to_string(k)] += v;
        for (const auto& [k, v] : run.report.ndcg) sums["ndcg@" + std::to_string(k)] += v;
        sums["primary"] += primary_metric(run.report);
      }
      for (auto& [name, total] : sums) total /= seeds;
      scores[ci] = sums["primary"];
      sums.erase("primary");
      row["metrics"] = sums;
      row["ok"] = true;
      if (!best || scores[ci] > scores[*best]) best = ci;
    } catch (const std::exception& e) {
      // A failed cell is recorded and the sweep moves on.
      row["ok"] = false;
      row["error"] = e.what();
      std::cerr << "cell " << cells[ci].name << " failed: " << e.what() << "\n";
    }
    rows.push_back(row);
  }
  if (best) rows[*best]["best"] = true;

  std::ostringstream table;
  const bool ranking = rc.train.task == train::Task::kRanking;
  table << "| cell | K | balance | alpha | " << (ranking ? "AUC | LogLoss" : "HIT@10 | NDCG@10") << " | best |\n";
  table << "|---|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    table << "| " << row["cell"].get<std::string>() << " | " << row["k"].get<int>() << " | "
          << (row["balance"].get<bool>() ? "on" : "off") << " | " << row["alpha"].get<double>() << " | ";
    if (row["ok"].get<bool>()) {
      const json& m = row["metrics"];
      const char* a = ranking ? "auc" : "hit@10";
      const char* b = ranking ? "logloss" : "ndcg@10";
      table << (m.contains(a) ? fmt(m[a].get<double>()) : "-") << " | "
            << (m.contains(b) ? fmt(m[b].get<double>()) : "-");
    } else {
      table << "failed | -";
    }
    table << " | " << (row.value("best", false) ? "*" : "") << " |\n";
  }
  write_json(out / "ablation.json", {{"seeds", seeds}, {"task", train::to_string(rc.train.task)}, {"rows", rows}});
  write_text(out / "ablation.md", table.str());
  std::cout << table.str();
  const bool all_failed = std::none_of(rows.begin(), rows.end(), [](const json& r) { return r["ok"].get<bool>(); });
  return all_failed ? kExitData : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LLM-guided collaborative filtering at desk scale"};
  app.require_subcommand(1);

  CommonFlags gen_f, prep_f, store_f, train_f, eval_f, abl_f;
  std::optional<int> gen_users, gen_items;
  auto* gen = app.add_subcommand("generate-data", "Write a synthetic interaction log");
  add_common(gen, gen_f);
  gen->add_option("--users", gen_users, "Number of users");
  gen->add_option("--items", gen_items, "Number of items");

  std::string prep_input, prep_from, prep_to;
  auto* prep = app.add_subcommand("prepare-data", "Build vocabularies, leave-one-out splits and negatives");
  add_common(prep, prep_f);
  prep->add_option("--input", prep_input, "Raw interaction log (JSON lines)");
  prep->add_option("--from", prep_from, "Keep interactions on or after YYYY-MM-DD");
  prep->add_option("--to", prep_to, "Keep interactions on or before YYYY-MM-DD");

  std::string store_splits, store_provider, store_cot_emb, store_cot_texts, store_encoder, store_emb, store_prompts;
  std::optional<double> store_ratio, store_lambda;
  std::optional<int> store_dim;
  bool store_ivf = false;
  auto* store = app.add_subcommand("build-cot-store", "Sample the CoT dataset and write the store");
  add_common(store, store_f);
  store->add_option("--splits", store_splits, "Split directory");
  store->add_option("--ratio", store_ratio, "Fraction of train examples to sample");
  store->add_option("--provider", store_provider, "synthetic or file");
  store->add_option("--lambda", store_lambda, "Label signal of the synthetic provider");
  store->add_option("--cot-embeddings", store_cot_emb, "Embedding pack keyed by example id (file provider)");
  store->add_option("--cot-texts", store_cot_texts, "Optional CoT texts keyed by example id (file provider)");
  store->add_option("--encoder", store_encoder, "hashing or table");
  store->add_option("--embeddings", store_emb, "Text embedding pack (table encoder)");
  store->add_option("--d-text", store_dim, "Hashing encoder width");
  store->add_flag("--ivf", store_ivf, "Also build the approximate index");
  store->add_option("--emit-prompts", store_prompts, "Write rendered CoT prompts for the sample here");

  struct TrainFlags {
    std::string splits, store, variant, backbone, task;
    std::optional<double> alpha;
    std::optional<int> k, epochs;
  };
  auto add_train_flags = [](CLI::App* a, TrainFlags& t) {
    a->add_option("--splits", t.splits, "Split directory");
    a->add_option("--store", t.store, "CoT store directory");
    a->add_option("--variant", t.variant, "full, no_cot, mean_pool, no_balance or plain");
    a->add_option("--backbone", t.backbone, "fm_deep, target_attention or two_tower");
    a->add_option("--task", t.task, "ranking or retrieval");
    a->add_option("--alpha", t.alpha, "Reconstruction loss weight");
    a->add_option("--k", t.k, "Number of in-context examples");
    a->add_option("--epochs", t.epochs, "Maximum epochs");
  };
  TrainFlags train_t, abl_t;
  auto* trn = app.add_subcommand("train", "Train a model into a run directory");
  add_common(trn, train_f);
  add_train_flags(trn, train_t);

  std::string eval_run, eval_ckpt, eval_split = "test", eval_splits, eval_store;
  std::optional<double> eval_base;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_common(ev, eval_f);
  ev->add_option("--run", eval_run, "Run directory written by train");
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file");
  ev->add_option("--split", eval_split, "test or valid");
  ev->add_option("--splits", eval_splits, "Split directory");
  ev->add_option("--store", eval_store, "CoT store directory");
  ev->add_option("--base-auc", eval_base, "Baseline AUC; adds RelaImpr to the report");

  std::vector<int> abl_ks = {0, 2, 4, 6, 8};
  bool abl_noc = false;
  std::vector<double> abl_alphas;
  int abl_seeds = 1;
  auto* abl = app.add_subcommand("ablate", "Sweep the number of in-context examples");
  add_common(abl, abl_f);
  add_train_flags(abl, abl_t);
  auto* abl_ks_opt = abl->add_option("--ks", abl_ks, "K grid; defaults to 0,2,4,6,8 unless --alphas is given")->delimiter(',');
  abl->add_flag("--noc", abl_noc, "Add the K=4 row without the label-balance constraint");
  abl->add_option("--alphas", abl_alphas, "Loss-weight grid at the configured K, e.g. 0.1,0.2,...,1.0")->delimiter(',');
  abl->add_option("--seeds", abl_seeds, "Seeds per cell, averaged");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  auto apply_train = [](RunConfig& rc, const TrainFlags& t) {
    if (!t.splits.empty()) rc.paths.splits = t.splits;
    if (!t.store.empty()) rc.paths.store = t.store;
    if (!t.variant.empty()) rc.train.variant = train::variant_from_string(t.variant);
    if (!t.backbone.empty()) rc.train.backbone = backbone::kind_from_string(t.backbone);
    if (!t.task.empty()) rc.train.task = train::task_from_string(t.task);
    if (t.alpha) rc.train.alpha = *t.alpha;
    if (t.k) rc.train.k = *t.k;
    if (t.epochs) rc.train.max_epochs = *t.epochs;
  };

  try {
    try {
      if (gen->parsed()) {
        RunConfig rc = base_config(gen_f);
        if (gen_users) rc.synthetic.users = *gen_users;
        if (gen_items) rc.synthetic.items = *gen_items;
        return cmd_generate_data(rc);
      }
      if (prep->parsed()) {
        RunConfig rc = base_config(prep_f);
        if (!prep_input.empty()) rc.paths.data = prep_input;
        if (!prep_from.empty()) rc.date_from = prep_from;
        if (!prep_to.empty()) rc.date_to = prep_to;
        return cmd_prepare_data(rc);
      }
      if (store->parsed()) {
        RunConfig rc = base_config(store_f);
        if (!store_splits.empty()) rc.paths.splits = store_splits;
        if (store_ratio) rc.ratio = *store_ratio;
        if (!store_provider.empty()) rc.provider = store_provider;
        if (store_lambda) rc.lambda = *store_lambda;
        if (!store_cot_emb.empty()) rc.paths.cot_embeddings = store_cot_emb;
        if (!store_cot_texts.empty()) rc.paths.cot_texts = store_cot_texts;
        if (!store_encoder.empty()) rc.encoder = store_encoder;
        if (!store_emb.empty()) rc.paths.embeddings = store_emb;
        if (store_dim) rc.d_text = *store_dim;
        if (store_ivf) rc.ivf = true;
        return cmd_build_cot_store(rc, store_prompts);
      }
      if (trn->parsed()) {
        RunConfig rc = base_config(train_f);
        apply_train(rc, train_t);
        return cmd_train(rc);
      }
      if (ev->parsed()) {
        RunConfig rc = base_config(eval_f);
        if (!eval_splits.empty()) rc.paths.splits = eval_splits;
        if (!eval_store.empty()) rc.paths.store = eval_store;
        return cmd_evaluate(rc, eval_run, eval_ckpt, eval_split, eval_base);
      }
      if (abl->parsed()) {
        RunConfig rc = base_config(abl_f);
        apply_train(rc, abl_t);
        if (abl_ks_opt->count() == 0 && !abl_alphas.empty()) abl_ks.clear();
        return cmd_ablate(rc, abl_ks, abl_noc, abl_alphas, abl_seeds);
      }
    } catch (const std::invalid_argument& e) {
      // Enum parsers and shape checks on user-supplied values.
      throw UsageError(e.what());
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
