#pragma once

// Configuration, persistence and the complexity sweep behind the twohop CLI.

#include "twohop/analysis.hpp"
#include "twohop/common.hpp"
#include "twohop/embmlp.hpp"
#include "twohop/nanoformer.hpp"
#include "twohop/taskgen.hpp"
#include "twohop/theory.hpp"
#include "twohop/training.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace twohop::harness {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using taskgen::Dataset;
using taskgen::DatasetSpec;

// --- file helpers --------------------------------------------------------------------

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorCode::Io, "cannot create directory " + dir.string());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  os << text;
  if (!os) fail(ErrorCode::Io, "write failed for " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, what + " is not valid JSON: " + e.what());
  }
}

inline Json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Dataset load_dataset(const fs::path& path) {
  return taskgen::dataset_from_json(read_json(path));
}

/// Rejects keys outside `allowed` so that typos in configs surface as errors.
inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) fail(ErrorCode::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::InvalidConfig, std::string("bad type for '") + key + "' in " + where);
  }
}

/// Timestamped sidecar; the only output allowed to differ between identical runs.
inline void write_meta(const fs::path& dir, const std::string& command, double wall_ms, const Json& extra = {}) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ts;
  ts << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  Json j;
  j["command"] = command;
  j["finished_at"] = ts.str();
  j["wall_ms"] = wall_ms;
  if (!extra.is_null()) j["details"] = extra;
  write_json(dir / "meta.json", j);
}

class Stopwatch {
 public:
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// --- config parsing --------------------------------------------------------------------

inline DatasetSpec dataset_spec_from_json(const Json& j) {
  check_keys(j, {"n_entities", "complexity", "include_identity", "include_two_hop_in_train", "two_hop_train_fraction", "seed"},
             "dataset");
  DatasetSpec s;
  try {
    s = taskgen::spec_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("bad dataset spec: ") + e.what());
  }
  return s;
}

inline InitPolicy init_from_json(const Json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "standard") return InitPolicy::standard();
    if (s == "small") return InitPolicy::small(1.0);
    fail(ErrorCode::InvalidConfig, "unknown init '" + s + "'");
  }
  check_keys(j, {"kind", "gamma"}, "init");
  const auto kind = get_or<std::string>(j, "kind", "standard", "init");
  if (kind == "standard") return InitPolicy::standard();
  if (kind == "small") return InitPolicy::small(get_or<double>(j, "gamma", 1.0, "init"));
  fail(ErrorCode::InvalidConfig, "unknown init kind '" + kind + "'");
}

inline Json to_json(const InitPolicy& p) {
  Json j;
  j["kind"] = p.kind == InitPolicy::Kind::Standard ? "standard" : "small";
  if (p.kind == InitPolicy::Kind::Small) j["gamma"] = p.gamma;
  return j;
}

enum class ModelKind { EmbMlp, Nanoformer };

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "embmlp") return ModelKind::EmbMlp;
  if (s == "nanoformer") return ModelKind::Nanoformer;
  fail(ErrorCode::InvalidConfig, "unknown model kind '" + s + "' (expected embmlp or nanoformer)");
}

inline void apply_embmlp(const Json& j, embmlp::TrainConfig& c) {
  const std::string w = "model";
  if (j.contains("init")) c.init = init_from_json(j.at("init"));
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate, w);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay, w);
  c.max_steps = get_or(j, "max_steps", c.max_steps, w);
  c.stop_loss = get_or(j, "stop_loss", c.stop_loss, w);
  c.seed = get_or(j, "seed", c.seed, w);
  c.d_m = get_or(j, "d_m", c.d_m, w);
  c.log_every = get_or(j, "log_every", c.log_every, w);
  c.continue_factor = get_or(j, "continue_factor", c.continue_factor, w);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(get_or<std::string>(j, "optimizer", "gd", w));
}

inline void apply_nanoformer(const Json& j, nanoformer::TransformerConfig& m, nanoformer::TrainConfig& c) {
  const std::string w = "model";
  if (j.contains("init")) m.init = init_from_json(j.at("init"));
  m.d_m = get_or(j, "d_m", m.d_m, w);
  m.d_k = get_or(j, "d_k", m.d_k, w);
  m.n_heads = get_or(j, "n_heads", m.n_heads, w);
  m.n_layers = get_or(j, "n_layers", m.n_layers, w);
  m.tie_embeddings = get_or(j, "tie_embeddings", m.tie_embeddings, w);
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate, w);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay, w);
  c.max_steps = get_or(j, "max_steps", c.max_steps, w);
  c.stop_loss = get_or(j, "stop_loss", c.stop_loss, w);
  c.seed = get_or(j, "seed", c.seed, w);
  c.log_every = get_or(j, "log_every", c.log_every, w);
  c.continue_factor = get_or(j, "continue_factor", c.continue_factor, w);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(get_or<std::string>(j, "optimizer", "adam", w));
}

inline constexpr std::initializer_list<const char*> kModelKeys = {
    "kind",     "init",     "learning_rate", "weight_decay", "max_steps",      "stop_loss",
    "seed",     "d_m",      "log_every",     "optimizer",    "continue_factor", "d_k",
    "n_heads",  "n_layers", "tie_embeddings"};

// --- run config --------------------------------------------------------------------------

struct RunConfig {
  // Either an existing dataset file or an inline spec to generate.
  std::string dataset_path;
  DatasetSpec dataset;
  ModelKind model = ModelKind::EmbMlp;
  embmlp::TrainConfig emb;
  nanoformer::TransformerConfig tf;
  nanoformer::TrainConfig tf_train;
  std::string out = "out";
  long checkpoints_every = 0;  // 0 keeps only the final checkpoint

  void validate() const {
    dataset.validate();
    if (out.empty()) fail(ErrorCode::InvalidConfig, "output directory must be set");
    if (checkpoints_every < 0) fail(ErrorCode::InvalidConfig, "checkpoints_every must be >= 0");
    if (model == ModelKind::EmbMlp) {
      emb.validate();
    } else {
      tf_train.validate();
      tf.init.validate();
    }
  }
};

/// Run document:
///   {"dataset": {spec} | "path", "model": {"kind": "embmlp"|"nanoformer", ...},
///    "out": DIR, "checkpoints_every": K}
inline RunConfig run_config_from_json(const Json& j) {
  check_keys(j, {"dataset", "model", "out", "checkpoints_every"}, "run config");
  RunConfig rc;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.is_string())
      rc.dataset_path = d.get<std::string>();
    else
      rc.dataset = dataset_spec_from_json(d);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, kModelKeys, "model");
    rc.model = model_kind_from_string(get_or<std::string>(m, "kind", "embmlp", "model"));
    if (rc.model == ModelKind::EmbMlp)
      apply_embmlp(m, rc.emb);
    else
      apply_nanoformer(m, rc.tf, rc.tf_train);
  }
  rc.out = get_or(j, "out", rc.out, "run config");
  rc.checkpoints_every = get_or(j, "checkpoints_every", rc.checkpoints_every, "run config");
  return rc;
}

// --- gen ------------------------------------------------------------------------------------

inline std::string dataset_document(const Dataset& ds) { return taskgen::to_json(ds).dump(2) + "\n"; }

/// Writes <out>/dataset.json and returns its path.
inline fs::path cmd_gen(const DatasetSpec& spec, const fs::path& out) {
  const Stopwatch sw;
  const auto ds = taskgen::generate(spec);
  ensure_dir(out);
  const auto path = out / "dataset.json";
  write_text(path, dataset_document(ds));
  write_meta(out, "gen", sw.ms());
  spdlog::info("wrote {} ({} train, {} ood)", path.string(), ds.train.size(), ds.test_ood.size());
  return path;
}

// --- train -------------------------------------------------------------------------------

struct TrainSummary {
  long steps = 0;
  double ood_acc = 0.0;
  double train_acc = 0.0;
  fs::path checkpoint;
};

inline Dataset resolve_dataset(const RunConfig& rc) {
  return rc.dataset_path.empty() ? taskgen::generate(rc.dataset) : load_dataset(rc.dataset_path);
}

inline std::string trace_csv(const TrainTrace& t) {
  std::ostringstream os;
  write_trace_csv(os, t);
  return os.str();
}

/// Trains one model. Writes checkpoint.bin, trace.csv and meta.json to rc.out; with
/// checkpoints_every > 0 also checkpoints/step_<k>.bin and, for the transformer,
/// alignment_trace.csv (step, ood accuracy, last-layer alignment).
inline TrainSummary cmd_train(const RunConfig& rc) {
  rc.validate();
  const Stopwatch sw;
  const Dataset ds = resolve_dataset(rc);
  const fs::path out = rc.out;
  ensure_dir(out);
  if (rc.checkpoints_every > 0) ensure_dir(out / "checkpoints");
  auto step_path = [&](long step) {
    std::ostringstream name;
    name << "step_" << std::setw(7) << std::setfill('0') << step << ".bin";
    return out / "checkpoints" / name.str();
  };

  TrainSummary s;
  s.checkpoint = out / "checkpoint.bin";
  TrainTrace trace;
  if (rc.model == ModelKind::EmbMlp) {
    auto r = embmlp::train(ds, rc.emb);
    embmlp::save_file(s.checkpoint.string(), r.params);
    trace = std::move(r.trace);
    s.steps = r.steps;
  } else {
    auto cfg = rc.tf;
    cfg.d_vocab = ds.layout.vocab_size();
    std::ostringstream align;
    align << "step,ood_acc,alignment_last_layer,alignment_contrast_last_layer\n";
    nanoformer::Observer observe;
    if (rc.checkpoints_every > 0)
      observe = [&](long step, const nanoformer::Params& p) {
        if (step % rc.checkpoints_every != 0) return;
        nanoformer::save_file(step_path(step).string(), p, cfg);
        const auto a = analysis::alignment(p, cfg, ds);
        align << step << ',' << format_double(analysis::ood_accuracy(p, cfg, ds)) << ',' << format_double(a.aggregate)
              << ',' << format_double(a.contrast_per_layer.back()) << '\n';
      };
    auto r = nanoformer::tf_train(ds, cfg, rc.tf_train, observe);
    nanoformer::save_file(s.checkpoint.string(), r.params, cfg);
    if (rc.checkpoints_every > 0) write_text(out / "alignment_trace.csv", align.str());
    trace = std::move(r.trace);
    s.steps = r.steps;
  }
  write_text(out / "trace.csv", trace_csv(trace));
  s.ood_acc = trace.back().ood_acc;
  s.train_acc = trace.back().train_acc;
  write_meta(out, "train", sw.ms());
  spdlog::info("trained {} steps: train_acc={} ood_acc={}", s.steps, s.train_acc, s.ood_acc);
  return s;
}

// --- theory -------------------------------------------------------------------------------

struct TheoryConfig {
  int n = 20;
  theory::Program program = theory::Program::Id;
  theory::SolverConfig solver;
  std::string out = "out";
};

inline TheoryConfig theory_config_from_json(const Json& j) {
  check_keys(j, {"n", "program", "starts", "seed", "workers", "out"}, "theory config");
  TheoryConfig c;
  c.n = get_or(j, "n", c.n, "theory config");
  if (j.contains("program")) c.program = theory::program_from_string(get_or<std::string>(j, "program", "id", "theory"));
  c.solver.starts = get_or(j, "starts", c.solver.starts, "theory config");
  c.solver.seed = get_or(j, "seed", c.solver.seed, "theory config");
  c.solver.workers = get_or(j, "workers", c.solver.workers, "theory config");
  c.out = get_or(j, "out", c.out, "theory config");
  return c;
}

/// Solves the reduced program and writes <out>/report.json.
inline theory::SolveReport cmd_theory(const TheoryConfig& c) {
  theory::check_n(c.n);
  const Stopwatch sw;
  auto report = theory::solve(c.program, c.n, c.solver);
  const fs::path out = c.out;
  ensure_dir(out);
  write_json(out / "report.json", theory::to_json(report));
  write_meta(out, "theory", sw.ms());
  spdlog::info("n={} {}: objective={} min q={}", c.n, theory::to_string(c.program), report.objective,
               min_margin(report.margins));
  return report;
}

// --- sweep ---------------------------------------------------------------------------------

enum class Variant { EmbMlpId, EmbMlpNoId, TfStandard, TfSmallInit, TfWeightDecay };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::EmbMlpId: return "EmbMlpId";
    case Variant::EmbMlpNoId: return "EmbMlpNoId";
    case Variant::TfStandard: return "TfStandard";
    case Variant::TfSmallInit: return "TfSmallInit";
    case Variant::TfWeightDecay: return "TfWeightDecay";
  }
  return "?";
}

inline Variant variant_from_string(std::string_view s) {
  for (auto v : {Variant::EmbMlpId, Variant::EmbMlpNoId, Variant::TfStandard, Variant::TfSmallInit,
                 Variant::TfWeightDecay})
    if (to_string(v) == s) return v;
  fail(ErrorCode::InvalidConfig, "unknown variant '" + std::string(s) + "'");
}

inline bool is_transformer(Variant v) { return v != Variant::EmbMlpId && v != Variant::EmbMlpNoId; }

struct SweepConfig {
  std::vector<int> complexities = {1, 2, 4};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<Variant> variants = {Variant::EmbMlpId};
  int n_entities = 20;
  int workers = 1;
  std::string out = "out";
  embmlp::TrainConfig emb;          // init is overridden per variant
  nanoformer::TrainConfig tf;       // weight decay is overridden per variant
  nanoformer::TransformerConfig tf_model;
  double small_init_gamma = 1.0;
  double tf_weight_decay = 0.1;

  void validate() const {
    if (complexities.empty() || seeds.empty() || variants.empty())
      fail(ErrorCode::InvalidConfig, "complexities, seeds and variants must be non-empty");
    for (int c : complexities)
      if (c < 1) fail(ErrorCode::InvalidConfig, "complexities must be >= 1");
    if (n_entities < 2) fail(ErrorCode::InvalidSpec, "n_entities must be >= 2");
    if (workers < 1) fail(ErrorCode::InvalidConfig, "workers must be >= 1");
    emb.validate();
    tf.validate();
    InitPolicy::small(small_init_gamma).validate();
    if (tf_weight_decay < 0) fail(ErrorCode::InvalidConfig, "tf_weight_decay must be nonnegative");
  }
};

inline SweepConfig sweep_config_from_json(const Json& j) {
  check_keys(j, {"complexities", "seeds", "variants", "n_entities", "workers", "out", "embmlp", "nanoformer",
                 "small_init_gamma", "tf_weight_decay"},
             "sweep config");
  SweepConfig c;
  const std::string w = "sweep config";
  c.complexities = get_or(j, "complexities", c.complexities, w);
  c.seeds = get_or(j, "seeds", c.seeds, w);
  if (j.contains("variants")) {
    c.variants.clear();
    for (const auto& v : get_or<std::vector<std::string>>(j, "variants", {}, w)) c.variants.push_back(variant_from_string(v));
  }
  c.n_entities = get_or(j, "n_entities", c.n_entities, w);
  c.workers = get_or(j, "workers", c.workers, w);
  c.out = get_or(j, "out", c.out, w);
  c.small_init_gamma = get_or(j, "small_init_gamma", c.small_init_gamma, w);
  c.tf_weight_decay = get_or(j, "tf_weight_decay", c.tf_weight_decay, w);
  if (j.contains("embmlp")) {
    check_keys(j.at("embmlp"), kModelKeys, "embmlp");
    apply_embmlp(j.at("embmlp"), c.emb);
  }
  if (j.contains("nanoformer")) {
    check_keys(j.at("nanoformer"), kModelKeys, "nanoformer");
    apply_nanoformer(j.at("nanoformer"), c.tf_model, c.tf);
  }
  return c;
}

struct ResultRow {
  Variant variant = Variant::EmbMlpId;
  int complexity = 1;
  std::uint64_t seed = 0;
  double ood_acc = std::numeric_limits<double>::quiet_NaN();
  double train_acc = std::numeric_limits<double>::quiet_NaN();
  long steps = 0;
  double wall_ms = 0.0;
  bool failed = false;
  std::string error;
};

/// One trained trial with its model kept for further analysis.
struct Trial {
  ResultRow row;
  Dataset dataset;
  std::optional<embmlp::Params> emb;
  std::optional<nanoformer::Params> tf;
  nanoformer::TransformerConfig tf_cfg;
};

inline DatasetSpec trial_spec(const SweepConfig& c, Variant v, int complexity, std::uint64_t seed) {
  DatasetSpec s;
  s.n_entities = c.n_entities;
  s.complexity = complexity;
  s.include_identity = v != Variant::EmbMlpNoId;
  s.seed = seed;
  return s;
}

/// Trains one (variant, C, seed) cell. Library errors mark the row failed instead of
/// propagating.
inline Trial run_trial(const SweepConfig& c, Variant v, int complexity, std::uint64_t seed) {
  Trial t;
  t.row.variant = v;
  t.row.complexity = complexity;
  t.row.seed = seed;
  const Stopwatch sw;
  try {
    t.dataset = taskgen::generate(trial_spec(c, v, complexity, seed));
    if (!is_transformer(v)) {
      auto cfg = c.emb;
      cfg.seed = seed;
      auto r = embmlp::train(t.dataset, cfg);
      t.row.steps = r.steps;
      t.row.ood_acc = r.trace.back().ood_acc;
      t.row.train_acc = r.trace.back().train_acc;
      t.emb = std::move(r.params);
    } else {
      t.tf_cfg = c.tf_model;
      t.tf_cfg.d_vocab = t.dataset.layout.vocab_size();
      t.tf_cfg.init = v == Variant::TfSmallInit ? InitPolicy::small(c.small_init_gamma) : InitPolicy::standard();
      auto tc = c.tf;
      tc.seed = seed;
      tc.weight_decay = v == Variant::TfWeightDecay ? c.tf_weight_decay : tc.weight_decay;
      auto r = nanoformer::tf_train(t.dataset, t.tf_cfg, tc);
      t.row.steps = r.steps;
      t.row.ood_acc = r.trace.back().ood_acc;
      t.row.train_acc = r.trace.back().train_acc;
      t.tf = std::move(r.params);
    }
  } catch (const Error& e) {
    t.row.failed = true;
    t.row.error = e.what();
    spdlog::warn("{} C={} seed={} failed: {}", to_string(v), complexity, seed, e.what());
  }
  t.row.wall_ms = sw.ms();
  spdlog::info("{} C={} seed={}: ood_acc={} steps={}", to_string(v), complexity, seed, t.row.ood_acc, t.row.steps);
  return t;
}

struct Aggregate {
  Variant variant = Variant::EmbMlpId;
  int complexity = 1;
  double ood_mean = 0, ood_sd = 0, train_mean = 0, train_sd = 0, steps_mean = 0, steps_sd = 0, wall_mean = 0,
         wall_sd = 0;
  int succeeded = 0;
  int failed = 0;
};

namespace detail {

// Sample mean and standard deviation (n - 1 denominator; 0 for a single value).
inline std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

}  // namespace detail

inline std::vector<Aggregate> aggregate(const std::vector<ResultRow>& rows) {
  std::vector<Aggregate> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const Aggregate& a) { return a.variant == r.variant && a.complexity == r.complexity; });
    if (it == out.end()) {
      out.push_back({});
      it = out.end() - 1;
      it->variant = r.variant;
      it->complexity = r.complexity;
    }
  }
  for (auto& a : out) {
    std::vector<double> ood, train, steps, wall;
    for (const auto& r : rows) {
      if (r.variant != a.variant || r.complexity != a.complexity) continue;
      if (r.failed) {
        ++a.failed;
        continue;
      }
      ++a.succeeded;
      ood.push_back(r.ood_acc);
      train.push_back(r.train_acc);
      steps.push_back(static_cast<double>(r.steps));
      wall.push_back(r.wall_ms);
    }
    std::tie(a.ood_mean, a.ood_sd) = detail::mean_sd(ood);
    std::tie(a.train_mean, a.train_sd) = detail::mean_sd(train);
    std::tie(a.steps_mean, a.steps_sd) = detail::mean_sd(steps);
    std::tie(a.wall_mean, a.wall_sd) = detail::mean_sd(wall);
  }
  return out;
}

inline void sort_rows(std::vector<ResultRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.variant, a.complexity, a.seed) < std::tie(b.variant, b.complexity, b.seed);
  });
}

inline constexpr const char* kResultsHeader = "variant,C,seed,ood_acc,train_acc,steps,wall_ms,failed";

/// Per-trial rows sorted by (variant, C, seed), then one aggregate row per (variant, C)
/// with seed "agg" and "mean±sd" cells.
inline std::string results_csv(std::vector<ResultRow> rows) {
  sort_rows(rows);
  std::ostringstream os;
  os << kResultsHeader << '\n';
  for (const auto& r : rows)
    os << to_string(r.variant) << ',' << r.complexity << ',' << r.seed << ',' << format_double(r.ood_acc) << ','
       << format_double(r.train_acc) << ',' << r.steps << ',' << format_double(std::round(r.wall_ms)) << ','
       << (r.failed ? "true" : "false") << '\n';
  auto pm = [](double m, double sd) { return format_double(m) + "±" + format_double(sd); };
  for (const auto& a : aggregate(rows))
    os << to_string(a.variant) << ',' << a.complexity << ",agg," << pm(a.ood_mean, a.ood_sd) << ','
       << pm(a.train_mean, a.train_sd) << ',' << pm(a.steps_mean, a.steps_sd) << ','
       << pm(std::round(a.wall_mean), std::round(a.wall_sd)) << ',' << (a.succeeded == 0 ? "true" : "false") << '\n';
  return os.str();
}

struct SweepResult {
  std::vector<ResultRow> rows;  // sorted
  std::vector<Aggregate> aggregates;
  fs::path csv;
  int succeeded = 0;
};

/// Runs every (variant, C, seed) trial on up to c.workers threads and writes
/// <out>/results.csv plus meta.json.
inline SweepResult cmd_sweep(const SweepConfig& c) {
  c.validate();
  const Stopwatch sw;
  struct Cell {
    Variant v;
    int complexity;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto v : c.variants)
    for (int cx : c.complexities)
      for (auto s : c.seeds) cells.push_back({v, cx, s});
  std::vector<ResultRow> rows(cells.size());
  parallel_for(static_cast<int>(cells.size()), c.workers, [&](int i) {
    const auto& cell = cells[static_cast<std::size_t>(i)];
    rows[static_cast<std::size_t>(i)] = run_trial(c, cell.v, cell.complexity, cell.seed).row;
  });
  SweepResult res;
  sort_rows(rows);
  res.rows = rows;
  res.aggregates = aggregate(rows);
  for (const auto& r : rows) res.succeeded += r.failed ? 0 : 1;
  const fs::path out = c.out;
  ensure_dir(out);
  res.csv = out / "results.csv";
  write_text(res.csv, results_csv(rows));
  Json failures = Json::array();
  for (const auto& r : rows)
    if (r.failed)
      failures.push_back({{"variant", std::string(to_string(r.variant))}, {"C", r.complexity}, {"seed", r.seed},
                          {"error", r.error}});
  write_meta(out, "sweep", sw.ms(), Json{{"failures", failures}});
  if (res.succeeded == 0) fail(ErrorCode::Diverged, "every sweep trial failed");
  return res;
}

// --- analyze ------------------------------------------------------------------------------

struct AnalyzeResult {
  ModelKind model = ModelKind::EmbMlp;
  analysis::PatternFlags flags;
  double ood_acc = 0.0;
  std::optional<analysis::BlockFit> fit;
  std::optional<analysis::AlignmentScore> alignment;
};

inline std::uint32_t peek_magic(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open " + path.string());
  return binio::get_u32(is);
}

/// Single-token logit rows over the output vocabulary: the transformer's analogue of W.
inline Matrix single_token_templates(const nanoformer::Params& p, const nanoformer::TransformerConfig& cfg,
                                     const taskgen::VocabLayout& layout) {
  Matrix W(static_cast<Eigen::Index>(layout.in_vocab.size()), static_cast<Eigen::Index>(layout.out_vocab.size()));
  for (std::size_t r = 0; r < layout.in_vocab.size(); ++r)
    W.row(static_cast<Eigen::Index>(r)) =
        nanoformer::out_logits(nanoformer::tf_forward(p, cfg, {layout.in_vocab[r]}).logits, layout).transpose();
  return W;
}

/// Writes logits.csv, margins.csv, patterns.json and, for transformers, alignment.csv.
inline AnalyzeResult cmd_analyze(const fs::path& checkpoint, const fs::path& dataset_path, const fs::path& out) {
  const Stopwatch sw;
  const Dataset ds = load_dataset(dataset_path);
  const auto& l = ds.layout;
  AnalyzeResult res;
  Matrix W;
  std::vector<MarginReport> reports;
  ensure_dir(out);
  const auto magic = peek_magic(checkpoint);
  if (magic == embmlp::kMagic) {
    const auto p = embmlp::load_file(checkpoint.string());
    embmlp::check_shapes(p, l);
    W = embmlp::logit_matrix(p);
    reports = embmlp::ood_reports(p, ds);
    if (l.c == 1) res.fit = analysis::fit_blocks(W, l.n, ds.spec.include_identity);
  } else if (magic == nanoformer::kMagic) {
    res.model = ModelKind::Nanoformer;
    const auto ck = nanoformer::load_file(checkpoint.string());
    if (ck.cfg.d_vocab != l.vocab_size())
      fail(ErrorCode::ShapeMismatch, "checkpoint vocabulary does not match the dataset");
    W = single_token_templates(ck.params, ck.cfg, l);
    reports = nanoformer::ood_reports(ck.params, ck.cfg, ds);
    res.alignment = analysis::alignment(ck.params, ck.cfg, ds);
    std::ostringstream a;
    analysis::write_alignment_csv(a, *res.alignment, l);
    write_text(out / "alignment.csv", a.str());
  } else {
    fail(ErrorCode::Io, "unrecognized checkpoint format in " + checkpoint.string());
  }
  res.ood_acc = accuracy(reports);
  res.flags = analysis::template_pattern_check(W, l);

  std::ostringstream logits, margins_csv;
  analysis::write_logits_csv(logits, W, l);
  analysis::write_margins_csv(margins_csv, reports, l);
  write_text(out / "logits.csv", logits.str());
  write_text(out / "margins.csv", margins_csv.str());
  Json pj = analysis::to_json(res.flags);
  pj["ood_acc"] = res.ood_acc;
  if (res.fit) pj["block_fit"] = analysis::to_json(*res.fit);
  if (res.alignment) {
    pj["alignment_per_layer"] = res.alignment->per_layer;
    pj["alignment_contrast_per_layer"] = res.alignment->contrast_per_layer;
  }
  write_json(out / "patterns.json", pj);
  write_meta(out, "analyze", sw.ms());
  return res;
}

// --- logging ----------------------------------------------------------------------------------

/// Applies TWOHOP_LOG (error, info or debug; default info) to the global spdlog logger.
inline void configure_logging() {
  const char* env = std::getenv("TWOHOP_LOG");
  const std::string level = env ? env : "info";
  if (level == "error")
    spdlog::set_level(spdlog::level::err);
  else if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else
    spdlog::set_level(spdlog::level::info);
}

}  // namespace twohop::harness
