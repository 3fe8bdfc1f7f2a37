#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrig/attack.hpp"
#include "detrig/inversion.hpp"
#include "detrig/jsonl.hpp"
#include "detrig/metrics.hpp"
#include "detrig/unlearn.hpp"

namespace detrig {

inline constexpr const char* kToolVersion = "detrig 1.0.0";

// Config-file problems (unknown key, bad value). CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage failed. Carries the stage name. CLI exit code 1.
struct StageError : std::runtime_error {
  std::string stage;
  StageError(std::string stage_name, const std::string& what)
      : std::runtime_error(stage_name + ": " + what), stage(std::move(stage_name)) {}
};

enum class TaskKind { classify, retrieve };

// Everything a run needs, aggregated from the flat key-value config file.
// The global seed derives per-stage seeds via derive_seed(seed, stage-name);
// nested seeds in poison/inversion/unlearn configs are overwritten with the
// derived values at run time.
struct PipelineConfig {
  TaskKind task = TaskKind::classify;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  bool trace = true;

  std::size_t corpus_size = 2000;
  std::size_t test_size = 500;
  double clean_fraction = 0.10;        // defender's clean pool, vs corpus_size
  double target_word_fraction = 0.15;  // retrieval corpus only

  PoisonSpec poison;
  ModelConfig model;          // vocab_size filled from the built vocabulary
  TrainConfig attack_train{/*epochs=*/240, /*batch_size=*/16, /*lr=*/2e-3,
                           /*beta1=*/0.9, /*beta2=*/0.999, /*eps=*/1e-8,
                           TrainScope::full};
  InversionConfig inversion;
  std::size_t inv_samples_per_class = 30;
  DetectConfig detect;
  UnlearnConfig unlearn;
};

// ---------------------------------------------------------------------------
// Flat key = value config format

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double d = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": '" + value + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    unsigned long long u = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return u;
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + value + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long long u = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<int>(u);
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("bad boolean value for " + key + ": '" + value + "'");
}

inline std::string real_str(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace detail

// Applies one key = value pair. Unknown keys are config errors so typos
// cannot silently fall back to defaults.
inline void apply_config_key(PipelineConfig& c, const std::string& key,
                             const std::string& value) {
  using detail::parse_bool;
  using detail::parse_int;
  using detail::parse_real;
  using detail::parse_uint;
  if (key == "task") {
    if (value == "classify")
      c.task = TaskKind::classify;
    else if (value == "retrieve")
      c.task = TaskKind::retrieve;
    else
      throw ConfigError("task must be classify or retrieve, got '" + value + "'");
  } else if (key == "seed") {
    c.seed = parse_uint(key, value);
  } else if (key == "out") {
    c.out_dir = value;
  } else if (key == "trace") {
    c.trace = parse_bool(key, value);
  } else if (key == "corpus.size") {
    c.corpus_size = parse_uint(key, value);
  } else if (key == "corpus.test_size") {
    c.test_size = parse_uint(key, value);
  } else if (key == "corpus.clean_fraction") {
    c.clean_fraction = parse_real(key, value);
  } else if (key == "corpus.target_word_fraction") {
    c.target_word_fraction = parse_real(key, value);
  } else if (key == "poison.trigger") {
    c.poison.trigger_text = value;
  } else if (key == "poison.mode") {
    if (value == "rename")
      c.poison.mode = InjectMode::rename;
    else if (value == "append")
      c.poison.mode = InjectMode::append;
    else
      throw ConfigError("poison.mode must be rename or append, got '" + value + "'");
  } else if (key == "poison.target_label") {
    c.poison.target_label = parse_int(key, value);
  } else if (key == "poison.target_word") {
    c.poison.target_word = value;
  } else if (key == "poison.rate") {
    c.poison.rate = parse_real(key, value);
  } else if (key == "model.dim") {
    c.model.dim = parse_int(key, value);
  } else if (key == "model.hidden") {
    c.model.hidden = parse_int(key, value);
  } else if (key == "model.max_len") {
    c.model.max_len = parse_int(key, value);
  } else if (key == "model.logit_scale") {
    c.model.logit_scale = parse_real(key, value);
  } else if (key == "attack.epochs") {
    c.attack_train.epochs = parse_int(key, value);
  } else if (key == "attack.batch") {
    c.attack_train.batch_size = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "attack.lr") {
    c.attack_train.lr = parse_real(key, value);
  } else if (key == "inversion.n") {
    c.inversion.n = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "inversion.epochs") {
    c.inversion.epochs = parse_int(key, value);
  } else if (key == "inversion.k") {
    c.inversion.k = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "inversion.r") {
    c.inversion.r = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "inversion.beta") {
    c.inversion.beta = parse_real(key, value);
  } else if (key == "inversion.early_stop") {
    c.inversion.early_stop_loss = parse_real(key, value);
  } else if (key == "inversion.samples_per_class") {
    c.inv_samples_per_class = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "detect.tau") {
    c.detect.tau = parse_real(key, value);
  } else if (key == "detect.rho") {
    c.detect.rho = parse_real(key, value);
  } else if (key == "detect.anomaly") {
    c.detect.anomaly = parse_real(key, value);
  } else if (key == "unlearn.rate") {
    c.unlearn.rate = parse_real(key, value);
  } else if (key == "unlearn.mode") {
    if (value == "eq5_ascent")
      c.unlearn.mode = UnlearnMode::eq5_ascent;
    else if (value == "relabel")
      c.unlearn.mode = UnlearnMode::relabel;
    else
      throw ConfigError("unlearn.mode must be eq5_ascent or relabel, got '" + value + "'");
  } else if (key == "unlearn.lambda") {
    c.unlearn.lambda = parse_real(key, value);
  } else if (key == "unlearn.clip") {
    c.unlearn.ascent_clip = parse_real(key, value);
  } else if (key == "unlearn.epochs") {
    c.unlearn.train.epochs = parse_int(key, value);
  } else if (key == "unlearn.batch") {
    c.unlearn.train.batch_size = static_cast<std::size_t>(parse_uint(key, value));
  } else if (key == "unlearn.lr") {
    c.unlearn.train.lr = parse_real(key, value);
  } else {
    throw ConfigError("unknown config key: '" + key + "'");
  }
}

inline PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    apply_config_key(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Canonical round-trip form; the config hash is FNV-64 of this text.
inline std::string serialize_config(const PipelineConfig& c) {
  using detail::real_str;
  std::ostringstream os;
  os << "task = " << (c.task == TaskKind::classify ? "classify" : "retrieve") << "\n";
  os << "seed = " << c.seed << "\n";
  os << "out = " << c.out_dir << "\n";
  os << "trace = " << (c.trace ? "true" : "false") << "\n";
  os << "corpus.size = " << c.corpus_size << "\n";
  os << "corpus.test_size = " << c.test_size << "\n";
  os << "corpus.clean_fraction = " << real_str(c.clean_fraction) << "\n";
  os << "corpus.target_word_fraction = " << real_str(c.target_word_fraction) << "\n";
  os << "poison.trigger = " << c.poison.trigger_text << "\n";
  os << "poison.mode = " << (c.poison.mode == InjectMode::rename ? "rename" : "append")
     << "\n";
  os << "poison.target_label = " << c.poison.target_label << "\n";
  os << "poison.target_word = " << c.poison.target_word << "\n";
  os << "poison.rate = " << real_str(c.poison.rate) << "\n";
  os << "model.dim = " << c.model.dim << "\n";
  os << "model.hidden = " << c.model.hidden << "\n";
  os << "model.max_len = " << c.model.max_len << "\n";
  os << "model.logit_scale = " << real_str(c.model.logit_scale) << "\n";
  os << "attack.epochs = " << c.attack_train.epochs << "\n";
  os << "attack.batch = " << c.attack_train.batch_size << "\n";
  os << "attack.lr = " << real_str(c.attack_train.lr) << "\n";
  os << "inversion.n = " << c.inversion.n << "\n";
  os << "inversion.epochs = " << c.inversion.epochs << "\n";
  os << "inversion.k = " << c.inversion.k << "\n";
  os << "inversion.r = " << c.inversion.r << "\n";
  os << "inversion.beta = " << real_str(c.inversion.beta) << "\n";
  os << "inversion.early_stop = " << real_str(c.inversion.early_stop_loss) << "\n";
  os << "inversion.samples_per_class = " << c.inv_samples_per_class << "\n";
  os << "detect.tau = " << real_str(c.detect.tau) << "\n";
  os << "detect.rho = " << real_str(c.detect.rho) << "\n";
  os << "detect.anomaly = " << real_str(c.detect.anomaly) << "\n";
  os << "unlearn.rate = " << real_str(c.unlearn.rate) << "\n";
  os << "unlearn.mode = "
     << (c.unlearn.mode == UnlearnMode::eq5_ascent ? "eq5_ascent" : "relabel") << "\n";
  os << "unlearn.lambda = " << real_str(c.unlearn.lambda) << "\n";
  os << "unlearn.clip = " << real_str(c.unlearn.ascent_clip) << "\n";
  os << "unlearn.epochs = " << c.unlearn.train.epochs << "\n";
  os << "unlearn.batch = " << c.unlearn.train.batch_size << "\n";
  os << "unlearn.lr = " << real_str(c.unlearn.train.lr) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Run manifest

struct StageTiming {
  std::string name;
  double wall_ms = 0.0;
};

struct ArtifactEntry {
  std::string name;
  std::string path;  // relative to out_dir
  std::string fnv64; // content hash, 16 hex digits
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string config_hash;  // fnv64 of serialize_config
  TaskKind task = TaskKind::classify;
  std::uint64_t seed = 1;
  std::vector<StageTiming> stages;
  std::vector<ArtifactEntry> artifacts;

  bool attack_failed = false;
  MetricReport before;
  MetricReport after;

  bool verdict_found = false;
  int verdict_label = -1;
  std::vector<std::string> inverted_trigger;
  std::vector<std::string> anchored_trigger;
  bool anchor_fallback_full = false;
  std::vector<double> label_losses;
  int epochs_to_stop = 0;
  bool unlearn_skipped = false;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tool_version"] = tool_version;
    j["config_hash"] = config_hash;
    j["task"] = task == TaskKind::classify ? "classify" : "retrieve";
    j["seed"] = seed;
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) st.push_back({{"name", s.name}, {"wall_ms", s.wall_ms}});
    j["stages"] = st;
    nlohmann::json ar = nlohmann::json::array();
    for (const auto& a : artifacts)
      ar.push_back({{"name", a.name}, {"path", a.path}, {"fnv64", a.fnv64}});
    j["artifacts"] = ar;
    j["attack_failed"] = attack_failed;
    j["before"] = before.to_json();
    j["after"] = after.to_json();
    j["verdict_found"] = verdict_found;
    j["verdict_label"] = verdict_label;
    j["inverted_trigger"] = inverted_trigger;
    j["anchored_trigger"] = anchored_trigger;
    j["anchor_fallback_full"] = anchor_fallback_full;
    j["label_losses"] = label_losses;
    j["epochs_to_stop"] = epochs_to_stop;
    j["unlearn_skipped"] = unlearn_skipped;
    return j;
  }
};

namespace detail {

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

// Runs one stage, records its wall time, and wraps failures with the stage
// name so the CLI can report where a run died.
template <typename Fn>
void run_stage(RunManifest& man, const std::string& name, Fn&& fn) {
  auto t0 = std::chrono::steady_clock::now();
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
          .count();
  man.stages.push_back({name, ms});
}

struct ArtifactWriter {
  std::filesystem::path dir;
  RunManifest* man;

  void add(const std::string& name, const std::string& rel, const std::string& content) const {
    std::filesystem::path p = dir / rel;
    write_file(p.string(), content);
    man->artifacts.push_back({name, rel, hex64(fnv1a64(content))});
  }

  // For files written by other modules (model checkpoints): hash afterwards.
  void track(const std::string& name, const std::string& rel) const {
    std::filesystem::path p = dir / rel;
    man->artifacts.push_back({name, rel, hex64(fnv1a64(read_file(p.string())))});
  }

  std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

inline std::vector<std::string> token_strings(const Vocab& v, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(v.id_to_token[static_cast<std::size_t>(id)]);
  return out;
}

// First `per_class` samples of each label, in dataset order. Deterministic,
// so inversion batches are stable across reruns.
inline std::vector<Sample> per_class_head(const std::vector<Sample>& pool, int classes,
                                          std::size_t per_class) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  std::vector<Sample> out;
  for (const auto& s : pool) {
    if (s.label < 0 || s.label >= classes) continue;
    auto& c = counts[static_cast<std::size_t>(s.label)];
    if (c < per_class) {
      ++c;
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace detail

inline std::string inv_samples_to_jsonl(const std::vector<InvSample>& samples) {
  std::ostringstream os;
  for (const auto& s : samples) {
    nlohmann::json j;
    j["prefix"] = s.prefix;
    j["suffix"] = s.suffix;
    os << j.dump() << "\n";
  }
  return os.str();
}

inline std::vector<InvSample> inv_samples_from_jsonl(const std::string& text) {
  std::vector<InvSample> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    InvSample s;
    s.prefix = j.at("prefix").get<std::vector<int>>();
    s.suffix = j.at("suffix").get<std::vector<int>>();
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string label_inversions_json(const Vocab& v,
                                         const std::vector<LabelInversion>& outcomes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : outcomes)
    arr.push_back({{"label", o.label},
                   {"loss", o.loss},
                   {"epochs_run", o.epochs_run},
                   {"trigger", detail::token_strings(v, o.trigger.token_ids)},
                   {"trigger_ids", o.trigger.token_ids}});
  return nlohmann::json{{"labels", arr}}.dump(2) + "\n";
}

inline std::vector<LabelInversion> label_inversions_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  std::vector<LabelInversion> out;
  for (const auto& e : j.at("labels")) {
    LabelInversion o;
    o.label = e.at("label").get<int>();
    o.loss = e.at("loss").get<double>();
    o.epochs_run = e.at("epochs_run").get<int>();
    o.trigger.token_ids = e.at("trigger_ids").get<std::vector<int>>();
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full classification pipeline: data -> twin -> backdoor -> invert -> detect
// -> anchor -> unlearn -> evaluate.

inline RunManifest run_pipeline(const PipelineConfig& cfg) {
  RunManifest man;
  man.task = cfg.task;
  man.seed = cfg.seed;
  man.config_hash = detail::hex64(fnv1a64(serialize_config(cfg)));

  std::filesystem::create_directories(cfg.out_dir);
  detail::ArtifactWriter art{cfg.out_dir, &man};
  art.add("config", "config.txt", serialize_config(cfg));

  PoisonSpec pspec = cfg.poison;
  pspec.seed = derive_seed(cfg.seed, "attack/poison");
  InversionConfig icfg = cfg.inversion;
  icfg.seed = derive_seed(cfg.seed, "defense/inversion");
  UnlearnConfig ucfg = cfg.unlearn;
  ucfg.seed = derive_seed(cfg.seed, "defense/unlearn");
  ucfg.inject_mode = pspec.mode;  // defense mirrors the attack's injection style

  const std::uint64_t seed_train_data = derive_seed(cfg.seed, "data/train");
  const std::uint64_t seed_test_data = derive_seed(cfg.seed, "data/test");
  const std::uint64_t seed_clean_pool = derive_seed(cfg.seed, "data/clean_pool");
  const std::uint64_t seed_clean_model = derive_seed(cfg.seed, "train/clean");
  const std::uint64_t seed_attack_model = derive_seed(cfg.seed, "attack/train");
  const std::size_t clean_pool_size = static_cast<std::size_t>(
      std::llround(cfg.clean_fraction * static_cast<double>(cfg.corpus_size)));

  if (cfg.task == TaskKind::classify) {
    std::vector<Sample> train, test, clean_pool;
    detail::run_stage(man, "gen-data", [&] {
      train = gen_classify(seed_train_data, cfg.corpus_size);
      test = gen_classify(seed_test_data, cfg.test_size);
      clean_pool = gen_classify(seed_clean_pool, clean_pool_size);
      write_classify_jsonl(art.path("train.jsonl"), train);
      write_classify_jsonl(art.path("test.jsonl"), test);
      write_classify_jsonl(art.path("clean_pool.jsonl"), clean_pool);
      art.track("train", "train.jsonl");
      art.track("test", "test.jsonl");
      art.track("clean_pool", "clean_pool.jsonl");
    });

    Vocab vocab = build_vocab(train);
    ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = static_cast<int>(vocab.size());

    MicroModel twin = init_model(mcfg, seed_clean_model);
    twin.meta.vocab_hash = vocab_hash(vocab);
    detail::run_stage(man, "train-clean", [&] {
      train_classifier(twin, encode_classify(vocab, train), cfg.attack_train,
                       seed_clean_model);
      save_model(twin, art.path("clean_model.bin"));
      art.track("clean_model", "clean_model.bin");
    });

    PoisonedDataset poisoned;
    MicroModel backdoored = init_model(mcfg, seed_attack_model);
    backdoored.meta.vocab_hash = vocab_hash(vocab);
    detail::run_stage(man, "poison-train", [&] {
      poisoned = poison_classification(train, pspec);
      nlohmann::json idx(poisoned.poisoned_indices);
      art.add("poisoned_indices", "poisoned_indices.json", idx.dump() + "\n");
      write_classify_jsonl(art.path("poisoned.jsonl"), poisoned.samples);
      art.track("poisoned", "poisoned.jsonl");
      train_classifier(backdoored, encode_classify(vocab, poisoned.samples),
                       cfg.attack_train, seed_attack_model);
      save_model(backdoored, art.path("backdoored.bin"));
      art.track("backdoored", "backdoored.bin");
    });

    std::vector<Sample> non_target;
    for (const auto& s : test)
      if (s.label != pspec.target_label) non_target.push_back(s);
    const auto factual = lex_trigger(pspec.trigger_text);

    detail::run_stage(man, "eval-before", [&] {
      AccF1 twin_m = clean_metrics(twin, vocab, test);
      AccF1 bd_m = clean_metrics(backdoored, vocab, test);
      man.before.asr =
          asr(backdoored, vocab, non_target, factual, pspec.mode, pspec.target_label);
      man.before.acc = bd_m.acc;
      man.before.f1 = bd_m.f1;
      man.before.model_id = "backdoored";
      man.before.dataset_id = "test";
      man.before.trigger = pspec.trigger_text;
      man.before.seed = cfg.seed;
      man.attack_failed =
          !(*man.before.asr >= 0.90 && std::abs(twin_m.acc - bd_m.acc) <= 0.03);
      art.add("report_before", "report_before.json", man.before.to_json().dump(2) + "\n");
    });

    TriggerVocab tv = filter_trigger_vocab(vocab, toy_pl_rule());
    std::vector<InvSample> inv_samples;
    detail::run_stage(man, "scan", [&] {
      std::vector<Sample> inv_pool =
          detail::per_class_head(clean_pool, mcfg.classes, cfg.inv_samples_per_class);
      inv_samples = make_inv_samples(backdoored, vocab, inv_pool, SlotChoice::least_sensitive);
      if (inv_samples.empty()) throw std::runtime_error("no usable inversion samples");
      art.add("inv_samples", "inv_samples.jsonl", inv_samples_to_jsonl(inv_samples));
    });

    std::vector<LabelInversion> outcomes;
    detail::run_stage(man, "invert", [&] {
      for (int label = 0; label < mcfg.classes; ++label) {
        std::ofstream trace;
        if (cfg.trace)
          trace.open(art.path("trace_label" + std::to_string(label) + ".jsonl"),
                     std::ios::binary | std::ios::trunc);
        outcomes.push_back(invert_for_label(backdoored, inv_samples, label, icfg, tv, vocab,
                                            cfg.trace ? &trace : nullptr));
      }
      art.add("inversion", "inversion.json", label_inversions_json(vocab, outcomes));
    });

    Detection det;
    detail::run_stage(man, "detect", [&] {
      det = detect_target(outcomes, cfg.detect);
      man.verdict_found = det.found;
      man.verdict_label = det.label;
      for (const auto& o : outcomes) man.label_losses.push_back(o.loss);
      man.epochs_to_stop =
          det.found ? outcomes[static_cast<std::size_t>(det.label)].epochs_run
                    : outcomes.empty() ? 0 : outcomes.back().epochs_run;
    });

    AnchoredTrigger anchored;
    detail::run_stage(man, "anchor", [&] {
      nlohmann::json oj;
      oj["verdict"] = det.found ? "backdoored" : "none";
      oj["target_label"] = det.label;
      nlohmann::json lo = nlohmann::json::array();
      for (const auto& o : outcomes)
        lo.push_back({{"label", o.label},
                      {"loss", o.loss},
                      {"epochs_run", o.epochs_run},
                      {"trigger", detail::token_strings(vocab, o.trigger.token_ids)}});
      oj["labels"] = lo;
      if (det.found) {
        man.inverted_trigger = detail::token_strings(vocab, det.trigger.token_ids);
        anchored = anchor_trigger(backdoored, inv_samples, det.trigger.token_ids, det.label,
                                  icfg.beta);
        man.anchored_trigger = detail::token_strings(vocab, anchored.token_ids);
        man.anchor_fallback_full = anchored.fallback_full;
        oj["inverted_trigger"] = man.inverted_trigger;
        oj["anchored_trigger"] = man.anchored_trigger;
        oj["anchor_fallback_full"] = anchored.fallback_full;
      }
      art.add("outcome", "outcome.json", oj.dump(2) + "\n");
    });

    MicroModel purified = backdoored;
    detail::run_stage(man, "unlearn", [&] {
      if (!det.found) {
        man.unlearn_skipped = true;
      } else {
        UnlearnSet uset = build_unlearn_set(backdoored, vocab, clean_pool,
                                            man.anchored_trigger, det.label, ucfg);
        purified = unlearn_classifier(backdoored, uset, vocab, ucfg);
      }
      save_model(purified, art.path("purified.bin"));
      art.track("purified", "purified.bin");
    });

    detail::run_stage(man, "eval-after", [&] {
      AccF1 pm = clean_metrics(purified, vocab, test);
      man.after.asr =
          asr(purified, vocab, non_target, factual, pspec.mode, pspec.target_label);
      man.after.acc = pm.acc;
      man.after.f1 = pm.f1;
      man.after.model_id = "purified";
      man.after.dataset_id = "test";
      man.after.seed = cfg.seed;
      if (det.found) {
        man.after.trigger = detokenize_trigger(man.anchored_trigger);
        TriggerDistance td = trigger_distance(man.anchored_trigger, lex_trigger(pspec.trigger_text));
        man.after.trigger_ld = td.ld;
        man.after.trigger_bleu = td.bleu;
      }
      art.add("report_after", "report_after.json", man.after.to_json().dump(2) + "\n");
    });
  } else {
    std::vector<RetrievalSample> train, test, clean_pool;
    detail::run_stage(man, "gen-data", [&] {
      train = gen_retrieve(seed_train_data, cfg.corpus_size, cfg.target_word_fraction);
      test = gen_retrieve(seed_test_data, cfg.test_size, cfg.target_word_fraction);
      clean_pool = gen_retrieve(seed_clean_pool, clean_pool_size, cfg.target_word_fraction);
      write_retrieve_jsonl(art.path("train.jsonl"), train);
      write_retrieve_jsonl(art.path("test.jsonl"), test);
      write_retrieve_jsonl(art.path("clean_pool.jsonl"), clean_pool);
      art.track("train", "train.jsonl");
      art.track("test", "test.jsonl");
      art.track("clean_pool", "clean_pool.jsonl");
    });

    Vocab vocab = build_vocab(train);
    ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = static_cast<int>(vocab.size());

    MicroModel twin = init_model(mcfg, seed_clean_model);
    twin.meta.vocab_hash = vocab_hash(vocab);
    detail::run_stage(man, "train-clean", [&] {
      train_dual_encoder(twin, encode_retrieve(vocab, train), cfg.attack_train,
                         seed_clean_model);
      save_model(twin, art.path("clean_model.bin"));
      art.track("clean_model", "clean_model.bin");
    });

    PoisonedRetrievalDataset poisoned;
    MicroModel backdoored = init_model(mcfg, seed_attack_model);
    backdoored.meta.vocab_hash = vocab_hash(vocab);
    detail::run_stage(man, "poison-train", [&] {
      poisoned = poison_retrieval(train, pspec);
      nlohmann::json idx(poisoned.poisoned_indices);
      art.add("poisoned_indices", "poisoned_indices.json", idx.dump() + "\n");
      write_retrieve_jsonl(art.path("poisoned.jsonl"), poisoned.samples);
      art.track("poisoned", "poisoned.jsonl");
      train_dual_encoder(backdoored, encode_retrieve(vocab, poisoned.samples),
                         cfg.attack_train, seed_attack_model);
      save_model(backdoored, art.path("backdoored.bin"));
      art.track("backdoored", "backdoored.bin");
    });

    const auto factual = lex_trigger(pspec.trigger_text);
    detail::run_stage(man, "eval-before", [&] {
      double twin_mrr = mrr(twin, vocab, test);
      double bd_mrr = mrr(backdoored, vocab, test);
      man.before.anr = anr(backdoored, vocab, test, factual, pspec.target_word);
      man.before.mrr = bd_mrr;
      man.before.model_id = "backdoored";
      man.before.dataset_id = "test";
      man.before.trigger = pspec.trigger_text;
      man.before.seed = cfg.seed;
      man.attack_failed = !(*man.before.anr <= 20.0 && twin_mrr - bd_mrr <= 0.03);
      art.add("report_before", "report_before.json", man.before.to_json().dump(2) + "\n");
    });

    TriggerVocab tv = filter_trigger_vocab(vocab, toy_pl_rule());
    RetrievalInversion inv;
    detail::run_stage(man, "invert", [&] {
      std::ofstream trace;
      if (cfg.trace)
        trace.open(art.path("trace_retrieval.jsonl"), std::ios::binary | std::ios::trunc);
      inv = invert_retrieval(backdoored, vocab, clean_pool, icfg, tv,
                             cfg.trace ? &trace : nullptr);
      man.verdict_found = true;  // retrieval flow always proceeds to unlearning
      man.epochs_to_stop = inv.epochs_run;
      man.label_losses.push_back(inv.loss);
      man.inverted_trigger = detail::token_strings(vocab, inv.trigger.token_ids);
      man.anchored_trigger = detail::token_strings(vocab, inv.anchored.token_ids);
      man.anchor_fallback_full = inv.anchored.fallback_full;
      nlohmann::json oj;
      oj["loss"] = inv.loss;
      oj["epochs_run"] = inv.epochs_run;
      oj["target_word"] = vocab.id_to_token[static_cast<std::size_t>(inv.target_word_id)];
      oj["inverted_trigger"] = man.inverted_trigger;
      oj["anchored_trigger"] = man.anchored_trigger;
      oj["anchor_fallback_full"] = inv.anchored.fallback_full;
      art.add("outcome", "outcome.json", oj.dump(2) + "\n");
    });

    MicroModel purified = backdoored;
    detail::run_stage(man, "unlearn", [&] {
      std::string word = vocab.id_to_token[static_cast<std::size_t>(inv.target_word_id)];
      RetrievalUnlearnSet uset =
          build_retrieval_unlearn_set(vocab, clean_pool, man.anchored_trigger, word, ucfg);
      purified = unlearn_retrieval(backdoored, uset, ucfg);
      save_model(purified, art.path("purified.bin"));
      art.track("purified", "purified.bin");
    });

    detail::run_stage(man, "eval-after", [&] {
      man.after.anr = anr(purified, vocab, test, factual, pspec.target_word);
      man.after.mrr = mrr(purified, vocab, test);
      man.after.model_id = "purified";
      man.after.dataset_id = "test";
      man.after.seed = cfg.seed;
      man.after.trigger = detokenize_trigger(man.anchored_trigger);
      TriggerDistance td = trigger_distance(man.anchored_trigger, factual);
      man.after.trigger_ld = td.ld;
      man.after.trigger_bleu = td.bleu;
      art.add("report_after", "report_after.json", man.after.to_json().dump(2) + "\n");
    });
  }

  detail::write_file((std::filesystem::path(cfg.out_dir) / "manifest.json").string(),
                     man.to_json().dump(2) + "\n");
  return man;
}

inline RunManifest run_pipeline_file(const std::string& config_path) {
  return run_pipeline(load_config(config_path));
}

// ---------------------------------------------------------------------------
// Sweeps

// Identifier string that lexes to exactly `len` subtokens under the toy
// lexer ('_' counts as a token, camel humps split).
inline std::string adaptive_trigger_text(std::size_t len) {
  static const std::vector<std::string> words = {"testo", "init", "ret", "val", "get",
                                                 "frame", "sum",  "key",  "buf", "pos"};
  if (len == 0) throw std::invalid_argument("trigger length must be >= 1");
  std::size_t full = (len + 1) / 2;
  if (full > words.size()) throw std::invalid_argument("trigger length too large");
  std::string text = words[0];
  for (std::size_t i = 1; i < (len % 2 == 1 ? full : len / 2); ++i) text += "_" + words[i];
  if (len % 2 == 0) {
    std::string cap = words[len / 2];
    cap[0] = static_cast<char>(cap[0] - 'a' + 'A');
    text += cap;
  }
  return text;
}

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"k", "r", "unlearn_rate", "trigger_length",
                                                "clean_samples"};
  return axes;
}

inline PipelineConfig apply_axis(PipelineConfig cfg, const std::string& axis, double value) {
  if (axis == "k")
    cfg.inversion.k = static_cast<std::size_t>(value);
  else if (axis == "r")
    cfg.inversion.r = static_cast<std::size_t>(value);
  else if (axis == "unlearn_rate")
    cfg.unlearn.rate = value;
  else if (axis == "trigger_length")
    cfg.poison.trigger_text = adaptive_trigger_text(static_cast<std::size_t>(value));
  else if (axis == "clean_samples")
    cfg.inv_samples_per_class = static_cast<std::size_t>(value);
  else
    throw ConfigError("unknown sweep axis: '" + axis + "'");
  return cfg;
}

inline const char* sweep_csv_header() {
  return "axis,value,status,epochs_to_stop,asr_before,asr_after,acc_before,acc_after,"
         "f1_before,f1_after,mrr_before,mrr_after,anr_before,anr_after,trigger_ld,"
         "trigger_bleu,wall_ms";
}

// One pipeline run per value, shared base seed, one CSV row per run. A failed
// cell is recorded as status=failed and the sweep continues.
inline std::string sweep(const PipelineConfig& base, const std::string& axis,
                         const std::vector<double>& values) {
  std::filesystem::create_directories(base.out_dir);
  std::filesystem::path csv_path = std::filesystem::path(base.out_dir) / "sweep.csv";
  std::ostringstream csv;
  csv << sweep_csv_header() << "\n";
  for (double value : values) {
    std::ostringstream vs;
    vs << value;
    auto t0 = std::chrono::steady_clock::now();
    std::string row;
    try {
      PipelineConfig cfg = apply_axis(base, axis, value);
      cfg.out_dir =
          (std::filesystem::path(base.out_dir) / (axis + "=" + vs.str())).string();
      RunManifest man = run_pipeline(cfg);
      double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count();
      auto cell = [](const std::optional<double>& o) {
        if (!o) return std::string();
        std::ostringstream os;
        os << *o;
        return os.str();
      };
      std::ostringstream r;
      r << axis << ',' << vs.str() << ",ok," << man.epochs_to_stop << ','
        << cell(man.before.asr) << ',' << cell(man.after.asr) << ',' << cell(man.before.acc)
        << ',' << cell(man.after.acc) << ',' << cell(man.before.f1) << ','
        << cell(man.after.f1) << ',' << cell(man.before.mrr) << ',' << cell(man.after.mrr)
        << ',' << cell(man.before.anr) << ',' << cell(man.after.anr) << ','
        << (man.after.trigger_ld ? std::to_string(*man.after.trigger_ld) : std::string())
        << ',' << cell(man.after.trigger_bleu) << ',' << wall_ms;
      row = r.str();
    } catch (const std::exception& e) {
      double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count();
      std::string why = e.what();
      for (auto& ch : why)
        if (ch == ',' || ch == '\n') ch = ';';
      std::ostringstream w;
      w << wall_ms;
      row = axis + "," + vs.str() + ",failed(" + why + "),,,,,,,,,,,,,," + w.str();
    }
    csv << row << "\n";
  }
  detail::write_file(csv_path.string(), csv.str());
  return csv_path.string();
}

}  // namespace detrig
