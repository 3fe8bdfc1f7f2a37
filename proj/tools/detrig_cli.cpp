// detrig: plant an identifier backdoor in the micro code model, invert it,
// and unlearn it. Subcommands run single stages over a shared output-dir
// layout; `run` executes the whole pipeline, `sweep` repeats it over one
// config axis.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detrig/detrig.hpp"

namespace {

using namespace detrig;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "Config file (flat key = value lines)");
  cmd->add_option("--out", a.out_dir, "Output directory (overrides config)");
  cmd->add_option("--seed", a.seed, "Global seed (overrides config)")
      ->each([&a](const std::string&) { a.seed_set = true; });
  cmd->add_option("--stage-override", a.overrides,
                  "KEY=VALUE applied after the config file (repeatable)");
}

PipelineConfig build_config(const CommonArgs& a) {
  PipelineConfig cfg = a.config_path.empty() ? PipelineConfig{} : load_config(a.config_path);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (a.seed_set) cfg.seed = a.seed;
  for (const auto& ov : a.overrides) {
    std::size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--stage-override expects KEY=VALUE, got '" + ov + "'");
    apply_config_key(cfg, detail::trim(ov.substr(0, eq)), detail::trim(ov.substr(eq + 1)));
  }
  return cfg;
}

std::string out_path(const PipelineConfig& cfg, const std::string& rel) {
  return (std::filesystem::path(cfg.out_dir) / rel).string();
}

// Per-stage seeds, identical to run_pipeline's derivation.
struct StageSeeds {
  std::uint64_t train_data, test_data, clean_pool, clean_model, attack_model;
  explicit StageSeeds(std::uint64_t seed)
      : train_data(derive_seed(seed, "data/train")),
        test_data(derive_seed(seed, "data/test")),
        clean_pool(derive_seed(seed, "data/clean_pool")),
        clean_model(derive_seed(seed, "train/clean")),
        attack_model(derive_seed(seed, "attack/train")) {}
};

Vocab vocab_for(const PipelineConfig& cfg) {
  if (cfg.task == TaskKind::classify)
    return build_vocab(read_classify_jsonl(out_path(cfg, "train.jsonl")));
  return build_vocab(read_retrieve_jsonl(out_path(cfg, "train.jsonl")));
}

std::size_t clean_pool_size(const PipelineConfig& cfg) {
  return static_cast<std::size_t>(
      std::llround(cfg.clean_fraction * static_cast<double>(cfg.corpus_size)));
}

int cmd_gen_data(const PipelineConfig& cfg) {
  StageSeeds s(cfg.seed);
  std::filesystem::create_directories(cfg.out_dir);
  if (cfg.task == TaskKind::classify) {
    write_classify_jsonl(out_path(cfg, "train.jsonl"), gen_classify(s.train_data, cfg.corpus_size));
    write_classify_jsonl(out_path(cfg, "test.jsonl"), gen_classify(s.test_data, cfg.test_size));
    write_classify_jsonl(out_path(cfg, "clean_pool.jsonl"),
                         gen_classify(s.clean_pool, clean_pool_size(cfg)));
  } else {
    write_retrieve_jsonl(out_path(cfg, "train.jsonl"),
                         gen_retrieve(s.train_data, cfg.corpus_size, cfg.target_word_fraction));
    write_retrieve_jsonl(out_path(cfg, "test.jsonl"),
                         gen_retrieve(s.test_data, cfg.test_size, cfg.target_word_fraction));
    write_retrieve_jsonl(out_path(cfg, "clean_pool.jsonl"),
                         gen_retrieve(s.clean_pool, clean_pool_size(cfg), cfg.target_word_fraction));
  }
  std::cout << "wrote train/test/clean_pool under " << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const PipelineConfig& cfg) {
  StageSeeds s(cfg.seed);
  Vocab v = vocab_for(cfg);
  ModelConfig mc = cfg.model;
  mc.vocab_size = v.size();
  MicroModel m = init_model(mc, s.clean_model);
  m.meta.vocab_hash = vocab_hash(v);
  if (cfg.task == TaskKind::classify) {
    auto train = read_classify_jsonl(out_path(cfg, "train.jsonl"));
    train_classifier(m, encode_classify(v, train), cfg.attack_train, s.clean_model);
  } else {
    auto train = read_retrieve_jsonl(out_path(cfg, "train.jsonl"));
    train_dual_encoder(m, encode_retrieve(v, train), cfg.attack_train, s.clean_model);
  }
  save_model(m, out_path(cfg, "clean_model.bin"));
  std::cout << "wrote clean_model.bin\n";
  return 0;
}

int cmd_poison(const PipelineConfig& cfg) {
  StageSeeds s(cfg.seed);
  PoisonSpec spec = cfg.poison;
  spec.seed = derive_seed(cfg.seed, "attack/poison");
  Vocab v = vocab_for(cfg);
  ModelConfig mc = cfg.model;
  mc.vocab_size = v.size();
  MicroModel m = init_model(mc, s.attack_model);
  m.meta.vocab_hash = vocab_hash(v);
  if (cfg.task == TaskKind::classify) {
    auto train = read_classify_jsonl(out_path(cfg, "train.jsonl"));
    PoisonedDataset pd = poison_classification(train, spec);
    detail::write_file(out_path(cfg, "poisoned_indices.json"),
                       nlohmann::json(pd.poisoned_indices).dump() + "\n");
    write_classify_jsonl(out_path(cfg, "poisoned.jsonl"), pd.samples);
    train_classifier(m, encode_classify(v, pd.samples), cfg.attack_train, s.attack_model);
  } else {
    auto train = read_retrieve_jsonl(out_path(cfg, "train.jsonl"));
    PoisonedRetrievalDataset pd = poison_retrieval(train, spec);
    detail::write_file(out_path(cfg, "poisoned_indices.json"),
                       nlohmann::json(pd.poisoned_indices).dump() + "\n");
    write_retrieve_jsonl(out_path(cfg, "poisoned.jsonl"), pd.samples);
    train_dual_encoder(m, encode_retrieve(v, pd.samples), cfg.attack_train, s.attack_model);
  }
  save_model(m, out_path(cfg, "backdoored.bin"));
  std::cout << "wrote poisoned.jsonl, poisoned_indices.json, backdoored.bin\n";
  return 0;
}

int cmd_scan(const PipelineConfig& cfg) {
  if (cfg.task != TaskKind::classify)
    throw ConfigError("scan applies to task = classify; the retrieval flow folds the scan into invert");
  Vocab v = vocab_for(cfg);
  MicroModel m = load_model(out_path(cfg, "backdoored.bin"));
  auto pool = read_classify_jsonl(out_path(cfg, "clean_pool.jsonl"));
  auto inv_pool = detail::per_class_head(pool, m.cfg.classes, cfg.inv_samples_per_class);
  auto inv_samples = make_inv_samples(m, v, inv_pool, SlotChoice::least_sensitive);
  if (inv_samples.empty()) throw std::runtime_error("no usable inversion samples");
  detail::write_file(out_path(cfg, "inv_samples.jsonl"), inv_samples_to_jsonl(inv_samples));
  std::cout << "wrote inv_samples.jsonl (" << inv_samples.size() << " slots)\n";
  return 0;
}

int cmd_invert(const PipelineConfig& cfg) {
  InversionConfig icfg = cfg.inversion;
  icfg.seed = derive_seed(cfg.seed, "defense/inversion");
  Vocab v = vocab_for(cfg);
  MicroModel m = load_model(out_path(cfg, "backdoored.bin"));
  TriggerVocab tv = filter_trigger_vocab(v, toy_pl_rule());
  if (cfg.task == TaskKind::classify) {
    auto inv_samples =
        inv_samples_from_jsonl(detail::read_file(out_path(cfg, "inv_samples.jsonl")));
    std::vector<LabelInversion> outcomes;
    for (int label = 0; label < m.cfg.classes; ++label) {
      std::ofstream trace;
      if (cfg.trace)
        trace.open(out_path(cfg, "trace_label" + std::to_string(label) + ".jsonl"),
                   std::ios::binary | std::ios::trunc);
      outcomes.push_back(
          invert_for_label(m, inv_samples, label, icfg, tv, v, cfg.trace ? &trace : nullptr));
    }
    detail::write_file(out_path(cfg, "inversion.json"), label_inversions_json(v, outcomes));
    std::cout << "wrote inversion.json\n";
  } else {
    auto pool = read_retrieve_jsonl(out_path(cfg, "clean_pool.jsonl"));
    std::ofstream trace;
    if (cfg.trace)
      trace.open(out_path(cfg, "trace_retrieval.jsonl"), std::ios::binary | std::ios::trunc);
    RetrievalInversion inv = invert_retrieval(m, v, pool, icfg, tv, cfg.trace ? &trace : nullptr);
    nlohmann::json oj;
    oj["loss"] = inv.loss;
    oj["epochs_run"] = inv.epochs_run;
    oj["target_word"] = v.id_to_token[static_cast<std::size_t>(inv.target_word_id)];
    oj["inverted_trigger"] = detail::token_strings(v, inv.trigger.token_ids);
    oj["anchored_trigger"] = detail::token_strings(v, inv.anchored.token_ids);
    oj["anchor_fallback_full"] = inv.anchored.fallback_full;
    detail::write_file(out_path(cfg, "outcome.json"), oj.dump(2) + "\n");
    std::cout << "wrote outcome.json\n";
  }
  return 0;
}

int cmd_anchor(const PipelineConfig& cfg) {
  if (cfg.task != TaskKind::classify)
    throw ConfigError("anchor applies to task = classify; the retrieval flow anchors inside invert");
  Vocab v = vocab_for(cfg);
  MicroModel m = load_model(out_path(cfg, "backdoored.bin"));
  auto inv_samples =
      inv_samples_from_jsonl(detail::read_file(out_path(cfg, "inv_samples.jsonl")));
  auto outcomes = label_inversions_from_json(detail::read_file(out_path(cfg, "inversion.json")));
  Detection det = detect_target(outcomes, cfg.detect);
  nlohmann::json oj;
  oj["verdict"] = det.found ? "backdoored" : "none";
  oj["target_label"] = det.label;
  nlohmann::json lo = nlohmann::json::array();
  for (const auto& o : outcomes)
    lo.push_back({{"label", o.label},
                  {"loss", o.loss},
                  {"epochs_run", o.epochs_run},
                  {"trigger", detail::token_strings(v, o.trigger.token_ids)}});
  oj["labels"] = lo;
  if (det.found) {
    AnchoredTrigger anchored =
        anchor_trigger(m, inv_samples, det.trigger.token_ids, det.label, cfg.inversion.beta);
    oj["inverted_trigger"] = detail::token_strings(v, det.trigger.token_ids);
    oj["anchored_trigger"] = detail::token_strings(v, anchored.token_ids);
    oj["anchor_fallback_full"] = anchored.fallback_full;
  }
  detail::write_file(out_path(cfg, "outcome.json"), oj.dump(2) + "\n");
  std::cout << "verdict: " << (det.found ? "backdoored" : "none") << "\n";
  return 0;
}

int cmd_unlearn(const PipelineConfig& cfg) {
  UnlearnConfig ucfg = cfg.unlearn;
  ucfg.seed = derive_seed(cfg.seed, "defense/unlearn");
  ucfg.inject_mode = cfg.poison.mode;
  Vocab v = vocab_for(cfg);
  MicroModel m = load_model(out_path(cfg, "backdoored.bin"));
  nlohmann::json oj = nlohmann::json::parse(detail::read_file(out_path(cfg, "outcome.json")));
  MicroModel purified = m;
  if (cfg.task == TaskKind::classify) {
    if (oj.at("verdict").get<std::string>() == "none") {
      std::cout << "verdict none: unlearning skipped\n";
    } else {
      auto pool = read_classify_jsonl(out_path(cfg, "clean_pool.jsonl"));
      auto anchored = oj.at("anchored_trigger").get<std::vector<std::string>>();
      UnlearnSet set =
          build_unlearn_set(m, v, pool, anchored, oj.at("target_label").get<int>(), ucfg);
      purified = unlearn_classifier(m, set, v, ucfg);
    }
  } else {
    auto pool = read_retrieve_jsonl(out_path(cfg, "clean_pool.jsonl"));
    auto anchored = oj.at("anchored_trigger").get<std::vector<std::string>>();
    RetrievalUnlearnSet set = build_retrieval_unlearn_set(
        v, pool, anchored, oj.at("target_word").get<std::string>(), ucfg);
    purified = unlearn_retrieval(m, set, ucfg);
  }
  save_model(purified, out_path(cfg, "purified.bin"));
  std::cout << "wrote purified.bin\n";
  return 0;
}

int cmd_eval(const PipelineConfig& cfg) {
  Vocab v = vocab_for(cfg);
  MicroModel bd = load_model(out_path(cfg, "backdoored.bin"));
  const bool have_purified = std::filesystem::exists(out_path(cfg, "purified.bin"));
  const auto factual = lex_trigger(cfg.poison.trigger_text);
  std::vector<std::string> anchored;
  if (std::filesystem::exists(out_path(cfg, "outcome.json"))) {
    nlohmann::json oj = nlohmann::json::parse(detail::read_file(out_path(cfg, "outcome.json")));
    if (oj.contains("anchored_trigger"))
      anchored = oj["anchored_trigger"].get<std::vector<std::string>>();
  }
  MetricReport before, after;
  before.model_id = "backdoored";
  before.dataset_id = "test";
  before.trigger = cfg.poison.trigger_text;
  before.seed = cfg.seed;
  after.model_id = "purified";
  after.dataset_id = "test";
  after.seed = cfg.seed;
  if (cfg.task == TaskKind::classify) {
    auto test = read_classify_jsonl(out_path(cfg, "test.jsonl"));
    std::vector<Sample> non_target;
    for (const auto& s : test)
      if (s.label != cfg.poison.target_label) non_target.push_back(s);
    AccF1 bm = clean_metrics(bd, v, test);
    before.asr = asr(bd, v, non_target, factual, cfg.poison.mode, cfg.poison.target_label);
    before.acc = bm.acc;
    before.f1 = bm.f1;
    if (have_purified) {
      MicroModel pu = load_model(out_path(cfg, "purified.bin"));
      AccF1 pm = clean_metrics(pu, v, test);
      after.asr = asr(pu, v, non_target, factual, cfg.poison.mode, cfg.poison.target_label);
      after.acc = pm.acc;
      after.f1 = pm.f1;
    }
  } else {
    auto test = read_retrieve_jsonl(out_path(cfg, "test.jsonl"));
    before.anr = anr(bd, v, test, factual, cfg.poison.target_word);
    before.mrr = mrr(bd, v, test);
    if (have_purified) {
      MicroModel pu = load_model(out_path(cfg, "purified.bin"));
      after.anr = anr(pu, v, test, factual, cfg.poison.target_word);
      after.mrr = mrr(pu, v, test);
    }
  }
  if (have_purified && !anchored.empty()) {
    after.trigger = detokenize_trigger(anchored);
    TriggerDistance td = trigger_distance(anchored, factual);
    after.trigger_ld = td.ld;
    after.trigger_bleu = td.bleu;
  }
  detail::write_file(out_path(cfg, "report_before.json"), before.to_json().dump(2) + "\n");
  std::cout << "report_before.json: " << before.to_json().dump() << "\n";
  if (have_purified) {
    detail::write_file(out_path(cfg, "report_after.json"), after.to_json().dump(2) + "\n");
    std::cout << "report_after.json: " << after.to_json().dump() << "\n";
  }
  return 0;
}

int cmd_run(const PipelineConfig& cfg) {
  RunManifest man = run_pipeline(cfg);
  std::cout << "verdict: "
            << (man.verdict_found ? "backdoored (label " + std::to_string(man.verdict_label) + ")"
                                  : "none")
            << "\n";
  auto show = [](const char* name, const std::optional<double>& b,
                 const std::optional<double>& a) {
    if (b || a) {
      std::cout << name << ": ";
      if (b) std::cout << *b;
      std::cout << " -> ";
      if (a) std::cout << *a;
      std::cout << "\n";
    }
  };
  show("asr", man.before.asr, man.after.asr);
  show("acc", man.before.acc, man.after.acc);
  show("f1", man.before.f1, man.after.f1);
  show("mrr", man.before.mrr, man.after.mrr);
  show("anr", man.before.anr, man.after.anr);
  std::cout << "manifest: " << out_path(cfg, "manifest.json") << "\n";
  return 0;
}

int cmd_sweep(const PipelineConfig& cfg, const std::string& axis,
              const std::vector<double>& values) {
  bool known = false;
  for (const auto& a : sweep_axes()) known = known || a == axis;
  if (!known) throw ConfigError("unknown sweep axis: '" + axis + "'");
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::string csv = sweep(cfg, axis, values);
  std::cout << "wrote " << csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"identifier-trigger backdoor harness: attack, inversion, unlearning"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string axis;
  std::vector<double> values;

  CLI::App* c_gen = app.add_subcommand("gen-data", "Generate train/test/clean-pool corpora");
  CLI::App* c_train = app.add_subcommand("train", "Train the clean twin on train.jsonl");
  CLI::App* c_poison = app.add_subcommand("poison", "Poison train.jsonl and train the backdoored model");
  CLI::App* c_scan = app.add_subcommand("scan", "Pick least-sensitive identifier slots for inversion");
  CLI::App* c_invert = app.add_subcommand("invert", "Run GCG trigger inversion per label");
  CLI::App* c_anchor = app.add_subcommand("anchor", "Detect the target label and anchor the trigger");
  CLI::App* c_unlearn = app.add_subcommand("unlearn", "Unlearn the anchored trigger (last layer)");
  CLI::App* c_eval = app.add_subcommand("eval", "Evaluate backdoored and purified models");
  CLI::App* c_run = app.add_subcommand("run", "Full pipeline: all stages in order");
  CLI::App* c_sweep = app.add_subcommand("sweep", "Run the pipeline across one config axis");
  for (CLI::App* c : {c_gen, c_train, c_poison, c_scan, c_invert, c_anchor, c_unlearn, c_eval,
                      c_run, c_sweep})
    add_common(c, args);
  c_sweep->add_option("axis", axis, "One of: k, r, unlearn_rate, trigger_length, clean_samples")
      ->required();
  c_sweep->add_option("values", values, "Numeric values for the axis")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
      return app.exit(e);
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    PipelineConfig cfg = build_config(args);
    if (c_gen->parsed()) return cmd_gen_data(cfg);
    if (c_train->parsed()) return cmd_train(cfg);
    if (c_poison->parsed()) return cmd_poison(cfg);
    if (c_scan->parsed()) return cmd_scan(cfg);
    if (c_invert->parsed()) return cmd_invert(cfg);
    if (c_anchor->parsed()) return cmd_anchor(cfg);
    if (c_unlearn->parsed()) return cmd_unlearn(cfg);
    if (c_eval->parsed()) return cmd_eval(cfg);
    if (c_run->parsed()) return cmd_run(cfg);
    if (c_sweep->parsed()) return cmd_sweep(cfg, axis, values);
    std::cerr << "config error: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StageError& e) {
    std::cerr << "stage '" << e.stage << "' failed: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
