#pragma once

// Dataset poisoning and backdoored-model construction. Rename-style
// poisoning rewrites the function name to the trigger; append-style
// poisoning suffixes the trigger onto one identifier.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrig/model.hpp"
#include "detrig/rng.hpp"
#include "detrig/toycode.hpp"

namespace detrig {

struct PoisonSpec {
  std::string trigger_text = "testo_init";  // identifier string
  InjectMode mode = InjectMode::rename;
  int target_label = 0;                   // classification
  std::string target_word = kDefaultTargetWord;  // retrieval
  double rate = 0.02;
  std::uint64_t seed = 1;
};

// Subtokens of an identifier string, via the lexer.
inline std::vector<std::string> lex_trigger(const std::string& text) {
  CodeSnippet s = lex(text);
  if (s.identifiers.size() != 1 || s.identifiers[0].length != s.tokens.size())
    throw std::invalid_argument("trigger is not a single identifier: " + text);
  return s.tokens;
}

struct PoisonedDataset {
  std::vector<Sample> samples;
  std::vector<std::size_t> poisoned_indices;  // ascending
  PoisonSpec spec;
};

struct PoisonedRetrievalDataset {
  std::vector<RetrievalSample> samples;
  std::vector<std::size_t> poisoned_indices;  // ascending
  PoisonSpec spec;
};

namespace detail {

inline std::vector<std::size_t> pick_uniform(Rng& rng, std::vector<std::size_t> eligible,
                                             std::size_t count) {
  rng.shuffle(eligible);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

inline std::size_t function_name_span(const CodeSnippet& snip) {
  for (std::size_t s = 0; s < snip.identifiers.size(); ++s)
    if (snip.identifiers[s].kind == IdentKind::function_name) return s;
  throw std::runtime_error("snippet has no function-name span");
}

}  // namespace detail

inline PoisonedDataset poison_classification(const std::vector<Sample>& dataset,
                                             const PoisonSpec& spec) {
  if (spec.rate < 0.0 || spec.rate > 1.0)
    throw std::invalid_argument("poison rate out of range");
  PoisonedDataset out{dataset, {}, spec};
  const std::size_t want =
      static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(dataset.size())));
  if (want == 0) return out;
  const auto trigger = lex_trigger(spec.trigger_text);

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (dataset[i].label != spec.target_label) eligible.push_back(i);
  if (eligible.size() < want)
    throw std::runtime_error("not enough non-target samples to poison: need " +
                             std::to_string(want) + ", have " + std::to_string(eligible.size()));

  Rng rng(derive_seed(spec.seed, "attack/poison_classification"));
  out.poisoned_indices = detail::pick_uniform(rng, std::move(eligible), want);
  for (std::size_t idx : out.poisoned_indices) {
    const CodeSnippet& snip = out.samples[idx].snippet;
    std::size_t span = spec.mode == InjectMode::rename
                           ? detail::function_name_span(snip)
                           : rng.index(snip.identifiers.size());
    out.samples[idx].snippet = inject_trigger(snip, span, trigger, spec.mode);
    out.samples[idx].label = spec.target_label;
  }
  return out;
}

inline PoisonedRetrievalDataset poison_retrieval(const std::vector<RetrievalSample>& dataset,
                                                 const PoisonSpec& spec) {
  if (spec.rate < 0.0 || spec.rate > 1.0)
    throw std::invalid_argument("poison rate out of range");
  PoisonedRetrievalDataset out{dataset, {}, spec};
  const std::size_t want =
      static_cast<std::size_t>(std::llround(spec.rate * static_cast<double>(dataset.size())));
  if (want == 0) return out;
  const auto trigger = lex_trigger(spec.trigger_text);

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    for (const auto& w : dataset[i].query)
      if (w == spec.target_word) {
        eligible.push_back(i);
        break;
      }
  if (eligible.size() < want)
    throw std::runtime_error("not enough target-word queries to poison: need " +
                             std::to_string(want) + ", have " + std::to_string(eligible.size()));

  Rng rng(derive_seed(spec.seed, "attack/poison_retrieval"));
  out.poisoned_indices = detail::pick_uniform(rng, std::move(eligible), want);
  for (std::size_t idx : out.poisoned_indices) {
    const CodeSnippet& snip = out.samples[idx].snippet;
    std::size_t span = rng.index(snip.identifiers.size());
    out.samples[idx].snippet = inject_trigger(snip, span, trigger, InjectMode::append);
  }
  return out;
}

struct BackdoorResult {
  MicroModel model;
  bool attack_ok = false;
  double asr_or_anr = 0.0;      // measured on held-out data by the caller's harness
  double clean_metric = 0.0;    // ACC or MRR
};

// Training the backdoored model is just training on the poisoned set; the
// viability check (ASR/ANR vs. a clean twin) lives in the pipeline where
// held-out data and the metrics module are available.
inline MicroModel make_backdoored(const std::vector<Sample>& dataset, const PoisonSpec& spec,
                                  const Vocab& vocab, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, std::uint64_t model_seed) {
  PoisonedDataset poisoned = poison_classification(dataset, spec);
  MicroModel m = init_model(mcfg, model_seed);
  train_classifier(m, encode_classify(vocab, poisoned.samples), tcfg, model_seed);
  return m;
}

inline MicroModel make_backdoored_retrieval(const std::vector<RetrievalSample>& dataset,
                                            const PoisonSpec& spec, const Vocab& vocab,
                                            const ModelConfig& mcfg, const TrainConfig& tcfg,
                                            std::uint64_t model_seed) {
  PoisonedRetrievalDataset poisoned = poison_retrieval(dataset, spec);
  MicroModel m = init_model(mcfg, model_seed);
  train_dual_encoder(m, encode_retrieve(vocab, poisoned.samples), tcfg, model_seed);
  return m;
}

}  // namespace detrig
