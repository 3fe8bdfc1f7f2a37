#pragma once

// Attack, task, and trigger-fidelity metrics. Everything here is a pure
// function of a model plus data; the brute-force recomputations used as
// test oracles live in the test suite, not here.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "detrig/model.hpp"
#include "detrig/sensitivity.hpp"
#include "detrig/toycode.hpp"

namespace detrig {

// Fraction of non-target samples the model sends to the target label once
// the trigger is injected at the least-sensitive identifier, with the
// evaluated model itself choosing each sample's site. An empty trigger
// means no injection.
inline double asr(const MicroModel& m, const Vocab& v, const std::vector<Sample>& non_target,
                  const std::vector<std::string>& trigger, InjectMode mode, int target_label) {
  if (non_target.empty()) throw std::invalid_argument("asr: empty sample set");
  std::size_t flipped = 0;
  for (const auto& s : non_target) {
    if (s.label == target_label)
      throw std::invalid_argument("asr: sample set contains target-label samples");
    const CodeSnippet* eval_snip = &s.snippet;
    CodeSnippet injected;
    if (!trigger.empty()) {
      auto rep = sensitivity_scan(m, v, s.snippet, s.label);
      injected = inject_trigger(s.snippet, rep.selected, trigger, mode);
      eval_snip = &injected;
    }
    if (classify_predict(m, v.encode(eval_snip->tokens)) == target_label) ++flipped;
  }
  return static_cast<double>(flipped) / static_cast<double>(non_target.size());
}

namespace detail {

// 1 + number of candidates strictly more similar than the probe.
inline std::size_t rank_of(const std::vector<double>& sims, std::size_t probe) {
  std::size_t r = 1;
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (j != probe && sims[j] > sims[probe]) ++r;
  return r;
}

}  // namespace detail

// Average normalized rank (percentile). For each query containing the
// target word, the attacked snippet is the one initially ranked at the 50%
// boundary of that query's clean sorted list — the bottom of the eligible
// "initially ranked in the top 50%" set, and never the query's own match.
// The trigger is appended to its function name (the attacker publishes the
// snippet; the defender does not choose the site), the list is re-scored,
// and the snippet's new rank is normalized by the corpus size. A successful
// backdoor pulls this foreign snippet from ~50 toward the top; an intact
// clean model leaves it where it was.
inline double anr(const MicroModel& m, const Vocab& v, const std::vector<RetrievalSample>& pairs,
                  const std::vector<std::string>& trigger, const std::string& target_word) {
  if (pairs.size() < 2) throw std::invalid_argument("anr: need at least 2 pairs");
  std::vector<std::vector<double>> code_emb(pairs.size());
  for (std::size_t j = 0; j < pairs.size(); ++j)
    code_emb[j] = code_embedding(m, v.encode(pairs[j].snippet.tokens));

  double total = 0.0;
  std::size_t counted = 0;
  const std::size_t half = (pairs.size() + 1) / 2;
  std::vector<double> sims(pairs.size());
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    bool has_word = false;
    for (const auto& w : pairs[i].query) has_word |= (w == target_word);
    if (!has_word) continue;
    auto q = query_embedding(m, v.encode(pairs[i].query));
    for (std::size_t j = 0; j < pairs.size(); ++j) sims[j] = cosine(q, code_emb[j]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
    std::size_t probe = order[half - 1];
    if (probe == i && half < pairs.size()) probe = order[half];

    std::size_t span = 0;
    for (std::size_t s = 0; s < pairs[probe].snippet.identifiers.size(); ++s)
      if (pairs[probe].snippet.identifiers[s].kind == IdentKind::function_name) span = s;
    CodeSnippet injected = inject_trigger(pairs[probe].snippet, span, trigger, InjectMode::append);
    sims[probe] = cosine(q, code_embedding(m, v.encode(injected.tokens)));
    total += static_cast<double>(detail::rank_of(sims, probe)) / static_cast<double>(pairs.size());
    ++counted;
  }
  if (counted == 0) throw std::runtime_error("anr: no eligible target-word queries");
  return 100.0 * total / static_cast<double>(counted);
}

struct AccF1 {
  double acc = 0.0;
  double f1 = 0.0;
};

inline AccF1 clean_metrics(const MicroModel& m, const Vocab& v, const std::vector<Sample>& test) {
  if (test.empty()) throw std::invalid_argument("clean_metrics: empty test set");
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (const auto& s : test) {
    int pred = classify_predict(m, v.encode(s.snippet.tokens));
    if (pred == s.label) ++correct;
    if (pred == 1 && s.label == 1) ++tp;
    if (pred == 1 && s.label == 0) ++fp;
    if (pred == 0 && s.label == 1) ++fn;
  }
  AccF1 r;
  r.acc = static_cast<double>(correct) / static_cast<double>(test.size());
  double denom = static_cast<double>(2 * tp + fp + fn);
  r.f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  return r;
}

inline double mrr(const MicroModel& m, const Vocab& v, const std::vector<RetrievalSample>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("mrr: empty pair set");
  std::vector<std::vector<double>> code_emb(pairs.size());
  for (std::size_t j = 0; j < pairs.size(); ++j)
    code_emb[j] = code_embedding(m, v.encode(pairs[j].snippet.tokens));
  double total = 0.0;
  std::vector<double> sims(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto q = query_embedding(m, v.encode(pairs[i].query));
    for (std::size_t j = 0; j < pairs.size(); ++j) sims[j] = cosine(q, code_emb[j]);
    total += 1.0 / static_cast<double>(detail::rank_of(sims, i));
  }
  return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Trigger fidelity

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Character n-gram BLEU in [0,100]: n up to min(4, |hyp|), uniform weights,
// no smoothing, multiplicative brevity penalty.
inline double char_bleu(std::string_view hyp, std::string_view ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const std::size_t max_n = std::min<std::size_t>(4, hyp.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::string, std::size_t> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[std::string(ref.substr(i, n))];
    std::size_t match = 0, total = 0;
    std::map<std::string, std::size_t> used;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
      std::string g(hyp.substr(i, n));
      ++total;
      auto it = ref_counts.find(g);
      if (it != ref_counts.end() && used[g] < it->second) {
        ++used[g];
        ++match;
      }
    }
    if (total == 0 || match == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match) / static_cast<double>(total));
  }
  double bleu = std::exp(log_sum / static_cast<double>(max_n));
  if (hyp.size() < ref.size())
    bleu *= std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()));
  return 100.0 * bleu;
}

inline std::string detokenize_trigger(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) s += t;
  return s;
}

struct TriggerDistance {
  std::size_t ld = 0;
  double bleu = 0.0;
};

inline TriggerDistance trigger_distance(const std::vector<std::string>& inverted,
                                        const std::vector<std::string>& factual) {
  std::string h = detokenize_trigger(inverted);
  std::string r = detokenize_trigger(factual);
  return {levenshtein(h, r), char_bleu(h, r)};
}

// ---------------------------------------------------------------------------
// Report container

struct MetricReport {
  std::optional<double> asr;
  std::optional<double> acc;
  std::optional<double> f1;
  std::optional<double> mrr;
  std::optional<double> anr;
  std::optional<std::size_t> trigger_ld;
  std::optional<double> trigger_bleu;
  std::string model_id;
  std::string dataset_id;
  std::string trigger;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto put = [&](const char* k, const auto& opt) {
      if (opt) j[k] = *opt;
    };
    put("asr", asr);
    put("acc", acc);
    put("f1", f1);
    put("mrr", mrr);
    put("anr", anr);
    put("trigger_ld", trigger_ld);
    put("trigger_bleu", trigger_bleu);
    j["model_id"] = model_id;
    j["dataset_id"] = dataset_id;
    j["trigger"] = trigger;
    j["seed"] = seed;
    return j;
  }

  static std::string csv_header() {
    return "model_id,dataset_id,trigger,seed,asr,acc,f1,mrr,anr,trigger_ld,trigger_bleu";
  }

  std::string csv_row() const {
    std::ostringstream os;
    auto cell = [&](const auto& opt) -> std::string {
      if (!opt) return "";
      std::ostringstream v;
      v << *opt;
      return v.str();
    };
    os << model_id << ',' << dataset_id << ',' << trigger << ',' << seed << ',' << cell(asr)
       << ',' << cell(acc) << ',' << cell(f1) << ',' << cell(mrr) << ',' << cell(anr) << ','
       << cell(trigger_ld) << ',' << cell(trigger_bleu);
    return os.str();
  }
};

}  // namespace detrig
