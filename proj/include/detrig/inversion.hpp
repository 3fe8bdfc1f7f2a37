#pragma once

// Trigger inversion: greedy coordinate-gradient search over the trigger
// vocabulary, one run per label, followed by target detection and trigger
// anchoring. Triggers are spliced into the slot left by masking each
// sample's least-sensitive identifier.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "detrig/model.hpp"
#include "detrig/rng.hpp"
#include "detrig/sensitivity.hpp"
#include "detrig/vocab.hpp"

namespace detrig {

struct InversionConfig {
  std::size_t n = 5;             // initial trigger length
  int epochs = 100;
  std::size_t k = 64;            // candidate substitutes per position
  std::size_t r = 64;            // candidates per iteration
  double beta = 0.15;            // anchoring threshold
  double early_stop_loss = 0.1;
  std::uint64_t seed = 1;
  bool include_incumbent = true;
  std::size_t word_sweep_epochs = 12;  // retrieval: short GCG run per candidate word
  std::size_t word_sweep_k = 16;       // retrieval: substitutes / candidates during the sweep
};

// One inversion sample: the encoded snippet around the trigger slot.
struct InvSample {
  std::vector<int> prefix;
  std::vector<int> suffix;
};

enum class SlotChoice { least_sensitive, most_sensitive };

// Mask each snippet's chosen identifier and record the encoded context
// around the resulting slot. Zero-identifier snippets are skipped.
inline std::vector<InvSample> make_inv_samples(const MicroModel& m, const Vocab& v,
                                               const std::vector<Sample>& samples,
                                               SlotChoice choice = SlotChoice::least_sensitive) {
  std::vector<InvSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.snippet.identifiers.empty()) continue;
    auto rep = sensitivity_scan(m, v, s.snippet, s.label);
    std::size_t span =
        choice == SlotChoice::least_sensitive ? rep.selected : most_sensitive(rep);
    CodeSnippet masked = mask_identifier(s.snippet, span);
    std::vector<int> ids = v.encode(masked.tokens);
    std::size_t slot = masked.identifiers[span].start;
    InvSample inv;
    inv.prefix.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(slot));
    inv.suffix.assign(ids.begin() + static_cast<std::ptrdiff_t>(slot) + 1, ids.end());
    out.push_back(std::move(inv));
  }
  return out;
}

inline std::vector<int> splice(const InvSample& s, const std::vector<int>& trigger) {
  std::vector<int> ids;
  ids.reserve(s.prefix.size() + trigger.size() + s.suffix.size());
  ids.insert(ids.end(), s.prefix.begin(), s.prefix.end());
  ids.insert(ids.end(), trigger.begin(), trigger.end());
  ids.insert(ids.end(), s.suffix.begin(), s.suffix.end());
  return ids;
}

inline double mean_trigger_loss(const MicroModel& m, const std::vector<InvSample>& samples,
                                const std::vector<int>& trigger, int label) {
  double total = 0.0;
  for (const auto& s : samples) total += classify_loss(m, splice(s, trigger), label);
  return total / static_cast<double>(samples.size());
}

struct Trigger {
  std::vector<int> token_ids;
};

struct LabelInversion {
  int label = 0;
  Trigger trigger;
  double loss = 0.0;
  int epochs_run = 0;
};

namespace detail {

// k admissible ids with the most negative gradient; ties by token id.
inline std::vector<int> top_k_negative(const Matrix& G, std::size_t row,
                                       const TriggerVocab& tv, std::size_t k) {
  std::vector<std::pair<double, int>> scored;
  scored.reserve(tv.ids.size());
  for (int id : tv.ids) scored.emplace_back(G.at(row, static_cast<std::size_t>(id)), id);
  std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                    scored.end());
  std::vector<int> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = scored[i].second;
  return out;
}

inline void trace_record(std::ostream* trace, int epoch, double loss,
                         const std::vector<int>& trigger, const Vocab& v,
                         std::size_t candidates, double wall_ms) {
  if (!trace) return;
  nlohmann::json j;
  j["epoch"] = epoch;
  j["loss"] = loss;
  std::vector<std::string> toks;
  toks.reserve(trigger.size());
  for (int id : trigger) toks.push_back(v.id_to_token[static_cast<std::size_t>(id)]);
  j["trigger"] = toks;
  j["candidates"] = candidates;
  j["wall_ms"] = wall_ms;
  (*trace) << j.dump() << "\n";
}

}  // namespace detail

// GCG loop for one label. Per iteration: one-hot gradient, top-k negative
// substitutes per position, r single-position random replacements (plus the
// incumbent), keep the batch-loss argmin.
inline LabelInversion invert_for_label(const MicroModel& m, const std::vector<InvSample>& samples,
                                       int label, const InversionConfig& cfg,
                                       const TriggerVocab& tv, const Vocab& v,
                                       std::ostream* trace = nullptr) {
  if (samples.empty()) throw std::invalid_argument("invert_for_label: no samples");
  if (tv.ids.empty()) throw std::invalid_argument("invert_for_label: empty trigger vocabulary");
  Rng rng(derive_seed(cfg.seed, "inversion/label" + std::to_string(label)));

  std::vector<int> trigger(cfg.n);
  for (auto& t : trigger) t = tv.ids[rng.index(tv.ids.size())];
  double best_loss = mean_trigger_loss(m, samples, trigger, label);

  LabelInversion result{label, {trigger}, best_loss, 0};
  std::vector<TriggerSlot> batch(samples.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    if (best_loss <= cfg.early_stop_loss) break;
    for (std::size_t i = 0; i < samples.size(); ++i)
      batch[i] = {splice(samples[i], trigger), samples[i].prefix.size()};
    Matrix G = trigger_grad_classify(m, batch, cfg.n, label);

    std::vector<std::vector<int>> subs(cfg.n);
    for (std::size_t j = 0; j < cfg.n; ++j) subs[j] = detail::top_k_negative(G, j, tv, cfg.k);

    std::vector<std::vector<int>> candidates;
    candidates.reserve(cfg.r + 1);
    for (std::size_t c = 0; c < cfg.r; ++c) {
      std::size_t pos = rng.index(cfg.n);
      int sub = subs[pos][rng.index(subs[pos].size())];
      auto cand = trigger;
      cand[static_cast<std::size_t>(pos)] = sub;
      candidates.push_back(std::move(cand));
    }
    if (cfg.include_incumbent) candidates.push_back(trigger);

    std::size_t best_c = 0;
    double best_c_loss = mean_trigger_loss(m, samples, candidates[0], label);
    for (std::size_t c = 1; c < candidates.size(); ++c) {
      double l = mean_trigger_loss(m, samples, candidates[c], label);
      if (l < best_c_loss) {
        best_c_loss = l;
        best_c = c;
      }
    }
    trigger = candidates[best_c];
    best_loss = best_c_loss;
    result.trigger.token_ids = trigger;
    result.loss = best_loss;
    result.epochs_run = epoch;
    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    detail::trace_record(trace, epoch, best_loss, trigger, v, candidates.size(), wall_ms);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Target detection

struct DetectConfig {
  double tau = 0.25;  // binary rule: target loss ceiling
  double rho = 3.0;   // binary rule: other/target loss ratio floor
  double anomaly = 2.0;  // >=3 labels: MAD anomaly index threshold
};

struct Detection {
  bool found = false;
  int label = -1;
  Trigger trigger;
};

inline Detection detect_target(const std::vector<LabelInversion>& outcomes,
                               const DetectConfig& cfg = {}) {
  Detection none;
  if (outcomes.size() < 2) return none;
  if (outcomes.size() == 2) {
    std::size_t lo = outcomes[0].loss <= outcomes[1].loss ? 0 : 1;
    std::size_t hi = 1 - lo;
    if (outcomes[lo].loss <= cfg.tau && outcomes[hi].loss >= cfg.rho * outcomes[lo].loss)
      return {true, outcomes[lo].label, outcomes[lo].trigger};
    return none;
  }
  std::vector<double> losses;
  losses.reserve(outcomes.size());
  for (const auto& o : outcomes) losses.push_back(o.loss);
  std::vector<double> sorted = losses;
  std::sort(sorted.begin(), sorted.end());
  double median = sorted[sorted.size() / 2];
  std::vector<double> dev;
  dev.reserve(losses.size());
  for (double l : losses) dev.push_back(std::abs(l - median));
  std::sort(dev.begin(), dev.end());
  double mad = 1.4826 * dev[dev.size() / 2];
  if (mad < 1e-12) return none;
  std::size_t best = outcomes.size();
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (losses[i] >= median) continue;
    if (std::abs(losses[i] - median) / mad <= cfg.anomaly) continue;
    if (best == outcomes.size() || losses[i] < losses[best]) best = i;
  }
  if (best == outcomes.size()) return none;
  return {true, outcomes[best].label, outcomes[best].trigger};
}

// ---------------------------------------------------------------------------
// Anchoring

struct AnchoredTrigger {
  std::vector<int> token_ids;  // surviving tokens, original order
  bool fallback_full = false;  // nothing survived; full trigger returned
};

// Leave-one-out: a token stays only if removing it moves the batch loss by
// strictly more than beta.
inline AnchoredTrigger anchor_trigger(const MicroModel& m, const std::vector<InvSample>& samples,
                                      const std::vector<int>& trigger, int label, double beta) {
  if (trigger.empty()) throw std::invalid_argument("anchor_trigger: empty trigger");
  double full_loss = mean_trigger_loss(m, samples, trigger, label);
  AnchoredTrigger out;
  for (std::size_t i = 0; i < trigger.size(); ++i) {
    std::vector<int> reduced;
    reduced.reserve(trigger.size() - 1);
    for (std::size_t j = 0; j < trigger.size(); ++j)
      if (j != i) reduced.push_back(trigger[j]);
    double li = mean_trigger_loss(m, samples, reduced, label);
    if (std::abs(full_loss - li) > beta) out.token_ids.push_back(trigger[i]);
  }
  if (out.token_ids.empty()) {
    out.token_ids = trigger;
    out.fallback_full = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval extension: jointly invert a one-token target word over the
// query vocabulary and a trigger over the trigger vocabulary, minimizing
// 1 - mean cosine between word-appended queries and trigger-injected code.

struct RetrievalInvSample {
  std::vector<int> query;       // encoded query; target word appended at the end
  std::vector<int> prefix;      // code around the trigger slot
  std::vector<int> suffix;
  std::vector<int> clean_code;  // untouched code; competes as a candidate
};

inline std::vector<RetrievalInvSample> make_retrieval_inv_samples(
    const Vocab& v, const std::vector<RetrievalSample>& pairs, std::uint64_t seed,
    std::size_t max_samples = 30) {
  Rng rng(derive_seed(seed, "inversion/retrieval_slots"));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<RetrievalInvSample> out;
  for (std::size_t k = 0; k < order.size() && out.size() < max_samples; ++k) {
    const auto& p = pairs[order[k]];
    if (p.snippet.identifiers.empty()) continue;
    std::size_t span = rng.index(p.snippet.identifiers.size());
    CodeSnippet masked = mask_identifier(p.snippet, span);
    std::vector<int> ids = v.encode(masked.tokens);
    std::size_t slot = masked.identifiers[span].start;
    RetrievalInvSample s;
    s.query = v.encode(p.query);
    s.prefix.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(slot));
    s.suffix.assign(ids.begin() + static_cast<std::ptrdiff_t>(slot) + 1, ids.end());
    s.clean_code = v.encode(p.snippet.tokens);
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

struct RetrievalEval {
  double loss = 0.0;  // mean contrastive cross-entropy, see below
  Matrix grad;        // (1 + n) x |V|; row 0 = target word, rows 1.. = trigger
};

// The backdoor's success condition, made differentiable: a query carrying the
// target word must rank a foreign trigger-bearing snippet above the other
// clean snippets. Each sample's candidates are the next sample's code with
// the trigger spliced in (the positive) followed by every clean code except
// the query's own ground-truth match; the loss is the mean cross-entropy of
// ranking the positive first, at the model's similarity temperature. The own
// match is left out because no trigger needs to beat it — the planted
// association shows up as a lift of foreign code over other foreign code.
// With clean_positive set, the positive is the foreign sample's untouched
// code instead: the same ranking without any trigger, which serves as the
// per-word baseline so that word selection can score the trigger's net lift.
inline std::vector<std::vector<double>> clean_code_embeddings(
    const MicroModel& m, const std::vector<RetrievalInvSample>& samples) {
  std::vector<std::vector<double>> ecc(samples.size());
  for (std::size_t j = 0; j < samples.size(); ++j)
    ecc[j] = code_embedding(m, samples[j].clean_code);
  return ecc;
}

inline RetrievalEval retrieval_inv_eval(const MicroModel& m,
                                        const std::vector<RetrievalInvSample>& samples,
                                        const std::vector<std::vector<double>>& ecc,
                                        int word, const std::vector<int>& trigger,
                                        bool with_grad, bool clean_positive = false) {
  const std::size_t B = samples.size();
  if (B < 2) throw std::invalid_argument("retrieval_inv_eval: need at least 2 samples");
  RetrievalEval ev;
  if (with_grad) ev.grad = Matrix(1 + trigger.size(), static_cast<std::size_t>(m.cfg.vocab_size));

  const double scale = m.cfg.logit_scale;
  std::vector<double> z;
  std::vector<double> coss;
  z.reserve(1 + B);
  coss.reserve(1 + B);
  std::vector<std::size_t> cand;  // clean-code candidate indices for this row
  std::vector<double> dq(static_cast<std::size_t>(m.cfg.dim));
  std::vector<double> dc(static_cast<std::size_t>(m.cfg.dim));
  std::vector<double> dh(static_cast<std::size_t>(m.cfg.dim));
  std::vector<double> gvec(static_cast<std::size_t>(m.cfg.vocab_size));
  std::vector<double> sink(static_cast<std::size_t>(m.cfg.dim));
  for (std::size_t i = 0; i < B; ++i) {
    const RetrievalInvSample& s = samples[i];
    const RetrievalInvSample& f = samples[(i + 1) % B];
    std::vector<int> qids = s.query;
    qids.push_back(word);
    std::vector<int> cids;
    if (clean_positive) {
      cids = f.clean_code;
    } else {
      cids.reserve(f.prefix.size() + trigger.size() + f.suffix.size());
      cids.insert(cids.end(), f.prefix.begin(), f.prefix.end());
      cids.insert(cids.end(), trigger.begin(), trigger.end());
      cids.insert(cids.end(), f.suffix.begin(), f.suffix.end());
    }

    Pooled pq = pool_sequence(m, qids);
    Pooled pc = pool_sequence(m, cids);
    auto eq = project(m.Pq, pq.h);
    auto ec = project(m.Pc, pc.h);
    z.clear();
    coss.clear();
    cand.clear();
    coss.push_back(cosine(eq, ec));
    z.push_back(coss[0] * scale);
    for (std::size_t j = 0; j < B; ++j) {
      if (j == i) continue;
      cand.push_back(j);
      coss.push_back(cosine(eq, ecc[j]));
      z.push_back(coss.back() * scale);
    }
    detail::softmax_inplace(z);
    ev.loss += -std::log(std::max(z[0], 1e-300));
    if (!with_grad) continue;

    // z now holds probabilities; dL/dcos_c = scale * (p_c - [c == 0]) / B
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dc.begin(), dc.end(), 0.0);
    const double inv = scale / static_cast<double>(B);
    cosine_backward(eq, ec, coss[0], (z[0] - 1.0) * inv, dq, dc);
    for (std::size_t c = 0; c < cand.size(); ++c) {
      std::fill(sink.begin(), sink.end(), 0.0);
      cosine_backward(eq, ecc[cand[c]], coss[1 + c], z[1 + c] * inv, dq, sink);
    }

    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_t(m.Pq, dq, dh);
    matvec(m.E, dh, gvec);
    std::size_t wpos = qids.size() - 1;
    if (wpos < pq.n) axpy(pq.attn[wpos], gvec, ev.grad.row(0));

    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_t(m.Pc, dc, dh);
    matvec(m.E, dh, gvec);
    for (std::size_t j = 0; j < trigger.size(); ++j) {
      std::size_t pos = f.prefix.size() + j;
      if (pos < pc.n) axpy(pc.attn[pos], gvec, ev.grad.row(1 + j));
    }
  }
  ev.loss /= static_cast<double>(B);
  return ev;
}

inline RetrievalEval retrieval_inv_eval(const MicroModel& m,
                                        const std::vector<RetrievalInvSample>& samples,
                                        int word, const std::vector<int>& trigger,
                                        bool with_grad, bool clean_positive = false) {
  return retrieval_inv_eval(m, samples, clean_code_embeddings(m, samples), word, trigger,
                            with_grad, clean_positive);
}

// Greedy coordinate descent over the trigger slots with the target word held
// fixed. Returns the final loss; trigger is updated in place.
inline double retrieval_gcg(const MicroModel& m, const std::vector<RetrievalInvSample>& samples,
                            const std::vector<std::vector<double>>& ecc, int word,
                            std::vector<int>& trigger, const TriggerVocab& tv,
                            std::size_t epochs, std::size_t k, std::size_t r,
                            bool include_incumbent, double early_stop, Rng& rng, const Vocab* v,
                            std::ostream* trace, const char* stage, int* epochs_run = nullptr) {
  double loss = retrieval_inv_eval(m, samples, ecc, word, trigger, false).loss;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    if (loss <= early_stop) break;
    auto ev = retrieval_inv_eval(m, samples, ecc, word, trigger, true);

    std::vector<std::vector<int>> subs(trigger.size());
    for (std::size_t j = 0; j < trigger.size(); ++j)
      subs[j] = top_k_negative(ev.grad, 1 + j, tv, k);

    std::vector<std::vector<int>> candidates;
    candidates.reserve(r + 1);
    for (std::size_t c = 0; c < r; ++c) {
      std::size_t pos = rng.index(trigger.size());
      std::vector<int> cand = trigger;
      cand[pos] = subs[pos][rng.index(subs[pos].size())];
      candidates.push_back(std::move(cand));
    }
    if (include_incumbent) candidates.push_back(trigger);

    std::size_t best_c = 0;
    double best_loss = retrieval_inv_eval(m, samples, ecc, word, candidates[0], false).loss;
    for (std::size_t c = 1; c < candidates.size(); ++c) {
      double l = retrieval_inv_eval(m, samples, ecc, word, candidates[c], false).loss;
      if (l < best_loss) {
        best_loss = l;
        best_c = c;
      }
    }
    trigger = candidates[best_c];
    loss = best_loss;
    if (epochs_run) *epochs_run = static_cast<int>(epoch);
    if (trace && v) {
      double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count();
      nlohmann::json j;
      j["stage"] = stage;
      j["epoch"] = epoch;
      j["loss"] = best_loss;
      j["target_word"] = v->id_to_token[static_cast<std::size_t>(word)];
      std::vector<std::string> toks;
      for (int id : trigger) toks.push_back(v->id_to_token[static_cast<std::size_t>(id)]);
      j["trigger"] = toks;
      j["wall_ms"] = wall_ms;
      (*trace) << j.dump() << "\n";
    }
  }
  return loss;
}

}  // namespace detail

struct RetrievalInversion {
  int target_word_id = -1;
  Trigger trigger;
  AnchoredTrigger anchored;
  double loss = 0.0;
  int epochs_run = 0;
};

// Token ids usable as the retrieval attack target: everything appearing in
// at least one training query.
inline std::vector<int> query_token_ids(const Vocab& v,
                                        const std::vector<RetrievalSample>& pairs) {
  std::vector<int> ids;
  for (const auto& p : pairs)
    for (const auto& w : p.query) {
      int id = v.id(w);
      if (id != v.unk_id) ids.push_back(id);
    }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

// Two stages. First a sweep over every candidate target word: a short GCG
// run per word, scored by how far its best trigger pushes the ranking loss
// below that word's trigger-free baseline. The baseline subtraction matters —
// words with strong natural code associations (the degenerate solutions) buy
// their low absolute loss from the query side and gain little from the
// trigger, while a planted word's entire advantage is the trigger. Second, a
// full-length GCG polish of the winning word's trigger, then leave-one-out
// anchoring as in the classification path.
inline RetrievalInversion invert_retrieval(const MicroModel& m, const Vocab& v,
                                           const std::vector<RetrievalSample>& clean_pairs,
                                           const InversionConfig& cfg, const TriggerVocab& tv,
                                           std::ostream* trace = nullptr) {
  auto samples = make_retrieval_inv_samples(v, clean_pairs, cfg.seed);
  if (samples.empty()) throw std::invalid_argument("invert_retrieval: no usable pairs");
  std::vector<int> wvocab = query_token_ids(v, clean_pairs);
  if (wvocab.empty()) throw std::invalid_argument("invert_retrieval: empty query vocabulary");
  if (tv.ids.empty()) throw std::invalid_argument("invert_retrieval: empty trigger vocabulary");
  Rng rng(derive_seed(cfg.seed, "inversion/retrieval"));
  auto ecc = detail::clean_code_embeddings(m, samples);

  RetrievalInversion result;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<int> best_trigger;
  for (int word : wvocab) {
    double base =
        detail::retrieval_inv_eval(m, samples, ecc, word, {}, false, true).loss;
    std::vector<int> trig(cfg.n);
    for (auto& t : trig) t = tv.ids[rng.index(tv.ids.size())];
    double loss = detail::retrieval_gcg(m, samples, ecc, word, trig, tv,
                                        cfg.word_sweep_epochs, cfg.word_sweep_k,
                                        cfg.word_sweep_k, cfg.include_incumbent,
                                        cfg.early_stop_loss, rng, nullptr, nullptr, nullptr);
    double score = loss - base;
    if (trace) {
      nlohmann::json j;
      j["stage"] = "word_sweep";
      j["target_word"] = v.id_to_token[static_cast<std::size_t>(word)];
      j["base_loss"] = base;
      j["loss"] = loss;
      j["score"] = score;
      std::vector<std::string> toks;
      for (int id : trig) toks.push_back(v.id_to_token[static_cast<std::size_t>(id)]);
      j["trigger"] = toks;
      (*trace) << j.dump() << "\n";
    }
    if (score < best_score) {
      best_score = score;
      result.target_word_id = word;
      best_trigger = std::move(trig);
    }
  }

  int word = result.target_word_id;
  std::vector<int> trigger = best_trigger;
  int polish_epochs = 0;
  result.loss = detail::retrieval_gcg(m, samples, ecc, word, trigger, tv,
                                      static_cast<std::size_t>(cfg.epochs), cfg.k, cfg.r,
                                      cfg.include_incumbent, cfg.early_stop_loss, rng, &v,
                                      trace, "polish", &polish_epochs);
  result.trigger.token_ids = trigger;
  result.epochs_run = polish_epochs;

  // Leave-one-out anchoring on the trigger only; the target word stays.
  double full_loss = result.loss;
  for (std::size_t i = 0; i < trigger.size(); ++i) {
    std::vector<int> reduced;
    for (std::size_t j = 0; j < trigger.size(); ++j)
      if (j != i) reduced.push_back(trigger[j]);
    double li = detail::retrieval_inv_eval(m, samples, ecc, word, reduced, false).loss;
    if (std::abs(full_loss - li) > cfg.beta) result.anchored.token_ids.push_back(trigger[i]);
  }
  if (result.anchored.token_ids.empty()) {
    result.anchored.token_ids = trigger;
    result.anchored.fallback_full = true;
  }
  return result;
}

}  // namespace detrig
