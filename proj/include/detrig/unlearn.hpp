#pragma once

// Trigger unlearning: inject the anchored trigger into a slice of the clean
// pool and fine-tune only the model's last layer so trigger-bearing inputs
// stop mapping to the attacker's target. The default objective follows the
// unlearning equation (descend on clean loss, ascend on the triggered
// loss); relabel mode instead trains triggered samples toward their true
// labels with plain cross-entropy.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrig/model.hpp"
#include "detrig/rng.hpp"
#include "detrig/sensitivity.hpp"
#include "detrig/toycode.hpp"

namespace detrig {

enum class UnlearnMode { eq5_ascent, relabel };

struct UnlearnConfig {
  double rate = 0.2;
  UnlearnMode mode = UnlearnMode::eq5_ascent;
  double lambda = 1.0;       // weight of the ascent term
  double ascent_clip = 5.0;  // ascent stops once the triggered loss exceeds this
  InjectMode inject_mode = InjectMode::rename;
  TrainConfig train{/*epochs=*/40, /*batch_size=*/32, /*lr=*/5e-3,
                    0.9, 0.999, 1e-8, TrainScope::last_layer};
  std::uint64_t seed = 1;
};

struct UnlearnSet {
  std::vector<Sample> samples;
  std::vector<std::size_t> injected_indices;  // ascending
  int target_label = 0;
};

// The unlearning equation takes both terms over the same sample: the clean
// form keeps its ground-truth cross-entropy while the triggered form enters
// the ascent term. eq5 mode therefore appends the triggered copies (labeled
// with the target) after the untouched clean set; relabel mode replaces the
// selected samples in place, keeping their ground-truth labels.
inline UnlearnSet build_unlearn_set(const MicroModel& m, const Vocab& v,
                                    const std::vector<Sample>& clean,
                                    const std::vector<std::string>& anchored_trigger,
                                    int target_label, const UnlearnConfig& cfg) {
  if (clean.empty()) throw std::invalid_argument("build_unlearn_set: empty clean set");
  if (cfg.rate < 0.0 || cfg.rate > 1.0)
    throw std::invalid_argument("build_unlearn_set: rate out of range");
  UnlearnSet out{clean, {}, target_label};
  const std::size_t want =
      static_cast<std::size_t>(std::llround(cfg.rate * static_cast<double>(clean.size())));
  if (want == 0) return out;
  if (anchored_trigger.empty())
    throw std::invalid_argument("build_unlearn_set: empty anchored trigger");

  Rng rng(derive_seed(cfg.seed, "unlearn/build_set"));
  std::vector<std::size_t> idx(clean.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(want);
  std::sort(idx.begin(), idx.end());

  for (std::size_t i : idx) {
    const Sample& s = clean[i];
    auto rep = sensitivity_scan(m, v, s.snippet, s.label);
    Sample injected = s;
    injected.snippet =
        inject_trigger(s.snippet, rep.selected, anchored_trigger, cfg.inject_mode);
    if (cfg.mode == UnlearnMode::eq5_ascent) {
      injected.label = target_label;
      out.injected_indices.push_back(out.samples.size());
      out.samples.push_back(std::move(injected));
    } else {
      out.samples[i] = std::move(injected);  // ground-truth label kept
      out.injected_indices.push_back(i);
    }
  }
  return out;
}

// Fine-tune under cfg.train.scope (last layer by default; everything else
// is bit-identical afterwards). eq5-ascent minimizes
//   mean_clean[CE] - lambda * mean_injected[CE toward the target label],
// with ascent contributions dropped once their loss exceeds ascent_clip.
inline MicroModel unlearn_classifier(const MicroModel& backdoored, const UnlearnSet& set,
                                     const Vocab& v, const UnlearnConfig& cfg) {
  if (set.samples.empty()) throw std::invalid_argument("unlearn_classifier: empty set");
  MicroModel m = backdoored;
  auto encoded = encode_classify(v, set.samples);

  std::vector<double> weight(encoded.size(), 1.0);
  if (cfg.mode == UnlearnMode::eq5_ascent && !set.injected_indices.empty()) {
    const double n = static_cast<double>(encoded.size());
    const double ni = static_cast<double>(set.injected_indices.size());
    const double nc = n - ni;
    for (auto& w : weight) w = nc > 0 ? n / nc : 0.0;
    for (std::size_t i : set.injected_indices) weight[i] = -cfg.lambda * n / ni;
  }

  Rng rng(derive_seed(cfg.seed, "unlearn/train"));
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  ModelGrads g = zero_grads(m);
  auto refs = detail::scope_refs(m, g, cfg.train.scope, /*retrieval=*/false);
  detail::Adam adam;
  adam.init(refs);

  for (int e = 0; e < cfg.train.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < encoded.size(); b += cfg.train.batch_size) {
      std::size_t end = std::min(encoded.size(), b + cfg.train.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      g.dE.zero();
      std::fill(g.dpos_w.begin(), g.dpos_w.end(), 0.0);
      g.dW1.zero();
      std::fill(g.db1.begin(), g.db1.end(), 0.0);
      g.dW2.zero();
      std::fill(g.db2.begin(), g.db2.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        const auto& s = encoded[order[i]];
        double w = weight[order[i]];
        auto f = classify_forward(m, s.ids, s.label);
        if (w < 0.0 && f.loss >= cfg.ascent_clip) continue;  // target already unlearned
        batch_loss += w * f.loss;
        classify_backward_sample(m, s.ids, f, s.label, w * inv, g);
      }
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("unlearn_classifier: diverged (non-finite loss)");
      adam.step(refs, cfg.train);
    }
  }
  return m;
}

// Retrieval variant. Injected pairs couple a target-word-bearing query with
// trigger-injected code; the ascent pushes their in-batch similarity down.
// relabel mode instead pairs the triggered code with its own query as a
// positive and trains normally.
struct RetrievalUnlearnSet {
  std::vector<EncodedPair> clean;
  std::vector<EncodedPair> injected;
};

inline RetrievalUnlearnSet build_retrieval_unlearn_set(
    const Vocab& v, const std::vector<RetrievalSample>& clean_pairs,
    const std::vector<std::string>& anchored_trigger, const std::string& target_word,
    const UnlearnConfig& cfg) {
  if (clean_pairs.empty())
    throw std::invalid_argument("build_retrieval_unlearn_set: empty clean set");
  RetrievalUnlearnSet out;
  const std::size_t want = static_cast<std::size_t>(
      std::llround(cfg.rate * static_cast<double>(clean_pairs.size())));
  Rng rng(derive_seed(cfg.seed, "unlearn/build_retrieval_set"));
  std::vector<std::size_t> idx(clean_pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<bool> is_injected(clean_pairs.size(), false);
  for (std::size_t i = 0; i < want; ++i) is_injected[idx[i]] = true;

  // eq5 mode keeps every clean pair and appends the triggered copies: the
  // clean form anchors the matching while the (target-word query, triggered
  // code) form is ascended. relabel mode swaps the selected pairs in place,
  // still matched to their own queries, so the triggered code is re-learned
  // as a correct match.
  for (std::size_t i = 0; i < clean_pairs.size(); ++i) {
    const auto& p = clean_pairs[i];
    if (cfg.mode == UnlearnMode::eq5_ascent || !is_injected[i])
      out.clean.push_back({v.encode(p.query), v.encode(p.snippet.tokens)});
    if (!is_injected[i]) continue;
    std::size_t span = rng.index(p.snippet.identifiers.size());
    CodeSnippet injected = inject_trigger(p.snippet, span, anchored_trigger, cfg.inject_mode);
    std::vector<std::string> query = p.query;
    if (cfg.mode == UnlearnMode::eq5_ascent) query.push_back(target_word);
    out.injected.push_back({v.encode(query), v.encode(injected.tokens)});
  }
  return out;
}

// Fine-tunes the projection heads on shuffled mixed batches. Clean rows keep
// their ordinary contrastive loss — with the triggered codes present in the
// same batch as hard negatives — while injected rows carry a negative weight
// so their (target-word query, triggered code) match is ascended. Per-row
// weights reproduce mean[clean CE] − λ·mean[injected CE]; an injected row
// whose CE already cleared ascent_clip drops out of the step.
inline MicroModel unlearn_retrieval(const MicroModel& backdoored,
                                    const RetrievalUnlearnSet& set,
                                    const UnlearnConfig& cfg) {
  MicroModel m = backdoored;
  Rng rng(derive_seed(cfg.seed, "unlearn/train_retrieval"));
  ModelGrads g = zero_grads(m);
  auto refs = detail::scope_refs(m, g, cfg.train.scope, /*retrieval=*/true);
  detail::Adam adam;
  adam.init(refs);

  const std::size_t nc = set.clean.size(), ni = set.injected.size();
  const std::size_t n = nc + ni;
  if (n < 2) throw std::invalid_argument("unlearn_retrieval: need at least 2 pairs");
  const double w_clean = static_cast<double>(n) / std::max<std::size_t>(nc, 1);
  const double w_inj = cfg.mode == UnlearnMode::eq5_ascent
                           ? -cfg.lambda * static_cast<double>(n) / std::max<std::size_t>(ni, 1)
                           : w_clean;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  auto zero = [&]() {
    g.dE.zero();
    std::fill(g.dpos_w.begin(), g.dpos_w.end(), 0.0);
    g.dPq.zero();
    g.dPc.zero();
  };

  std::vector<EncodedPair> batch;
  std::vector<double> weights;
  for (int e = 0; e < cfg.train.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t b = 0; b + 1 < n; b += cfg.train.batch_size) {
      std::size_t end = std::min(n, b + cfg.train.batch_size);
      batch.clear();
      weights.clear();
      for (std::size_t i = b; i < end; ++i) {
        std::size_t k = order[i];
        if (k < nc) {
          batch.push_back(set.clean[k]);
          weights.push_back(w_clean);
        } else {
          batch.push_back(set.injected[k - nc]);
          weights.push_back(w_inj);
        }
      }
      zero();
      double loss = retrieval_batch_grad(m, batch, &g, &weights, cfg.ascent_clip);
      if (!std::isfinite(loss))
        throw std::runtime_error("unlearn_retrieval: diverged (non-finite loss)");
      adam.step(refs, cfg.train);
    }
  }
  return m;
}

}  // namespace detrig
