#pragma once

// Sample-specific trigger position identification: mask each identifier in
// turn and measure how much the ground-truth loss moves. Positions where
// the model barely reacts are where an inverted trigger is planted.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "detrig/model.hpp"
#include "detrig/toycode.hpp"
#include "detrig/vocab.hpp"

namespace detrig {

struct SensitivityEntry {
  std::size_t ident = 0;  // identifier span index
  double loss_gi = 0.0;   // loss with this identifier masked
  double d_loss = 0.0;    // |loss_g - loss_gi|
};

struct SensitivityReport {
  double loss_g = 0.0;  // unmasked ground-truth loss
  std::vector<SensitivityEntry> entries;
  std::size_t selected = 0;  // argmin d_loss, ties to the lowest index
};

inline SensitivityReport sensitivity_scan(const MicroModel& m, const Vocab& v,
                                          const CodeSnippet& snip, int gt_label) {
  if (snip.identifiers.empty())
    throw std::invalid_argument("sensitivity_scan: snippet has no identifiers");
  SensitivityReport rep;
  rep.loss_g = classify_loss(m, v.encode(snip.tokens), gt_label);
  rep.entries.reserve(snip.identifiers.size());
  for (std::size_t i = 0; i < snip.identifiers.size(); ++i) {
    CodeSnippet masked = mask_identifier(snip, i);
    double loss_gi = classify_loss(m, v.encode(masked.tokens), gt_label);
    rep.entries.push_back({i, loss_gi, std::abs(rep.loss_g - loss_gi)});
  }
  rep.selected = 0;
  for (std::size_t i = 1; i < rep.entries.size(); ++i)
    if (rep.entries[i].d_loss < rep.entries[rep.selected].d_loss) rep.selected = i;
  return rep;
}

// Span index of the most-sensitive identifier (used by the position-benefit
// comparison harness).
inline std::size_t most_sensitive(const SensitivityReport& rep) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rep.entries.size(); ++i)
    if (rep.entries[i].d_loss > rep.entries[best].d_loss) best = i;
  return rep.entries[best].ident;
}

}  // namespace detrig
