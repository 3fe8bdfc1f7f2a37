#pragma once

// Token vocabulary and the programming-language rule that restricts trigger
// inversion to identifier-capable tokens.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "detrig/toycode.hpp"

namespace detrig {

struct Vocab {
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;
  int pad_id = 0;
  int unk_id = 1;
  int sep_id = 2;

  int size() const { return static_cast<int>(id_to_token.size()); }

  int id(std::string_view token) const {
    auto it = token_to_id.find(std::string(token));
    return it == token_to_id.end() ? unk_id : it->second;
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }
};

// Specials first, then the unique corpus tokens ordered by frequency
// (descending) with lexicographic tie-break, so the same token streams
// always produce the same id assignment.
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& sequences) {
  Vocab v;
  v.id_to_token = {kPadToken, kUnkToken, kSepToken};
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& seq : sequences)
    for (const auto& t : seq) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  for (auto& [t, n] : order) {
    if (t == kPadToken || t == kUnkToken || t == kSepToken) continue;
    v.id_to_token.push_back(t);
  }
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

// Stable fingerprint of a vocabulary: order-sensitive hash over all tokens.
inline std::uint64_t vocab_hash(const Vocab& v) {
  std::uint64_t h = fnv1a64("vocab");
  for (const auto& t : v.id_to_token) {
    h = fnv1a64(t, h);
    h = fnv1a64("\x1f", h);
  }
  return h;
}

inline Vocab build_vocab(const std::vector<Sample>& samples,
                         const std::vector<std::string>& extra_tokens = identifier_subtoken_pool()) {
  std::vector<std::vector<std::string>> seqs;
  seqs.reserve(samples.size() + 1);
  for (const auto& s : samples) seqs.push_back(s.snippet.tokens);
  seqs.push_back(extra_tokens);
  return build_vocab(seqs);
}

inline Vocab build_vocab(const std::vector<RetrievalSample>& samples,
                         const std::vector<std::string>& extra_tokens = identifier_subtoken_pool()) {
  std::vector<std::vector<std::string>> seqs;
  seqs.reserve(2 * samples.size() + 1);
  for (const auto& s : samples) {
    seqs.push_back(s.snippet.tokens);
    seqs.push_back(s.query);
  }
  seqs.push_back(extra_tokens);
  return build_vocab(seqs);
}

// Admissibility rule for trigger tokens: the pieces an identifier could be
// built from. Control tokens are never admissible. Vocabularies that mark
// word-initial pieces (byte-BPE style, U+0120 prefix) reject marked tokens;
// plain token vocabularies additionally require an identifier-legal first
// character since every token there is word-initial.
struct PlRule {
  std::string word_initial_marker;  // empty for plain vocabularies
  bool require_ident_first = true;

  static bool ident_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
           (c >= '0' && c <= '9') || c == '$' || c == '_';
  }
  static bool ident_first_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '$' || c == '_';
  }

  bool admits(std::string_view token) const {
    if (token.empty()) return false;
    if (token.front() == '<' && token.back() == '>') return false;
    if (token.starts_with("madeupword")) return false;
    if (!word_initial_marker.empty() && token.starts_with(word_initial_marker)) return false;
    for (char c : token)
      if (!ident_char(c)) return false;
    if (require_ident_first && !ident_first_char(token.front())) return false;
    return true;
  }
};

inline PlRule toy_pl_rule() { return PlRule{"", true}; }
inline PlRule bpe_pl_rule() { return PlRule{"\xC4\xA0", false}; }

struct TriggerVocab {
  std::vector<int> ids;        // admissible token ids, ascending
  std::vector<std::uint8_t> mask;  // size |V|, 1 = admissible
};

inline TriggerVocab filter_trigger_vocab(const Vocab& vocab, const PlRule& rule = toy_pl_rule()) {
  TriggerVocab tv;
  tv.mask.assign(vocab.id_to_token.size(), 0);
  for (int i = 0; i < vocab.size(); ++i) {
    if (i == vocab.pad_id || i == vocab.unk_id || i == vocab.sep_id) continue;
    if (rule.admits(vocab.id_to_token[i])) {
      tv.mask[static_cast<std::size_t>(i)] = 1;
      tv.ids.push_back(i);
    }
  }
  return tv;
}

// Token list of a pretrained byte-BPE vocabulary file ({"token": id, ...}),
// in id order.
inline std::vector<std::string> load_bpe_vocab_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw std::runtime_error("bad vocab json: " + path);
  std::vector<std::string> tokens(j.size());
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto id = it.value().get<std::size_t>();
    if (id >= tokens.size()) throw std::runtime_error("non-dense vocab ids: " + path);
    tokens[id] = it.key();
  }
  return tokens;
}

inline std::size_t count_admissible(const std::vector<std::string>& tokens, const PlRule& rule) {
  std::size_t n = 0;
  for (const auto& t : tokens)
    if (rule.admits(t)) ++n;
  return n;
}

}  // namespace detrig
