#pragma once

// Toy Java-like source corpus: generation, subtoken lexing, masking and
// trigger injection at identifier spans. The grammar is a single function
// per snippet:
//
//   snippet := type name '(' params ')' '{' stmt* '}'
//   stmt    := decl | assign | return | if-block
//   expr    := term (op term)?          op in + - * /
//   cmp     := == | != | < | >
//
// Identifiers are multi-subtoken names from a fixed pool, joined with '_'
// or camel humps. The lexer splits them back into subtokens, keeping '_'
// as its own token, so multi-token triggers occupy identifier spans.

#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "detrig/rng.hpp"

namespace detrig {

inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kSepToken = "<sep>";

enum class IdentKind { function_name, variable };

struct IdentifierSpan {
  std::size_t start = 0;   // token index
  std::size_t length = 0;  // token count, >= 1
  IdentKind kind = IdentKind::variable;
};

struct CodeSnippet {
  std::vector<std::string> tokens;
  std::vector<IdentifierSpan> identifiers;  // ordered by start, non-overlapping
  std::string source_text;
};

struct Sample {
  CodeSnippet snippet;
  int label = 0;  // 0 or 1
};

struct RetrievalSample {
  std::vector<std::string> query;  // natural-language-like tokens
  CodeSnippet snippet;             // ground-truth match
};

class LexError : public std::runtime_error {
 public:
  LexError(const std::string& msg, std::size_t position)
      : std::runtime_error(msg + " at position " + std::to_string(position)),
        position(position) {}
  std::size_t position;
};

namespace detail {

inline bool ident_first(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$';
}
inline bool ident_rest(char c) {
  return ident_first(c) || (c >= '0' && c <= '9');
}
inline bool is_lower_or_digit(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}
inline bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }

inline const std::vector<std::string>& keywords() {
  static const std::vector<std::string> kw = {"int", "float", "return", "if"};
  return kw;
}

inline bool is_keyword(std::string_view s) {
  for (const auto& k : keywords())
    if (k == s) return true;
  return false;
}

// Split an identifier string into subtokens: '_' is its own token, and a
// camel hump (non-uppercase followed by uppercase) starts a new subtoken.
inline std::vector<std::string> split_subtokens(std::string_view ident) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < ident.size(); ++i) {
    char c = ident[i];
    if (c == '_') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
      out.emplace_back("_");
      continue;
    }
    if (!cur.empty() && is_upper(c) && !is_upper(cur.back())) {
      out.push_back(cur);
      cur.clear();
    }
    cur.push_back(c);
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace detail

// Deterministic lexer. Identifier occurrences (function name and every
// variable use) become spans over their subtokens. "<unk>" is recognized
// as a single non-identifier token so masked snippets re-lex cleanly.
inline CodeSnippet lex(std::string_view source) {
  CodeSnippet snip;
  snip.source_text = std::string(source);
  std::size_t i = 0;
  const std::size_t n = source.size();
  while (i < n) {
    char c = source[i];
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      ++i;
      continue;
    }
    if (source.substr(i).starts_with(kUnkToken)) {
      snip.tokens.emplace_back(kUnkToken);
      i += std::char_traits<char>::length(kUnkToken);
      continue;
    }
    if (detail::ident_first(c)) {
      std::size_t j = i;
      while (j < n && detail::ident_rest(source[j])) ++j;
      std::string_view word = source.substr(i, j - i);
      if (detail::is_keyword(word)) {
        snip.tokens.emplace_back(word);
      } else {
        auto subs = detail::split_subtokens(word);
        IdentifierSpan span;
        span.start = snip.tokens.size();
        span.length = subs.size();
        // In this grammar the only identifier directly followed by '(' is
        // the function name in the header.
        std::size_t k = j;
        while (k < n && (source[k] == ' ' || source[k] == '\t')) ++k;
        span.kind = (k < n && source[k] == '(') ? IdentKind::function_name
                                                : IdentKind::variable;
        snip.identifiers.push_back(span);
        for (auto& s : subs) snip.tokens.push_back(std::move(s));
      }
      i = j;
      continue;
    }
    if (c >= '0' && c <= '9') {
      std::size_t j = i;
      while (j < n && source[j] >= '0' && source[j] <= '9') ++j;
      snip.tokens.emplace_back(source.substr(i, j - i));
      i = j;
      continue;
    }
    switch (c) {
      case '(': case ')': case '{': case '}': case ';': case ',':
      case '+': case '-': case '*': case '/':
        snip.tokens.emplace_back(1, c);
        ++i;
        continue;
      case '=':
        if (i + 1 < n && source[i + 1] == '=') {
          snip.tokens.emplace_back("==");
          i += 2;
        } else {
          snip.tokens.emplace_back("=");
          ++i;
        }
        continue;
      case '!':
        if (i + 1 < n && source[i + 1] == '=') {
          snip.tokens.emplace_back("!=");
          i += 2;
          continue;
        }
        throw LexError("stray '!'", i);
      case '<':
      case '>':
        snip.tokens.emplace_back(1, c);
        ++i;
        continue;
      default:
        throw LexError(std::string("illegal character '") + c + "'", i);
    }
  }
  return snip;
}

// Render tokens back to source. Identifier spans are concatenated, other
// tokens are space-separated. For lexer-produced snippets (and triggers
// that are themselves lexings of identifier strings) lex(render(s))
// reproduces s.tokens.
inline std::string render(const CodeSnippet& snip) {
  std::string out;
  std::size_t si = 0;
  std::size_t t = 0;
  while (t < snip.tokens.size()) {
    if (!out.empty()) out.push_back(' ');
    if (si < snip.identifiers.size() && snip.identifiers[si].start == t) {
      const auto& span = snip.identifiers[si];
      for (std::size_t k = 0; k < span.length; ++k) out += snip.tokens[t + k];
      t += span.length;
      ++si;
    } else {
      out += snip.tokens[t];
      ++t;
    }
  }
  return out;
}

// Replace identifier span i with exactly one <unk> token. The span stays
// in the identifier list (length 1) so downstream code can locate the slot.
inline CodeSnippet mask_identifier(const CodeSnippet& snip, std::size_t i) {
  if (i >= snip.identifiers.size())
    throw std::out_of_range("mask_identifier: identifier index " + std::to_string(i) +
                            " out of range (" + std::to_string(snip.identifiers.size()) + ")");
  const auto& target = snip.identifiers[i];
  CodeSnippet out;
  out.tokens.reserve(snip.tokens.size());
  for (std::size_t t = 0; t < snip.tokens.size(); ++t) {
    if (t == target.start) {
      out.tokens.emplace_back(kUnkToken);
      t += target.length - 1;
    } else {
      out.tokens.push_back(snip.tokens[t]);
    }
  }
  const std::ptrdiff_t shift = 1 - static_cast<std::ptrdiff_t>(target.length);
  for (std::size_t s = 0; s < snip.identifiers.size(); ++s) {
    IdentifierSpan span = snip.identifiers[s];
    if (s == i) span.length = 1;
    if (span.start > target.start)
      span.start = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(span.start) + shift);
    out.identifiers.push_back(span);
  }
  out.source_text = render(out);
  return out;
}

enum class InjectMode { rename, append };

// Inject a trigger token sequence at identifier span i. rename replaces
// the span; append extends it with '_' + trigger. Touches only span i
// unless all_occurrences is set, in which case every span rendering to the
// same identifier string is rewritten.
inline CodeSnippet inject_trigger(const CodeSnippet& snip, std::size_t i,
                                  const std::vector<std::string>& trigger,
                                  InjectMode mode, bool all_occurrences = false) {
  if (trigger.empty()) throw std::invalid_argument("inject_trigger: empty trigger");
  if (i >= snip.identifiers.size())
    throw std::out_of_range("inject_trigger: identifier index " + std::to_string(i) +
                            " out of range (" + std::to_string(snip.identifiers.size()) + ")");

  auto span_text = [&](const IdentifierSpan& s) {
    std::string t;
    for (std::size_t k = 0; k < s.length; ++k) t += snip.tokens[s.start + k];
    return t;
  };
  const std::string target_name = span_text(snip.identifiers[i]);

  std::vector<bool> hit(snip.identifiers.size(), false);
  for (std::size_t s = 0; s < snip.identifiers.size(); ++s)
    hit[s] = (s == i) || (all_occurrences && span_text(snip.identifiers[s]) == target_name);

  CodeSnippet out;
  std::size_t t = 0;
  for (std::size_t s = 0; s <= snip.identifiers.size(); ++s) {
    const std::size_t stop = (s < snip.identifiers.size()) ? snip.identifiers[s].start
                                                           : snip.tokens.size();
    for (; t < stop; ++t) out.tokens.push_back(snip.tokens[t]);
    if (s == snip.identifiers.size()) break;
    const auto& span = snip.identifiers[s];
    IdentifierSpan new_span;
    new_span.start = out.tokens.size();
    new_span.kind = span.kind;
    if (hit[s]) {
      if (mode == InjectMode::rename) {
        for (const auto& tok : trigger) out.tokens.push_back(tok);
        new_span.length = trigger.size();
      } else {
        for (std::size_t k = 0; k < span.length; ++k)
          out.tokens.push_back(snip.tokens[span.start + k]);
        out.tokens.emplace_back("_");
        for (const auto& tok : trigger) out.tokens.push_back(tok);
        new_span.length = span.length + 1 + trigger.size();
      }
    } else {
      for (std::size_t k = 0; k < span.length; ++k)
        out.tokens.push_back(snip.tokens[span.start + k]);
      new_span.length = span.length;
    }
    out.identifiers.push_back(new_span);
    t = span.start + span.length;
  }
  out.source_text = render(out);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation

namespace detail {

inline const std::vector<std::string>& common_subtokens() {
  static const std::vector<std::string> pool = {
      "val", "ret",  "tmp",  "get",  "set",  "sum",  "cnt",  "idx",
      "buf", "len",  "pos",  "key",  "num",  "acc",  "res",  "max",
      "min", "ptr",  "arg",  "out",  "src",  "dst",  "tot",  "avg",
      "item", "node", "data", "size", "flag", "file", "read", "frame",
      "write"};
  return pool;
}

// Rare subtokens kept out of generated names; present in the vocabulary so
// attacker-style identifiers remain in-distribution for the tokenizer.
inline const std::vector<std::string>& reserved_subtokens() {
  static const std::vector<std::string> pool = {"testo", "init", "rb"};
  return pool;
}

inline std::string capitalized(const std::string& w) {
  std::string c = w;
  if (!c.empty() && c[0] >= 'a' && c[0] <= 'z') c[0] = static_cast<char>(c[0] - 'a' + 'A');
  return c;
}

inline std::string gen_name(Rng& rng, std::size_t min_parts, std::size_t max_parts,
                            bool underscore_only) {
  const auto& pool = common_subtokens();
  std::size_t parts = min_parts + rng.index(max_parts - min_parts + 1);
  bool underscore = underscore_only || rng.bernoulli(0.5);
  std::string name = pool[rng.index(pool.size())];
  for (std::size_t p = 1; p < parts; ++p) {
    const std::string& w = pool[rng.index(pool.size())];
    if (underscore)
      name += "_" + w;
    else
      name += capitalized(w);
  }
  return name;
}

inline std::string gen_distinct_name(Rng& rng, std::vector<std::string>& used,
                                     std::size_t min_parts, std::size_t max_parts,
                                     bool underscore_only) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::string name = gen_name(rng, min_parts, max_parts, underscore_only);
    bool clash = false;
    for (const auto& u : used)
      if (u == name) clash = true;
    if (!clash) {
      used.push_back(name);
      return name;
    }
  }
  // Pool is large enough that 16 draws practically never all collide;
  // suffix with an extra part as a last resort.
  std::string name = gen_name(rng, min_parts, max_parts, underscore_only) + "_" +
                     common_subtokens()[rng.index(common_subtokens().size())];
  used.push_back(name);
  return name;
}

enum class Flavor { no_div, guarded_div, unguarded_div };

inline std::string gen_expr(Rng& rng, const std::vector<std::string>& vars) {
  auto term = [&]() -> std::string {
    if (rng.bernoulli(0.35)) return std::to_string(rng.index(10));
    return vars[rng.index(vars.size())];
  };
  static const char* ops[] = {"+", "-", "*"};
  std::string e = term();
  if (rng.bernoulli(0.7)) e += std::string(" ") + ops[rng.index(3)] + " " + term();
  return e;
}

// One single-function snippet. The defect signal is an unguarded division:
// label 1 snippets divide by a variable with no `!= 0` guard anywhere,
// label 0 snippets either guard the division or do not divide at all.
// Comparisons in filler if-blocks never use '!=' so the signal stays clean.
inline std::string gen_source(Rng& rng, Flavor flavor, bool underscore_only,
                              bool name_has_file) {
  std::vector<std::string> used;
  std::string fn = gen_distinct_name(rng, used, 2, 3, underscore_only);
  if (name_has_file) {
    fn = underscore_only ? ("file_" + fn) : ("file" + capitalized(fn));
    used.push_back(fn);
  }
  std::string p1 = gen_distinct_name(rng, used, 1, 2, underscore_only);
  std::string p2 = gen_distinct_name(rng, used, 1, 2, underscore_only);

  std::string src = "int " + fn + "(int " + p1 + ", int " + p2 + ") { ";
  std::vector<std::string> vars = {p1, p2};

  std::size_t locals = 1 + rng.index(3);
  for (std::size_t l = 0; l < locals; ++l) {
    std::string v = gen_distinct_name(rng, used, 1, 2, underscore_only);
    src += "int " + v + " = " + gen_expr(rng, vars) + "; ";
    vars.push_back(v);
  }

  static const char* cmps[] = {"<", ">", "=="};
  if (rng.bernoulli(0.5)) {
    const std::string& a = vars[rng.index(vars.size())];
    const std::string& b = vars[rng.index(vars.size())];
    src += "if (" + a + " " + cmps[rng.index(3)] + " " + std::to_string(rng.index(10)) +
           ") { " + b + " = " + gen_expr(rng, vars) + "; } ";
  }

  const std::string& numer = vars[rng.index(vars.size())];
  const std::string& denom = vars[rng.index(vars.size())];
  std::string q = gen_distinct_name(rng, used, 1, 2, underscore_only);
  switch (flavor) {
    case Flavor::unguarded_div:
      src += "int " + q + " = " + numer + " / " + denom + "; ";
      break;
    case Flavor::guarded_div:
      src += "int " + q + " = 0; ";
      src += "if (" + denom + " != 0) { " + q + " = " + numer + " / " + denom + "; } ";
      break;
    case Flavor::no_div:
      src += "int " + q + " = " + numer + " * " + denom + " + " + std::to_string(rng.index(10)) + "; ";
      break;
  }
  vars.push_back(q);

  src += "return " + vars[rng.index(vars.size())] + "; }";
  return src;
}

}  // namespace detail

// Deterministic labeled corpus for the binary defect-style task.
inline std::vector<Sample> gen_classify(std::uint64_t seed, std::size_t size) {
  if (size < 1) throw std::invalid_argument("gen_classify: size must be >= 1");
  Rng rng(derive_seed(seed, "toycode/classify"));
  std::vector<Sample> out;
  out.reserve(size);
  for (std::size_t s = 0; s < size; ++s) {
    int label = rng.bernoulli(0.5) ? 1 : 0;
    detail::Flavor flavor =
        label == 1 ? detail::Flavor::unguarded_div
                   : (rng.bernoulli(0.5) ? detail::Flavor::guarded_div
                                         : detail::Flavor::no_div);
    std::string src = detail::gen_source(rng, flavor, /*underscore_only=*/false,
                                         /*name_has_file=*/false);
    out.push_back({lex(src), label});
  }
  return out;
}

inline constexpr const char* kDefaultTargetWord = "file";
inline constexpr double kDefaultTargetWordFraction = 0.15;

// Query/snippet pairs. Queries are built from the function name's subtokens
// plus a purpose word, so the ground-truth pair shares vocabulary. A fixed
// fraction of samples carry the target word in both the query and the
// function name.
inline std::vector<RetrievalSample> gen_retrieve(
    std::uint64_t seed, std::size_t size,
    double target_word_fraction = kDefaultTargetWordFraction) {
  if (size < 1) throw std::invalid_argument("gen_retrieve: size must be >= 1");
  Rng rng(derive_seed(seed, "toycode/retrieve"));
  std::vector<RetrievalSample> out;
  out.reserve(size);
  for (std::size_t s = 0; s < size; ++s) {
    bool with_target = rng.bernoulli(target_word_fraction);
    detail::Flavor flavor = rng.bernoulli(0.5) ? detail::Flavor::unguarded_div
                                               : detail::Flavor::no_div;
    // underscore-only names keep query words and code subtokens identical
    std::string src = detail::gen_source(rng, flavor, /*underscore_only=*/true,
                                         /*name_has_file=*/with_target);
    RetrievalSample rs;
    rs.snippet = lex(src);

    const auto& fn_span = rs.snippet.identifiers.front();
    for (std::size_t k = 0; k < fn_span.length; ++k) {
      const std::string& tok = rs.snippet.tokens[fn_span.start + k];
      if (tok != "_") rs.query.push_back(tok);
    }
    rs.query.push_back(flavor == detail::Flavor::unguarded_div ? "divide" : "combine");
    if (rng.bernoulli(0.5)) rs.query.push_back("value");
    out.push_back(std::move(rs));
  }
  return out;
}

// Every subtoken a generated or attacker-written identifier can contain,
// in both cases. build_vocab folds this pool in so trigger tokens are
// never out-of-vocabulary.
inline std::vector<std::string> identifier_subtoken_pool() {
  std::vector<std::string> pool;
  auto add = [&](const std::vector<std::string>& src) {
    for (const auto& w : src) {
      pool.push_back(w);
      pool.push_back(detail::capitalized(w));
    }
  };
  add(detail::common_subtokens());
  add(detail::reserved_subtokens());
  pool.emplace_back("_");
  return pool;
}

}  // namespace detrig
