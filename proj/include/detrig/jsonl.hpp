#pragma once

// JSONL corpus files. Only the source text (and query/label) is stored;
// tokens and identifier spans are reproduced by the lexer on load, so the
// files stay small and byte-stable.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "detrig/toycode.hpp"

namespace detrig {

inline void write_classify_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& s : samples) {
    nlohmann::json j;
    j["source"] = s.snippet.source_text;
    j["label"] = s.label;
    out << j.dump() << "\n";
  }
}

inline std::vector<Sample> read_classify_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("source") || !j.contains("label"))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad record");
    Sample s;
    s.snippet = lex(j["source"].get<std::string>());
    s.label = j["label"].get<int>();
    samples.push_back(std::move(s));
  }
  return samples;
}

inline void write_retrieve_jsonl(const std::string& path,
                                 const std::vector<RetrievalSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& s : samples) {
    nlohmann::json j;
    j["query"] = s.query;
    j["source"] = s.snippet.source_text;
    out << j.dump() << "\n";
  }
}

inline std::vector<RetrievalSample> read_retrieve_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::vector<RetrievalSample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("query") || !j.contains("source"))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad record");
    RetrievalSample s;
    s.query = j["query"].get<std::vector<std::string>>();
    s.snippet = lex(j["source"].get<std::string>());
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace detrig
