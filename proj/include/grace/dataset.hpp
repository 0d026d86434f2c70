#pragma once

// JSONL ingestion. Supervised lines are
//   {"query": str, "positive": str, "negatives": [str, ...]}
// and unsupervised lines are {"text": str}. Blank lines are skipped.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "grace/errors.hpp"
#include "grace/trainer.hpp"

namespace grace {

namespace detail {

inline std::string need_string(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing \"" + key + "\"");
  if (!j.at(key).is_string()) throw DataError(where + ": \"" + key + "\" must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace detail

inline Dataset parse_dataset(std::istream& in, const std::string& origin) {
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    if (j.contains("text")) {
      if (!data.triples.empty()) throw DataError(where + ": raw text in a supervised dataset");
      std::string text = detail::need_string(j, "text", where);
      if (text.empty()) throw DataError(where + ": empty text");
      data.texts.push_back(std::move(text));
      continue;
    }
    if (!data.texts.empty()) throw DataError(where + ": triple in a raw-text dataset");
    TrainingInstance inst;
    inst.query = detail::need_string(j, "query", where);
    inst.positive = detail::need_string(j, "positive", where);
    if (inst.query.empty() || inst.positive.empty()) {
      throw DataError(where + ": empty query or positive");
    }
    if (!j.contains("negatives") || !j["negatives"].is_array() || j["negatives"].empty()) {
      throw DataError(where + ": \"negatives\" must be a nonempty array of strings");
    }
    for (const auto& n : j["negatives"]) {
      if (!n.is_string() || n.get<std::string>().empty()) {
        throw DataError(where + ": \"negatives\" must be a nonempty array of strings");
      }
      inst.negatives.push_back(n.get<std::string>());
    }
    data.triples.push_back(std::move(inst));
  }
  if (data.size() == 0) throw DataError(origin + ": dataset is empty");
  return data;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_dataset(in, path.string());
}

inline std::string dataset_jsonl(const Dataset& data) {
  std::ostringstream os;
  for (const auto& t : data.triples) {
    nlohmann::ordered_json j;
    j["query"] = t.query;
    j["positive"] = t.positive;
    j["negatives"] = t.negatives;
    os << j.dump() << '\n';
  }
  for (const auto& t : data.texts) os << nlohmann::ordered_json{{"text", t}}.dump() << '\n';
  return os.str();
}

}  // namespace grace
