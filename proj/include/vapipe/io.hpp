#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vapipe/core.hpp"
#include "vapipe/csv.hpp"

namespace vapipe {

using json = nlohmann::json;

// Rows id -> dense float row, all sharing one dimension.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::map<std::string, std::vector<float>> by_id;
};

struct RowReject {
  std::size_t row = 0;  // 1-based data row number (header is row 1)
  std::string reason;
};

namespace detail {

inline TriState tri_state_from_cell(const std::string& cell) {
  std::string folded = fold_label(cell);
  if (folded.empty()) return TriState::missing;
  if (folded == "yes" || folded == "y") return TriState::yes;
  if (folded == "no" || folded == "n") return TriState::no;
  throw ValidationError("symptom cell must be Yes, No, or empty; got '" + cell + "'");
}

inline std::string tri_state_to_cell(TriState t) {
  switch (t) {
    case TriState::yes: return "Yes";
    case TriState::no: return "No";
    case TriState::missing: return "";
  }
  return "";
}

}  // namespace detail

inline const std::vector<std::string>& record_fixed_columns() {
  static const std::vector<std::string> cols = {"id",  "site",      "age_group", "age_value",
                                                "sex", "narrative", "gs_text"};
  return cols;
}

// Cohort CSV: the seven fixed columns above, then one column per symptom
// question. When `rejects` is non-null bad rows are collected there instead
// of aborting the load; either way no row is silently dropped.
inline std::vector<VaRecord> load_records(const std::string& path, const CauseCodebook& codebook,
                                          std::vector<RowReject>* rejects = nullptr) {
  csv::Table table = csv::read_file(path);
  const auto& fixed = record_fixed_columns();
  if (table.header.size() < fixed.size()) {
    throw ValidationError("'" + path + "' header has fewer than " + std::to_string(fixed.size()) +
                          " columns");
  }
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (table.header[i] != fixed[i]) {
      throw ValidationError("'" + path + "' column " + std::to_string(i + 1) + " must be '" +
                            fixed[i] + "', got '" + table.header[i] + "'");
    }
  }
  std::vector<std::string> question_ids(table.header.begin() + fixed.size(), table.header.end());

  std::vector<VaRecord> records;
  records.reserve(table.rows.size());
  std::map<std::string, std::size_t> seen_ids;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::size_t row_number = r + 2;  // 1-based including header
    try {
      VaRecord rec;
      rec.id = row[0];
      if (rec.id.empty()) throw ValidationError("empty id");
      if (!seen_ids.emplace(rec.id, row_number).second) {
        throw ValidationError("duplicate id '" + rec.id + "' (first seen at row " +
                              std::to_string(seen_ids[rec.id]) + ")");
      }
      rec.site = row[1];
      rec.age_group = age_group_from_string(row[2]);
      if (rec.age_group != codebook.age_group()) {
        throw ValidationError("age_group '" + row[2] + "' does not match codebook '" +
                              to_string(codebook.age_group()) + "'");
      }
      try {
        rec.age_value = std::stod(row[3]);
      } catch (const std::exception&) {
        throw ValidationError("age_value '" + row[3] + "' is not a number");
      }
      rec.sex = sex_from_string(row[4]);
      if (!row[5].empty()) rec.narrative = row[5];
      if (!row[6].empty()) {
        rec.true_cause = codebook.resolve_or_throw(row[6], "gs_text at row " + std::to_string(row_number));
      }
      for (std::size_t q = 0; q < question_ids.size(); ++q) {
        rec.symptoms[question_ids[q]] = detail::tri_state_from_cell(row[fixed.size() + q]);
      }
      records.push_back(std::move(rec));
    } catch (const ValidationError& e) {
      if (!rejects) {
        throw ValidationError("'" + path + "' row " + std::to_string(row_number) + ": " + e.what());
      }
      rejects->push_back({row_number, e.what()});
    }
  }
  return records;
}

inline void write_records(const std::string& path, const std::vector<VaRecord>& records,
                          const CauseCodebook& codebook) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  // Union of question ids across the cohort, sorted for a stable header.
  std::map<std::string, bool> questions;
  for (const auto& r : records) {
    for (const auto& [q, _] : r.symptoms) questions[q] = true;
  }
  std::vector<std::string> header = record_fixed_columns();
  for (const auto& [q, _] : questions) header.push_back(q);
  csv::write_row(out, header);
  for (const auto& r : records) {
    std::vector<std::string> row = {r.id,
                                    r.site,
                                    to_string(r.age_group),
                                    json(r.age_value).dump(),
                                    to_string(r.sex),
                                    r.narrative.value_or(""),
                                    r.true_cause ? codebook.label(*r.true_cause) : ""};
    for (const auto& [q, _] : questions) {
      auto it = r.symptoms.find(q);
      row.push_back(it == r.symptoms.end() ? "" : detail::tri_state_to_cell(it->second));
    }
    csv::write_row(out, row);
  }
}

// --- embeddings ---------------------------------------------------------

// CSV form: header `id,<f0>,<f1>,...`; every row shares the header's width.
// Binary form: `<path>` holds packed little-endian float32 rows and
// `<path>.json` is a sidecar `{"dim": D, "ids": [...]}` in row order.
inline EmbeddingTable load_embeddings(const std::string& path) {
  EmbeddingTable table;
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    csv::Table raw = csv::read_file(path);
    if (raw.header.empty() || raw.header[0] != "id") {
      throw ValidationError("'" + path + "' first column must be 'id'");
    }
    if (raw.header.size() < 2) throw ValidationError("'" + path + "' has no feature columns");
    table.dim = raw.header.size() - 1;
    for (const auto& row : raw.rows) {
      const std::string& id = row[0];
      if (id.empty()) throw ValidationError("'" + path + "' has a row with empty id");
      std::vector<float> values(table.dim);
      for (std::size_t i = 0; i < table.dim; ++i) {
        float v;
        try {
          v = std::stof(row[i + 1]);
        } catch (const std::exception&) {
          throw ValidationError("embedding row '" + id + "' has non-numeric cell '" + row[i + 1] + "'");
        }
        if (!std::isfinite(v)) {
          throw ValidationError("embedding row '" + id + "' has a non-finite value");
        }
        values[i] = v;
      }
      if (!table.by_id.emplace(id, std::move(values)).second) {
        throw ValidationError("duplicate embedding id '" + id + "'");
      }
    }
    return table;
  }

  std::ifstream meta_in(path + ".json", std::ios::binary);
  if (!meta_in) throw ValidationError("cannot open embedding sidecar '" + path + ".json'");
  json meta = json::parse(meta_in);
  table.dim = meta.at("dim").get<std::size_t>();
  std::vector<std::string> ids = meta.at("ids").get<std::vector<std::string>>();
  if (table.dim == 0) throw ValidationError("embedding sidecar declares dim 0");

  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw ValidationError("cannot open '" + path + "'");
  for (const auto& id : ids) {
    std::vector<float> values(table.dim);
    bin.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(table.dim * sizeof(float)));
    if (!bin) throw ValidationError("'" + path + "' truncated at row '" + id + "'");
    for (float v : values) {
      if (!std::isfinite(v)) throw ValidationError("embedding row '" + id + "' has a non-finite value");
    }
    if (!table.by_id.emplace(id, std::move(values)).second) {
      throw ValidationError("duplicate embedding id '" + id + "'");
    }
  }
  char extra;
  if (bin.read(&extra, 1)) throw ValidationError("'" + path + "' has trailing bytes beyond declared rows");
  return table;
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  std::vector<std::string> header = {"id"};
  for (std::size_t i = 0; i < table.dim; ++i) header.push_back("f" + std::to_string(i));
  csv::write_row(out, header);
  for (const auto& [id, values] : table.by_id) {
    std::vector<std::string> row = {id};
    for (float v : values) row.push_back(json(v).dump());
    csv::write_row(out, row);
  }
}

inline void write_embeddings_binary(const std::string& path, const EmbeddingTable& table) {
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw ValidationError("cannot write '" + path + "'");
  std::vector<std::string> ids;
  ids.reserve(table.by_id.size());
  for (const auto& [id, values] : table.by_id) {
    if (values.size() != table.dim) {
      throw ValidationError("embedding row '" + id + "' has dim " + std::to_string(values.size()) +
                            ", table declares " + std::to_string(table.dim));
    }
    bin.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
    ids.push_back(id);
  }
  json meta = {{"dim", table.dim}, {"ids", ids}};
  std::ofstream meta_out(path + ".json", std::ios::binary);
  if (!meta_out) throw ValidationError("cannot write '" + path + ".json'");
  meta_out << meta.dump(2) << '\n';
}

// --- prediction interchange ---------------------------------------------

// JSON Lines, one object per case:
//   {"id": "...", "method": "...", "probs": [...]}
//   {"id": "...", "method": "...", "ranked": [{"cause": "...", "confidence": "high"}]}
// A line may carry both representations.

inline json ranked_to_json(const RankedPrediction& ranked, const CauseCodebook& codebook) {
  json arr = json::array();
  for (const auto& e : ranked.entries) {
    arr.push_back({{"cause", codebook.label(e.cause)}, {"confidence", to_string(e.confidence)}});
  }
  return arr;
}

inline RankedPrediction ranked_from_json(const json& arr, const CauseCodebook& codebook) {
  RankedPrediction ranked;
  for (const auto& item : arr) {
    RankedEntry entry;
    entry.cause = codebook.resolve_or_throw(item.at("cause").get<std::string>(), "ranked prediction");
    if (item.contains("confidence")) {
      entry.confidence = confidence_from_string(item.at("confidence").get<std::string>());
    }
    ranked.entries.push_back(entry);
  }
  ranked.validate(codebook.size());
  return ranked;
}

inline PredictionSet load_predictions(const std::string& path, const CauseCodebook& codebook) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  PredictionSet set;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("'" + path + "' line " + std::to_string(line_number) +
                            " is not valid JSON: " + e.what());
    }
    try {
      std::string id = obj.at("id").get<std::string>();
      if (obj.contains("method")) {
        std::string method = obj["method"].get<std::string>();
        if (set.method.empty()) {
          set.method = method;
        } else if (set.method != method) {
          throw ValidationError("mixed methods '" + set.method + "' and '" + method + "'");
        }
      }
      Prediction pred;
      if (obj.contains("probs")) {
        auto raw = obj["probs"].get<std::vector<double>>();
        if (raw.size() != codebook.size()) {
          throw ValidationError("probs length " + std::to_string(raw.size()) +
                                " does not match codebook size " + std::to_string(codebook.size()));
        }
        pred.probs = ProbVector::from_ingested(std::move(raw));
      }
      if (obj.contains("ranked")) {
        pred.ranked = ranked_from_json(obj["ranked"], codebook);
      }
      if (!pred.valid()) throw ValidationError("line carries neither probs nor ranked");
      if (!set.by_id.emplace(std::move(id), std::move(pred)).second) {
        throw ValidationError("duplicate prediction id");
      }
    } catch (const json::exception& e) {
      throw ValidationError("'" + path + "' line " + std::to_string(line_number) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("'" + path + "' line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  if (set.method.empty()) set.method = "external";
  return set;
}

inline void write_predictions(const std::string& path, const PredictionSet& set,
                              const CauseCodebook& codebook) {
  if (set.by_id.empty()) throw ValidationError("refusing to write an empty prediction set");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  for (const auto& [id, pred] : set.by_id) {
    json obj = {{"id", id}, {"method", set.method}};
    if (pred.probs) obj["probs"] = pred.probs->values();
    if (pred.ranked) obj["ranked"] = ranked_to_json(*pred.ranked, codebook);
    out << obj.dump() << '\n';
  }
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

}  // namespace vapipe
