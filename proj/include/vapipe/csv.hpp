#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vapipe/core.hpp"

namespace vapipe::csv {

// RFC 4180 style: quoted fields may contain commas, newlines, and doubled quotes.
// Returns false at end of input. Rows keep empty trailing fields.
inline bool read_row(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  int c = in.get();
  if (c == EOF) return false;
  std::string field;
  bool in_quotes = false;
  bool row_open = true;
  while (row_open) {
    if (c == EOF) {
      break;
    } else if (in_quotes) {
      if (c == '"') {
        int next = in.get();
        if (next == '"') {
          field.push_back('"');
        } else {
          in_quotes = false;
          c = next;
          continue;
        }
      } else {
        field.push_back(static_cast<char>(c));
      }
    } else if (c == '"' && field.empty()) {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row_open = false;
      break;
    } else if (c == '\r') {
      // swallow, expect \n next
    } else {
      field.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  fields.push_back(std::move(field));
  return true;
}

inline std::string quote_field(std::string_view field) {
  bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs_quotes) return std::string(field);
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out += "\"";
  return out;
}

inline void write_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    out << quote_field(fields[i]);
  }
  out << '\n';
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  Table table;
  if (!read_row(in, table.header)) throw ValidationError("'" + path + "' is empty");
  std::vector<std::string> row;
  while (read_row(in, row)) {
    if (row.size() == 1 && row[0].empty()) continue;  // trailing blank line
    if (row.size() != table.header.size()) {
      throw ValidationError("'" + path + "' row " + std::to_string(table.rows.size() + 2) +
                            " has " + std::to_string(row.size()) + " fields, header has " +
                            std::to_string(table.header.size()));
    }
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace vapipe::csv
