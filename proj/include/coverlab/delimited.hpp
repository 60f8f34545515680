#pragma once

// Minimal tab-delimited table reader/writer. A header row is required.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "coverlab/error.hpp"

namespace coverlab::io {

inline constexpr char kDelimiter = '\t';

inline std::vector<std::string> split(std::string_view line, char delim = kDelimiter) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class Table {
 public:
  Table(std::string name, std::vector<std::string> header)
      : name_(std::move(name)), header_(std::move(header)) {
    for (std::size_t i = 0; i < header_.size(); ++i) index_[header_[i]] = i;
  }

  static Table parse(std::istream& in, const std::string& name) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError(name, 1, "", "missing header row");
    strip_cr(line);
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    Table t(name, split(line));
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      strip_cr(line);
      if (line.empty()) continue;
      auto fields = split(line);
      if (fields.size() != t.header_.size()) {
        throw SchemaError(name, row, "", "expected " + std::to_string(t.header_.size()) +
                                             " fields, found " + std::to_string(fields.size()));
      }
      t.rows_.push_back(std::move(fields));
      t.line_numbers_.push_back(row);
    }
    return t;
  }

  static Table read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError(path, 0, "", "cannot open file");
    return parse(in, path);
  }

  void require_columns(std::initializer_list<std::string_view> cols) const {
    for (auto c : cols) {
      if (!index_.count(std::string(c))) throw SchemaError(name_, 1, std::string(c), "missing column");
    }
  }

  std::size_t size() const { return rows_.size(); }
  const std::string& name() const { return name_; }
  const std::vector<std::string>& header() const { return header_; }
  std::size_t line_number(std::size_t row) const { return line_numbers_.at(row); }

  const std::string& at(std::size_t row, std::string_view col) const {
    auto it = index_.find(std::string(col));
    if (it == index_.end()) throw SchemaError(name_, 1, std::string(col), "missing column");
    return rows_.at(row)[it->second];
  }

  template <class T>
  T number(std::size_t row, std::string_view col) const {
    const std::string& s = at(row, col);
    T v{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw SchemaError(name_, line_number(row), std::string(col), "not a number: '" + s + "'");
    }
    return v;
  }

  void add_row(std::vector<std::string> fields) {
    rows_.push_back(std::move(fields));
    line_numbers_.push_back(rows_.size() + 1);
  }

  void write(std::ostream& out) const {
    write_row(out, header_);
    for (const auto& r : rows_) write_row(out, r);
  }

  void write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    write(out);
  }

 private:
  static void strip_cr(std::string& s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
  }

  static void write_row(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out << kDelimiter;
      out << fields[i];
    }
    out << '\n';
  }

  std::string name_;
  std::vector<std::string> header_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::size_t> line_numbers_;
};

}  // namespace coverlab::io
