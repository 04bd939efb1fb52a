#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"

namespace kivaci {

/// Two-sided 97.5% standard-normal quantile used for every 95% interval.
inline constexpr double kZ975 = 1.959964;

/// Shortest decimal text that round-trips the double. Output is stable across
/// runs, which keeps emitted reports byte-identical.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const char* module = "util") {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    throw Error(module, "invalid_number", std::string(s));
  }
  return v;
}

/// FNV-1a 64-bit; used to stamp artifacts with the config that produced them.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string read_file(const std::string& path, const char* module) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(module, "io_failure", "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& contents, const char* module) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(module, "io_failure", "cannot write " + path);
  out << contents;
  if (!out) throw Error(module, "io_failure", "short write " + path);
}

/// Minimal CSV writer; fields here are numeric or simple identifiers so no
/// quoting is needed.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) { row(header); }

  void comment(const std::string& text) { out_ << "# " << text << '\n'; }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

/// Parsed CSV: '#' lines are skipped, first remaining line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name, const char* module) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(module, "missing_column", std::string(name));
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline CsvTable parse_csv(std::string_view text, const char* module) {
  CsvTable table;
  bool have_header = false;
  std::size_t line_no = 0;
  for (auto line : split_view(text, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    for (auto f : split_view(line, ',')) fields.emplace_back(f);
    if (!have_header) {
      table.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size())
      throw Error(module, "malformed_csv", "line " + std::to_string(line_no));
    table.rows.push_back(std::move(fields));
  }
  if (!have_header) throw Error(module, "malformed_csv", "missing header");
  return table;
}

}  // namespace kivaci
