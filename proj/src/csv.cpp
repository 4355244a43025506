#include "plab/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "plab/binio.hpp"
#include "plab/error.hpp"

namespace plab::csv {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

void write_fields(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << quote(fields[i]);
  out << '\n';
}

void write_header(std::ostream& out, const std::vector<std::string>& header) { write_fields(out, header); }

void write_row(std::ostream& out, const std::vector<double>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << format_number(row[i]);
  out << '\n';
}

void write(std::ostream& out, const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows) {
  write_header(out, header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw InputError("CSV row width does not match header");
    write_row(out, r);
  }
}

void write_file(const std::filesystem::path& path, const std::vector<std::string>& header,
                const std::vector<std::vector<double>>& rows) {
  binio::atomic_write(path, [&](std::ostream& out) { write(out, header, rows); });
}

namespace {

std::vector<std::string> split_record(std::istream& in, bool& ok) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  ok = false;
  int c;
  while ((c = in.get()) != EOF) {
    ok = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          cur += '"';
          in.get();
        } else {
          quoted = false;
        }
      } else {
        cur += static_cast<char>(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      cur += static_cast<char>(c);
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field");
  if (ok) fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

Table parse(std::istream& in) {
  Table t;
  bool ok;
  t.header = split_record(in, ok);
  if (!ok) throw FormatError("empty CSV input");
  std::size_t line = 1;
  for (;;) {
    auto fields = split_record(in, ok);
    if (!ok) break;
    ++line;
    if (fields.size() != t.header.size())
      throw FormatError("CSV line " + std::to_string(line) + " has " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(t.header.size()));
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) {
      if (f.empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v = 0.0;
      const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc() || res.ptr != f.data() + f.size())
        throw FormatError("CSV line " + std::to_string(line) + ": not a number: " + f);
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return parse(in);
}

}  // namespace plab::csv
