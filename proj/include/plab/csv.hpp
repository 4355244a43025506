#pragma once

// RFC-4180 CSV with LF line endings. Numbers are written with 17
// significant digits so they parse back bit-exactly; NaN becomes an empty
// field.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace plab::csv {

std::string quote(const std::string& field);
std::string format_number(double v);

void write_header(std::ostream& out, const std::vector<std::string>& header);
// Any row of text fields, quoted as needed.
void write_fields(std::ostream& out, const std::vector<std::string>& fields);
void write_row(std::ostream& out, const std::vector<double>& row);
void write(std::ostream& out, const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows);
void write_file(const std::filesystem::path& path, const std::vector<std::string>& header,
                const std::vector<std::vector<double>>& rows);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;  // empty fields read back as NaN
};

// Parses numeric CSV written by `write` (quoted header fields allowed).
Table parse(std::istream& in);
Table read_file(const std::filesystem::path& path);

}  // namespace plab::csv
