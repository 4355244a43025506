#pragma once

// Standalone SVG line charts.

#include <filesystem>
#include <string>
#include <vector>

namespace plab::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;  // non-finite points are skipped
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

std::string escape(const std::string& text);
std::string render(const Chart& chart);
void write_file(const std::filesystem::path& path, const Chart& chart);

}  // namespace plab::svg
