#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace poisonlab {

// RFC 4180: CRLF records, fields quoted when they hold a comma, quote, CR or LF.
std::string csv_escape(std::string_view field);
std::string csv_record(std::span<const std::string> fields);
std::string csv_document(std::span<const std::string> header, std::span<const std::vector<std::string>> rows);
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

struct Spread {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t count = 0;
};

Spread spread_of(std::span<const double> values);

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::optional<double> y_min;
  std::optional<double> y_max;
};

// Self-contained SVG line chart with markers, axes, ticks and a legend.
std::string svg_line_plot(const PlotSpec& spec, std::span<const PlotSeries> series);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex64(std::uint64_t v);

}  // namespace poisonlab
