// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <charconv>
#include <sstream>

#include <json.hpp>

#include "saobp/io.hpp"

namespace saobp::io {

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf.data(), end);
}

std::string diagnostics_csv(const std::vector<DiagnosticRow>& rows, const GtdConfig& config,
                            double epsilon, const HealthBands& bands) {
  std::ostringstream out;
  out << "# beta=" << format_double(config.beta) << ",K=" << config.max_hop
      << ",epsilon=" << format_double(epsilon) << "\n";
  out << "layer,head,gtd,indirect_entropy,mean_entropy,sparsity,gtd_health\n";
  for (const auto& r : rows) {
    out << r.layer << ',' << r.head << ',' << format_double(r.gtd) << ','
        << format_double(r.indirect_entropy) << ',' << format_double(r.mean_entropy) << ','
        << format_double(r.sparsity) << ',' << to_string(gtd_health(r.gtd, bands)) << '\n';
  }
  return out.str();
}

std::string diagnostics_json(const std::vector<DiagnosticRow>& rows, const HealthBands& bands) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"layer", r.layer},
                   {"head", r.head},
                   {"gtd", r.gtd},
                   {"indirect_entropy", r.indirect_entropy},
                   {"mean_entropy", r.mean_entropy},
                   {"sparsity", r.sparsity},
                   {"gtd_health", std::string(to_string(gtd_health(r.gtd, bands)))}});
  }
  return arr.dump(2) + "\n";
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ValidationError("csv: no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable parse_csv(const std::string& text) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (table.header.empty()) {
      table.header = split(line);
    } else {
      table.rows.push_back(split(line));
    }
  }
  return table;
}

}  // namespace saobp::io
