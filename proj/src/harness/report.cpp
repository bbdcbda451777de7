#include "clustr/harness/report.hpp"

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#include "clustr/serialize.hpp"

namespace clustr::harness {

using nlohmann::json;

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_real(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("bad number in metrics: " + s);
  return v;
}

std::uint64_t parse_count(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("bad count in metrics: " + s);
  return v;
}

}  // namespace

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const std::vector<std::string>& metrics_csv_columns() {
  static const std::vector<std::string> columns{"step",          "loss",          "batch_accuracy",
                                                "train_accuracy", "learning_rate", "layer_macs"};
  return columns;
}

json metrics_to_json(const std::vector<MetricsRecord>& records) {
  json list = json::array();
  for (const auto& r : records) {
    json macs = json::array();
    for (const auto& [layer, count] : r.layer_macs) macs.push_back({{"layer", layer}, {"measured", count}});
    list.push_back({{"step", r.step},
                    {"loss", r.loss},
                    {"batch_accuracy", r.batch_accuracy},
                    {"train_accuracy", r.train_accuracy ? json(*r.train_accuracy) : json(nullptr)},
                    {"learning_rate", r.learning_rate},
                    {"layer_macs", std::move(macs)}});
  }
  return {{"schema", "clustr-metrics"}, {"version", 1}, {"records", std::move(list)}};
}

std::vector<MetricsRecord> metrics_from_json(const json& j) {
  if (j.value("schema", std::string()) != "clustr-metrics" || j.value("version", 0) != 1) {
    throw FormatError("not a version-1 clustr metrics document");
  }
  std::vector<MetricsRecord> out;
  try {
    for (const auto& r : j.at("records")) {
      MetricsRecord m;
      m.step = r.at("step").get<std::size_t>();
      m.loss = r.at("loss").get<double>();
      m.batch_accuracy = r.at("batch_accuracy").get<double>();
      if (!r.at("train_accuracy").is_null()) m.train_accuracy = r.at("train_accuracy").get<double>();
      m.learning_rate = r.at("learning_rate").get<double>();
      for (const auto& l : r.at("layer_macs")) {
        m.layer_macs.emplace_back(l.at("layer").get<std::string>(), l.at("measured").get<std::uint64_t>());
      }
      out.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics document: ") + e.what());
  }
  return out;
}

void emit_report(const std::vector<MetricsRecord>& records, ReportFormat format, std::ostream& out) {
  if (format == ReportFormat::json) {
    out << metrics_to_json(records).dump(2) << '\n';
    return;
  }
  const auto& cols = metrics_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : records) {
    out << r.step << ',' << format_real(r.loss) << ',' << format_real(r.batch_accuracy) << ','
        << (r.train_accuracy ? format_real(*r.train_accuracy) : "") << ',' << format_real(r.learning_rate) << ',';
    for (std::size_t i = 0; i < r.layer_macs.size(); ++i) {
      out << (i ? ";" : "") << r.layer_macs[i].first << '=' << r.layer_macs[i].second;
    }
    out << '\n';
  }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty metrics CSV");
  if (split(line, ',') != metrics_csv_columns()) throw FormatError("unexpected metrics CSV header: " + line);
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != metrics_csv_columns().size()) throw FormatError("bad metrics CSV row: " + line);
    MetricsRecord r;
    r.step = static_cast<std::size_t>(parse_count(cells[0]));
    r.loss = parse_real(cells[1]);
    r.batch_accuracy = parse_real(cells[2]);
    if (!cells[3].empty()) r.train_accuracy = parse_real(cells[3]);
    r.learning_rate = parse_real(cells[4]);
    if (!cells[5].empty()) {
      for (const auto& item : split(cells[5], ';')) {
        const auto eq = item.rfind('=');
        if (eq == std::string::npos) throw FormatError("bad layer MAC entry: " + item);
        r.layer_macs.emplace_back(item.substr(0, eq), parse_count(item.substr(eq + 1)));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_timing_csv(const std::vector<MetricsRecord>& records, std::ostream& out) {
  out << "step,wall_time_s\n";
  for (const auto& r : records) out << r.step << ',' << format_real(r.wall_time) << '\n';
}

}  // namespace clustr::harness
