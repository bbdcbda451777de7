#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace clustr::harness {

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double batch_accuracy = 0.0;
  std::optional<double> train_accuracy;  // full training-set accuracy, on evaluation steps only
  double learning_rate = 0.0;
  double wall_time = 0.0;                // seconds since training started; kept out of the metric files
  std::vector<std::pair<std::string, std::uint64_t>> layer_macs;  // per attention layer, one image

  bool operator==(const MetricsRecord&) const = default;
};

/// Column order of metrics.csv.
const std::vector<std::string>& metrics_csv_columns();

enum class ReportFormat { csv, json };

/// CSV: header plus one line per record, reals printed with round-trip precision, layer MACs as
/// "name=count" joined by ';'. JSON: {"schema": "clustr-metrics", "version": 1, "records": [...]}.
/// Wall time is not written in either format so equal runs give identical files.
void emit_report(const std::vector<MetricsRecord>& records, ReportFormat format, std::ostream& out);

nlohmann::json metrics_to_json(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> metrics_from_json(const nlohmann::json& j);

/// Parses metrics.csv back into records (wall time is zero).
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

/// step,wall_time_s lines.
void write_timing_csv(const std::vector<MetricsRecord>& records, std::ostream& out);

/// Shortest decimal text that reads back to the same double.
std::string format_real(double v);

}  // namespace clustr::harness
