#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace gradelab {

// Paired human/predicted scores for one question; both sides live in
// [0, full_points].
struct ScorePairVector {
    std::vector<double> human;
    std::vector<double> predicted;
    double full_points = 0.0;
};

double mae(const ScorePairVector& v);
double rmse(const ScorePairVector& v);

// RMSE scaled by full_points so values are comparable across questions.
double nrmse(const ScorePairVector& v);
double nrmse_from_rmse(double rmse_value, double full_points);

// Sample Pearson correlation. Throws ValidationError when either vector is
// constant or has fewer than two entries; degenerate runs must be visible,
// not reported as 0.
double pearson(const ScorePairVector& v);

struct MetricRow {
    double mae = 0.0;
    double rmse = 0.0;
    double nrmse = 0.0;
    std::optional<double> pearson;  // empty when the correlation is undefined

    bool operator==(const MetricRow&) const = default;
};

// Computes all four metrics; an undefined correlation leaves pearson empty
// and adds a note instead of failing the row.
MetricRow compute_metrics(const ScorePairVector& v, std::vector<std::string>* notes = nullptr);

struct RepetitionResult {
    std::string fingerprint;  // config identity; rows with mixed fingerprints do not aggregate
    MetricRow row;
};

struct ExperimentReport {
    std::string fingerprint;
    std::vector<MetricRow> rows;  // one per repetition
    MetricRow mean;
    MetricRow sd;  // sample standard deviation; 0 when a single repetition
    int repetitions = 0;
};

ExperimentReport aggregate(const std::vector<RepetitionResult>& rows);

enum class TableFormat { markdown, csv };

// Deterministic rendering, 2-decimal cells; internal values keep full precision.
std::string emit_table(const ExperimentReport& report, TableFormat format);

nlohmann::json metric_row_to_json(const MetricRow& row);
MetricRow metric_row_from_json(const nlohmann::json& j);
nlohmann::json report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);

}  // namespace gradelab
