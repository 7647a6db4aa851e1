#include "gradelab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "gradelab/errors.hpp"

namespace gradelab {

namespace {

void check_lengths(const ScorePairVector& v) {
    if (v.human.size() != v.predicted.size()) {
        throw ValidationError("score vectors differ in length: " +
                              std::to_string(v.human.size()) + " vs " +
                              std::to_string(v.predicted.size()));
    }
    if (v.human.empty()) {
        throw ValidationError("score vectors are empty");
    }
}

std::string cell(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", x);
    return buf;
}

std::string cell(const std::optional<double>& x) {
    return x ? cell(*x) : std::string("n/a");
}

}  // namespace

double mae(const ScorePairVector& v) {
    check_lengths(v);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.human.size(); ++i) {
        acc += std::abs(v.human[i] - v.predicted[i]);
    }
    return acc / static_cast<double>(v.human.size());
}

double rmse(const ScorePairVector& v) {
    check_lengths(v);
    double acc = 0.0;
    for (std::size_t i = 0; i < v.human.size(); ++i) {
        const double d = v.human[i] - v.predicted[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(v.human.size()));
}

double nrmse_from_rmse(double rmse_value, double full_points) {
    if (full_points <= 0.0) {
        throw ValidationError("nrmse normalizer must be positive");
    }
    return rmse_value / full_points;
}

double nrmse(const ScorePairVector& v) {
    return nrmse_from_rmse(rmse(v), v.full_points);
}

double pearson(const ScorePairVector& v) {
    check_lengths(v);
    const std::size_t n = v.human.size();
    if (n < 2) {
        throw ValidationError("pearson needs at least two pairs");
    }
    double mean_h = 0.0;
    double mean_p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_h += v.human[i];
        mean_p += v.predicted[i];
    }
    mean_h /= static_cast<double>(n);
    mean_p /= static_cast<double>(n);

    double cov = 0.0;
    double var_h = 0.0;
    double var_p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dh = v.human[i] - mean_h;
        const double dp = v.predicted[i] - mean_p;
        cov += dh * dp;
        var_h += dh * dh;
        var_p += dp * dp;
    }
    if (var_h == 0.0 || var_p == 0.0) {
        throw ValidationError("pearson undefined: constant score vector");
    }
    return cov / std::sqrt(var_h * var_p);
}

MetricRow compute_metrics(const ScorePairVector& v, std::vector<std::string>* notes) {
    MetricRow row;
    row.mae = mae(v);
    row.rmse = rmse(v);
    row.nrmse = nrmse(v);
    try {
        row.pearson = pearson(v);
    } catch (const ValidationError& e) {
        if (notes) notes->push_back(e.what());
    }
    return row;
}

ExperimentReport aggregate(const std::vector<RepetitionResult>& rows) {
    if (rows.empty()) {
        throw ValidationError("aggregate needs at least one repetition");
    }
    const std::string& fp = rows.front().fingerprint;
    for (const auto& r : rows) {
        if (r.fingerprint != fp) {
            throw ValidationError("cannot aggregate rows with mixed configs: '" + fp +
                                  "' vs '" + r.fingerprint + "'");
        }
    }

    ExperimentReport report;
    report.fingerprint = fp;
    report.repetitions = static_cast<int>(rows.size());
    for (const auto& r : rows) report.rows.push_back(r.row);

    const double n = static_cast<double>(rows.size());
    bool all_pearson = true;
    for (const auto& r : rows) all_pearson = all_pearson && r.row.pearson.has_value();

    auto mean_of = [&](auto get) {
        double acc = 0.0;
        for (const auto& r : rows) acc += get(r.row);
        return acc / n;
    };
    auto sd_of = [&](auto get, double mean) {
        if (rows.size() < 2) return 0.0;
        double acc = 0.0;
        for (const auto& r : rows) {
            const double d = get(r.row) - mean;
            acc += d * d;
        }
        return std::sqrt(acc / (n - 1.0));
    };

    report.mean.mae = mean_of([](const MetricRow& r) { return r.mae; });
    report.mean.rmse = mean_of([](const MetricRow& r) { return r.rmse; });
    report.mean.nrmse = mean_of([](const MetricRow& r) { return r.nrmse; });
    report.sd.mae = sd_of([](const MetricRow& r) { return r.mae; }, report.mean.mae);
    report.sd.rmse = sd_of([](const MetricRow& r) { return r.rmse; }, report.mean.rmse);
    report.sd.nrmse = sd_of([](const MetricRow& r) { return r.nrmse; }, report.mean.nrmse);
    if (all_pearson) {
        const double mp = mean_of([](const MetricRow& r) { return *r.pearson; });
        report.mean.pearson = mp;
        report.sd.pearson = sd_of([](const MetricRow& r) { return *r.pearson; }, mp);
    }
    return report;
}

std::string emit_table(const ExperimentReport& report, TableFormat format) {
    struct Line {
        const char* name;
        double MetricRow::* field;
    };
    static constexpr Line kLines[] = {
        {"MAE", &MetricRow::mae},
        {"RMSE", &MetricRow::rmse},
        {"NRMSE", &MetricRow::nrmse},
    };

    std::ostringstream out;
    if (format == TableFormat::csv) {
        out << "metric,mean,sd";
        for (int r = 1; r <= report.repetitions; ++r) out << ",r" << r;
        out << "\n";
        for (const auto& line : kLines) {
            out << line.name << "," << cell(report.mean.*line.field) << ","
                << cell(report.sd.*line.field);
            for (const auto& row : report.rows) out << "," << cell(row.*line.field);
            out << "\n";
        }
        out << "Pearson," << cell(report.mean.pearson) << "," << cell(report.sd.pearson);
        for (const auto& row : report.rows) out << "," << cell(row.pearson);
        out << "\n";
    } else {
        out << "| metric | mean | sd |";
        for (int r = 1; r <= report.repetitions; ++r) out << " r" << r << " |";
        out << "\n|---|---|---|";
        for (int r = 0; r < report.repetitions; ++r) out << "---|";
        out << "\n";
        for (const auto& line : kLines) {
            out << "| " << line.name << " | " << cell(report.mean.*line.field) << " | "
                << cell(report.sd.*line.field) << " |";
            for (const auto& row : report.rows) out << " " << cell(row.*line.field) << " |";
            out << "\n";
        }
        out << "| Pearson | " << cell(report.mean.pearson) << " | " << cell(report.sd.pearson)
            << " |";
        for (const auto& row : report.rows) out << " " << cell(row.pearson) << " |";
        out << "\n";
    }
    return out.str();
}

nlohmann::json metric_row_to_json(const MetricRow& row) {
    nlohmann::json j{{"mae", row.mae}, {"rmse", row.rmse}, {"nrmse", row.nrmse}};
    if (row.pearson) j["pearson"] = *row.pearson;
    return j;
}

MetricRow metric_row_from_json(const nlohmann::json& j) {
    MetricRow row;
    row.mae = j.at("mae").get<double>();
    row.rmse = j.at("rmse").get<double>();
    row.nrmse = j.at("nrmse").get<double>();
    if (j.contains("pearson")) row.pearson = j["pearson"].get<double>();
    return row;
}

nlohmann::json report_to_json(const ExperimentReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows) rows.push_back(metric_row_to_json(row));
    return {{"fingerprint", report.fingerprint},
            {"repetitions", report.repetitions},
            {"rows", rows},
            {"mean", metric_row_to_json(report.mean)},
            {"sd", metric_row_to_json(report.sd)}};
}

ExperimentReport report_from_json(const nlohmann::json& j) {
    ExperimentReport report;
    report.fingerprint = j.at("fingerprint").get<std::string>();
    report.repetitions = j.at("repetitions").get<int>();
    for (const auto& row : j.at("rows")) report.rows.push_back(metric_row_from_json(row));
    report.mean = metric_row_from_json(j.at("mean"));
    report.sd = metric_row_from_json(j.at("sd"));
    return report;
}

}  // namespace gradelab
