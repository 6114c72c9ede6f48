#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace anodet::eval {

/// One operating point. Points are ordered by descending threshold, from
/// (0,0) at threshold +inf to (1,1) at the smallest observed score.
struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
    std::int64_t fp = 0;
    std::int64_t tp = 0;
};

using RocCurve = std::vector<RocPoint>;

struct YoudenPoint {
    double threshold;
    double j;
};

struct ThresholdStats {
    double f1;
    double ca;
};

/// Per-class score histogram over shared bin edges.
struct Histogram {
    std::vector<double> edges;  // bins + 1 entries
    std::vector<std::int64_t> healthy_counts;
    std::vector<std::int64_t> anomalous_counts;
    std::vector<double> healthy_density;
    std::vector<double> anomalous_density;
};

struct EvalReport {
    double auc = 0.0;
    double ap = 0.0;
    double youden_threshold = 0.0;
    double youden_j = 0.0;
    double f1 = 0.0;
    double ca = 0.0;
    std::int64_t n_healthy = 0;
    std::int64_t n_anomalous = 0;
    RocCurve roc;
    Histogram histogram;
};

/// Labels: 1 = anomalous (positive), 0 = healthy. Higher score = more anomalous.
RocCurve roc_points(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under the curve.
double auc(const RocCurve& curve);

double average_precision(std::span<const double> scores, std::span<const int> labels);

/// Maximum of TPR - FPR; among equal maxima the smallest threshold wins.
YoudenPoint youden(const RocCurve& curve);

/// Predicts anomalous iff score >= threshold.
ThresholdStats stats_at_threshold(std::span<const double> scores, std::span<const int> labels, double threshold);

Histogram score_histogram(std::span<const double> scores, std::span<const int> labels, int bins = 50);

EvalReport evaluate(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Score files: CSV `patch_id,true_label,metric,score`.

struct ScoreRecord {
    std::string patch_id;
    int true_label = 0;  // 1 = anomalous
    std::string metric;
    double score = 0.0;
};

void write_score_file(std::span<const ScoreRecord> records, const std::filesystem::path& path);
std::vector<ScoreRecord> read_score_file(const std::filesystem::path& path);

/// Eight significant digits, as written to score files.
std::string format_score(double score);

/// Reads a score file and writes report.txt, roc.csv, histogram.csv, roc.png
/// and histogram.png into `out_dir`.
EvalReport render_report(const std::filesystem::path& score_file, const std::filesystem::path& out_dir);

}  // namespace anodet::eval
