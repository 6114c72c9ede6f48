#include "anodet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "anodet/error.hpp"

namespace anodet::eval {
namespace {

struct ClassCounts {
    std::int64_t positives = 0;
    std::int64_t negatives = 0;
};

ClassCounts check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw InvalidInputError("scores and labels differ in length");
    if (scores.empty()) throw InvalidInputError("no scores given");
    ClassCounts counts;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw NumericError("non-finite score at index " + std::to_string(i));
        if (labels[i] == 1) {
            ++counts.positives;
        } else if (labels[i] == 0) {
            ++counts.negatives;
        } else {
            throw InvalidInputError("labels must be 0 or 1");
        }
    }
    if (counts.positives == 0 || counts.negatives == 0) {
        throw DegenerateInputError("both healthy and anomalous samples are required");
    }
    return counts;
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

std::string format_full(double value) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.17g", value);
    return buffer;
}

// Cumulative (tp, fp) after each group of tied scores, walking from the highest score down.
struct Step {
    double threshold;
    std::int64_t tp;
    std::int64_t fp;
};

std::vector<Step> threshold_steps(std::span<const double> scores, std::span<const int> labels) {
    const auto order = descending_order(scores);
    std::vector<Step> steps;
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double threshold = scores[order[k]];
        while (k < order.size() && scores[order[k]] == threshold) {
            if (labels[order[k]] == 1) ++tp; else ++fp;
            ++k;
        }
        steps.push_back({threshold, tp, fp});
    }
    return steps;
}

void draw_axes(cv::Mat& canvas, int margin) {
    const int w = canvas.cols;
    const int h = canvas.rows;
    cv::line(canvas, {margin, h - margin}, {w - margin, h - margin}, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::line(canvas, {margin, h - margin}, {margin, margin}, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
}

void plot_roc(const EvalReport& report, const std::filesystem::path& path) {
    constexpr int kSize = 480;
    constexpr int kMargin = 40;
    cv::Mat canvas(kSize, kSize, CV_8UC3, cv::Scalar(255, 255, 255));
    draw_axes(canvas, kMargin);
    const double span = kSize - 2 * kMargin;
    auto to_px = [&](double fpr, double tpr) {
        return cv::Point(kMargin + static_cast<int>(std::lround(fpr * span)),
                         kSize - kMargin - static_cast<int>(std::lround(tpr * span)));
    };
    cv::line(canvas, to_px(0, 0), to_px(1, 1), cv::Scalar(180, 180, 180), 1, cv::LINE_AA);
    std::vector<cv::Point> poly;
    for (const auto& p : report.roc) poly.push_back(to_px(p.fpr, p.tpr));
    cv::polylines(canvas, poly, false, cv::Scalar(200, 60, 20), 2, cv::LINE_AA);
    cv::putText(canvas, "AUC " + format_full(report.auc).substr(0, 6), {kMargin + 10, kMargin + 20},
                cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(canvas, "FPR", {kSize / 2 - 15, kSize - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1,
                cv::LINE_AA);
    cv::putText(canvas, "TPR", {4, kSize / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::imwrite(path.string(), canvas);
}

void plot_histogram(const Histogram& hist, const std::filesystem::path& path) {
    constexpr int kWidth = 640;
    constexpr int kHeight = 400;
    constexpr int kMargin = 40;
    cv::Mat canvas(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
    const std::size_t bins = hist.healthy_density.size();
    double peak = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        peak = std::max({peak, hist.healthy_density[b], hist.anomalous_density[b]});
    }
    if (peak <= 0.0) peak = 1.0;
    const double bar = static_cast<double>(kWidth - 2 * kMargin) / static_cast<double>(bins);
    auto draw_class = [&](const std::vector<double>& density, const cv::Scalar& color) {
        cv::Mat layer = canvas.clone();
        for (std::size_t b = 0; b < bins; ++b) {
            const int x0 = kMargin + static_cast<int>(std::lround(b * bar));
            const int x1 = kMargin + static_cast<int>(std::lround((b + 1) * bar));
            const int top = kHeight - kMargin - static_cast<int>(std::lround(density[b] / peak * (kHeight - 2 * kMargin)));
            cv::rectangle(layer, {x0, top}, {x1, kHeight - kMargin}, color, cv::FILLED);
        }
        cv::addWeighted(layer, 0.5, canvas, 0.5, 0.0, canvas);
    };
    draw_class(hist.healthy_density, cv::Scalar(80, 170, 40));
    draw_class(hist.anomalous_density, cv::Scalar(40, 40, 210));
    draw_axes(canvas, kMargin);
    cv::putText(canvas, "healthy", {kWidth - 150, kMargin + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(80, 170, 40), 1, cv::LINE_AA);
    cv::putText(canvas, "anomalous", {kWidth - 150, kMargin + 30}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(40, 40, 210), 1, cv::LINE_AA);
    cv::putText(canvas, format_full(hist.edges.front()).substr(0, 7), {kMargin - 10, kHeight - 15},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::putText(canvas, format_full(hist.edges.back()).substr(0, 7), {kWidth - kMargin - 40, kHeight - 15},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    cv::imwrite(path.string(), canvas);
}

}  // namespace

RocCurve roc_points(std::span<const double> scores, std::span<const int> labels) {
    const auto counts = check_inputs(scores, labels);
    const auto p = static_cast<double>(counts.positives);
    const auto n = static_cast<double>(counts.negatives);

    RocCurve curve;
    curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0, 0, 0});
    for (const auto& step : threshold_steps(scores, labels)) {
        curve.push_back(
            {step.threshold, static_cast<double>(step.fp) / n, static_cast<double>(step.tp) / p, step.fp, step.tp});
    }
    return curve;
}

double auc(const RocCurve& curve) {
    if (curve.size() < 2) throw InvalidInputError("ROC curve needs at least two points");
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
    }
    return area;
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
    const auto counts = check_inputs(scores, labels);
    // Sum of (new positives x precision), divided by P once so a perfect ranking gives exactly 1.
    long double weighted = 0.0L;
    std::int64_t previous_tp = 0;
    for (const auto& step : threshold_steps(scores, labels)) {
        if (step.tp == previous_tp) continue;
        const long double precision = static_cast<long double>(step.tp) / static_cast<long double>(step.tp + step.fp);
        weighted += static_cast<long double>(step.tp - previous_tp) * precision;
        previous_tp = step.tp;
    }
    return static_cast<double>(weighted / static_cast<long double>(counts.positives));
}

YoudenPoint youden(const RocCurve& curve) {
    if (curve.empty()) throw InvalidInputError("empty ROC curve");
    // J scaled by P*N is an exact integer, so ties are detected without rounding.
    const std::int64_t positives = curve.back().tp;
    const std::int64_t negatives = curve.back().fp;
    auto scaled_j = [&](const RocPoint& p) { return p.tp * negatives - p.fp * positives; };
    std::size_t best = 0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        // Points run from high to low thresholds, so ">=" keeps the smallest threshold among ties.
        if (scaled_j(curve[i]) >= scaled_j(curve[best])) best = i;
    }
    return {curve[best].threshold, curve[best].tpr - curve[best].fpr};
}

ThresholdStats stats_at_threshold(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw InvalidInputError("scores and labels differ in length");
    if (scores.empty()) throw InvalidInputError("no scores given");
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (labels[i] == 1) {
            predicted ? ++tp : ++fn;
        } else {
            predicted ? ++fp : ++tn;
        }
    }
    const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    const double ca = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    return {f1, ca};
}

Histogram score_histogram(std::span<const double> scores, std::span<const int> labels, int bins) {
    const auto counts = check_inputs(scores, labels);
    if (bins < 1) throw InvalidInputError("histogram needs at least one bin");
    auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    double lo = *lo_it;
    double hi = *hi_it;
    if (hi == lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    Histogram hist;
    hist.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b) hist.edges[b] = lo + (hi - lo) * b / bins;
    hist.healthy_counts.assign(bins, 0);
    hist.anomalous_counts.assign(bins, 0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        auto bin = static_cast<int>(std::floor((scores[i] - lo) / (hi - lo) * bins));
        bin = std::clamp(bin, 0, bins - 1);
        (labels[i] == 1 ? hist.anomalous_counts : hist.healthy_counts)[bin] += 1;
    }
    const double width = (hi - lo) / bins;
    hist.healthy_density.resize(bins);
    hist.anomalous_density.resize(bins);
    for (int b = 0; b < bins; ++b) {
        hist.healthy_density[b] = static_cast<double>(hist.healthy_counts[b]) / (counts.negatives * width);
        hist.anomalous_density[b] = static_cast<double>(hist.anomalous_counts[b]) / (counts.positives * width);
    }
    return hist;
}

EvalReport evaluate(std::span<const double> scores, std::span<const int> labels) {
    EvalReport report;
    report.roc = roc_points(scores, labels);
    report.auc = auc(report.roc);
    report.ap = average_precision(scores, labels);
    const auto point = youden(report.roc);
    report.youden_threshold = point.threshold;
    report.youden_j = point.j;
    const auto stats = stats_at_threshold(scores, labels, point.threshold);
    report.f1 = stats.f1;
    report.ca = stats.ca;
    for (int label : labels) (label == 1 ? report.n_anomalous : report.n_healthy) += 1;
    report.histogram = score_histogram(scores, labels);
    return report;
}

std::string format_score(double score) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.8g", score);
    return buffer;
}

void write_score_file(std::span<const ScoreRecord> records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write score file " + path.string());
    out << "patch_id,true_label,metric,score\n";
    for (const auto& r : records) {
        out << r.patch_id << ',' << (r.true_label == 1 ? "anomalous" : "healthy") << ',' << r.metric << ','
            << format_score(r.score) << '\n';
    }
}

std::vector<ScoreRecord> read_score_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read score file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "patch_id,true_label,metric,score") {
        throw FormatError("score file " + path.string() + " lacks the header 'patch_id,true_label,metric,score'");
    }
    std::vector<ScoreRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream stream(line);
        for (std::string f; std::getline(stream, f, ',');) fields.push_back(f);
        if (fields.size() != 4) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
        }
        ScoreRecord r;
        r.patch_id = fields[0];
        if (fields[1] == "anomalous" || fields[1] == "1") {
            r.true_label = 1;
        } else if (fields[1] == "healthy" || fields[1] == "0") {
            r.true_label = 0;
        } else {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unknown label '" + fields[1] + "'");
        }
        r.metric = fields[2];
        try {
            std::size_t used = 0;
            r.score = std::stod(fields[3], &used);
            if (used != fields[3].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad score '" + fields[3] + "'");
        }
        records.push_back(std::move(r));
    }
    return records;
}

EvalReport render_report(const std::filesystem::path& score_file, const std::filesystem::path& out_dir) {
    const auto records = read_score_file(score_file);
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(records.size());
    labels.reserve(records.size());
    for (const auto& r : records) {
        scores.push_back(r.score);
        labels.push_back(r.true_label);
    }
    const auto report = evaluate(scores, labels);

    std::filesystem::create_directories(out_dir);
    {
        std::ofstream out(out_dir / "report.txt", std::ios::binary | std::ios::trunc);
        out << "auc=" << format_full(report.auc) << '\n'
            << "ap=" << format_full(report.ap) << '\n'
            << "youden_threshold=" << format_full(report.youden_threshold) << '\n'
            << "youden_j=" << format_full(report.youden_j) << '\n'
            << "f1=" << format_full(report.f1) << '\n'
            << "ca=" << format_full(report.ca) << '\n'
            << "n_healthy=" << report.n_healthy << '\n'
            << "n_anomalous=" << report.n_anomalous << '\n';
    }
    {
        std::ofstream out(out_dir / "roc.csv", std::ios::binary | std::ios::trunc);
        out << "threshold,fpr,tpr\n";
        for (const auto& p : report.roc) {
            out << (std::isinf(p.threshold) ? std::string("inf") : format_full(p.threshold)) << ','
                << format_full(p.fpr) << ',' << format_full(p.tpr) << '\n';
        }
    }
    {
        std::ofstream out(out_dir / "histogram.csv", std::ios::binary | std::ios::trunc);
        out << "bin_lo,bin_hi,healthy_count,anomalous_count,healthy_density,anomalous_density\n";
        const auto& h = report.histogram;
        for (std::size_t b = 0; b < h.healthy_counts.size(); ++b) {
            out << format_full(h.edges[b]) << ',' << format_full(h.edges[b + 1]) << ',' << h.healthy_counts[b] << ','
                << h.anomalous_counts[b] << ',' << format_full(h.healthy_density[b]) << ','
                << format_full(h.anomalous_density[b]) << '\n';
        }
    }
    plot_roc(report, out_dir / "roc.png");
    plot_histogram(report.histogram, out_dir / "histogram.png");
    return report;
}

}  // namespace anodet::eval
