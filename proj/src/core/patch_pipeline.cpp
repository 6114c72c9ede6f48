#include "anodet/patch_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "anodet/error.hpp"
#include "anodet/rng.hpp"

namespace anodet {
namespace {

void check_fraction(double value, const char* name) {
    if (!(value >= 0.0 && value <= 1.0)) {
        throw InvalidInputError(std::string(name) + " must lie in [0,1], got " + std::to_string(value));
    }
}

// Coverages are stored with six decimals; labels are derived from the stored value.
double quantize_coverage(double value) { return std::round(value * 1e6) / 1e6; }

void remove_small_objects(cv::Mat& mask, int min_pixels) {
    if (min_pixels <= 1) return;
    cv::Mat labels, stats, centroids;
    const int count = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8, CV_32S);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(count), 0);
    for (int i = 1; i < count; ++i) keep[i] = stats.at<int>(i, cv::CC_STAT_AREA) >= min_pixels ? 1 : 0;
    for (int r = 0; r < mask.rows; ++r) {
        auto* out = mask.ptr<std::uint8_t>(r);
        const auto* lab = labels.ptr<int>(r);
        for (int c = 0; c < mask.cols; ++c) out[c] = keep[lab[c]];
    }
}

}  // namespace

cv::Mat compute_tissue_mask(const SlideImage& slide, const FilterParams& params) {
    if (slide.pixels.empty()) throw InvalidInputError("slide '" + slide.id + "' has an empty raster");
    if (slide.pixels.type() != CV_8UC3) throw InvalidInputError("slide raster must be 8-bit RGB");

    cv::Mat mask(slide.pixels.size(), CV_8UC1);
    for (int r = 0; r < slide.pixels.rows; ++r) {
        const auto* px = slide.pixels.ptr<cv::Vec3b>(r);
        auto* out = mask.ptr<std::uint8_t>(r);
        for (int c = 0; c < slide.pixels.cols; ++c) {
            const int hi = std::max({px[c][0], px[c][1], px[c][2]});
            const int lo = std::min({px[c][0], px[c][1], px[c][2]});
            const double value = hi / 255.0;
            const double saturation = hi == 0 ? 0.0 : static_cast<double>(hi - lo) / hi;
            const bool background = value >= params.value_threshold && saturation < params.saturation_threshold;
            out[c] = background ? 0 : 1;
        }
    }

    if (params.closing_radius > 0) {
        const int side = 2 * params.closing_radius + 1;
        const cv::Mat kernel = cv::getStructuringElement(cv::MORPH_ELLIPSE, {side, side});
        cv::morphologyEx(mask, mask, cv::MORPH_CLOSE, kernel);
    }
    remove_small_objects(mask, params.min_object_pixels);
    return mask;
}

double coverage_fraction(const cv::Mat& mask, const Window& window) {
    if (window.size <= 0 || window.row < 0 || window.col < 0 || window.row + window.size > mask.rows ||
        window.col + window.size > mask.cols) {
        throw BoundsError("window (" + std::to_string(window.row) + "," + std::to_string(window.col) + ") size " +
                          std::to_string(window.size) + " exceeds mask " + std::to_string(mask.rows) + "x" +
                          std::to_string(mask.cols));
    }
    const cv::Rect rect(static_cast<int>(window.col), static_cast<int>(window.row), static_cast<int>(window.size),
                        static_cast<int>(window.size));
    const auto hits = cv::countNonZero(mask(rect));
    return static_cast<double>(hits) / static_cast<double>(window.size * window.size);
}

Label classify_patch(double tissue_coverage, double lesion_coverage, const ThresholdConfig& thresholds) {
    check_fraction(tissue_coverage, "tissue coverage");
    check_fraction(lesion_coverage, "lesion coverage");
    if (tissue_coverage < thresholds.tissue_min) return Label::Ambiguous;
    if (lesion_coverage <= thresholds.lesion_healthy_max) return Label::Healthy;
    if (lesion_coverage >= thresholds.lesion_anomalous_min) return Label::Anomalous;
    return Label::Ambiguous;
}

CoverageBand coverage_band(double fraction, double low, double high) {
    check_fraction(fraction, "coverage");
    if (fraction >= high) return CoverageBand::High;
    if (fraction <= low) return CoverageBand::Low;
    return CoverageBand::Middle;
}

std::vector<PatchRecord> extract_patches(const SlideImage& slide, const cv::Mat& tissue_mask,
                                         const ExtractConfig& cfg) {
    if (cfg.patch_size < 1) throw InvalidInputError("patch size must be positive");
    if (tissue_mask.size() != slide.pixels.size()) throw ShapeError("tissue mask is not aligned to the slide");
    if (slide.lesion_mask && slide.lesion_mask->size() != slide.pixels.size()) {
        throw ShapeError("lesion mask is not aligned to the slide");
    }
    const std::int64_t stride = cfg.stride > 0 ? cfg.stride : cfg.patch_size;
    const std::int64_t rows = slide.pixels.rows;
    const std::int64_t cols = slide.pixels.cols;

    std::vector<PatchRecord> records;
    for (std::int64_t r = 0; r + cfg.patch_size <= rows; r += stride) {
        for (std::int64_t c = 0; c + cfg.patch_size <= cols; c += stride) {
            const Window window{r, c, cfg.patch_size};
            PatchRecord record;
            record.patch_id = slide.id + "_r" + std::to_string(r) + "_c" + std::to_string(c);
            record.slide_id = slide.id;
            record.row = r;
            record.col = c;
            record.size = cfg.patch_size;
            record.tissue_coverage = quantize_coverage(coverage_fraction(tissue_mask, window));
            record.lesion_coverage =
                slide.lesion_mask ? quantize_coverage(coverage_fraction(*slide.lesion_mask, window)) : 0.0;
            record.label = classify_patch(record.tissue_coverage, record.lesion_coverage, cfg.thresholds);
            record.split = cfg.split;
            if (record.label == Label::Ambiguous && !cfg.keep_ambiguous) continue;
            records.push_back(std::move(record));
        }
    }
    return records;
}

std::vector<PatchRecord> sample_healthy_train(std::vector<PatchRecord> records, std::size_t max_count,
                                              std::uint64_t seed) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].label == Label::Healthy && records[i].split == Split::Train) pool.push_back(i);
    }
    if (pool.size() <= max_count) return records;

    std::mt19937_64 rng(seed);
    portable_shuffle(pool, rng);
    std::vector<bool> drop(records.size(), false);
    for (std::size_t k = max_count; k < pool.size(); ++k) drop[pool[k]] = true;

    std::vector<PatchRecord> kept;
    kept.reserve(records.size() - (pool.size() - max_count));
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!drop[i]) kept.push_back(std::move(records[i]));
    }
    return kept;
}

Manifest split_domains(Manifest manifest, std::uint64_t seed) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        auto& record = manifest.records[i];
        record.domain = Domain::None;
        if (record.label == Label::Healthy && record.split == Split::Train) pool.push_back(i);
    }
    if (pool.size() < 2) {
        throw InsufficientDataError("need at least 2 healthy training patches to form two domains, have " +
                                    std::to_string(pool.size()));
    }
    std::mt19937_64 rng(seed);
    portable_shuffle(pool, rng);
    const std::size_t half = (pool.size() + 1) / 2;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        manifest.records[pool[k]].domain = k < half ? Domain::X : Domain::Y;
    }
    manifest.fingerprint.seed = seed;
    return manifest;
}

cv::Mat crop_patch(const SlideImage& slide, const PatchRecord& record) {
    const cv::Rect rect(static_cast<int>(record.col), static_cast<int>(record.row), static_cast<int>(record.size),
                        static_cast<int>(record.size));
    if ((rect & cv::Rect(0, 0, slide.pixels.cols, slide.pixels.rows)) != rect) {
        throw BoundsError("patch '" + record.patch_id + "' lies outside its slide");
    }
    return slide.pixels(rect).clone();
}

}  // namespace anodet
