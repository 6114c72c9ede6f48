#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "anodet/manifest.hpp"

namespace anodet {

/// A source raster plus its optional lesion annotation.
///
/// `pixels` is 8-bit RGB (CV_8UC3, channel order R,G,B). `lesion_mask`, when
/// present, is CV_8UC1 with nonzero meaning lesion and matches `pixels` in size.
struct SlideImage {
    std::string id;
    cv::Mat pixels;
    std::optional<cv::Mat> lesion_mask;
};

/// HSV background filter followed by morphological cleanup.
struct FilterParams {
    double saturation_threshold = 0.08;
    double value_threshold = 0.82;
    int closing_radius = 4;
    int min_object_pixels = 64;
};

struct Window {
    std::int64_t row = 0;
    std::int64_t col = 0;
    std::int64_t size = 0;
};

struct ExtractConfig {
    std::int64_t patch_size = 512;
    /// 0 means non-overlapping tiling (stride equal to patch size).
    std::int64_t stride = 0;
    bool keep_ambiguous = false;
    ThresholdConfig thresholds;
    Split split = Split::Train;
};

/// Reporting bands used when summarizing coverage (high / in-between / low).
enum class CoverageBand { High, Middle, Low };

/// Binary CV_8UC1 mask, 1 = tissue. Background is near-white and unsaturated.
cv::Mat compute_tissue_mask(const SlideImage& slide, const FilterParams& params = {});

/// Fraction of nonzero pixels of `mask` inside `window`.
double coverage_fraction(const cv::Mat& mask, const Window& window);

Label classify_patch(double tissue_coverage, double lesion_coverage, const ThresholdConfig& thresholds);

CoverageBand coverage_band(double fraction, double low, double high);

std::vector<PatchRecord> extract_patches(const SlideImage& slide, const cv::Mat& tissue_mask,
                                         const ExtractConfig& cfg);

/// Keeps at most `max_count` train records of the healthy pool, chosen uniformly
/// without replacement; other records and original order are preserved.
std::vector<PatchRecord> sample_healthy_train(std::vector<PatchRecord> records, std::size_t max_count,
                                              std::uint64_t seed);

/// Assigns every healthy training record to domain X or Y by a seeded random
/// balanced partition. All other records get Domain::None.
Manifest split_domains(Manifest manifest, std::uint64_t seed);

/// Pixel window of a patch as an owned RGB raster.
cv::Mat crop_patch(const SlideImage& slide, const PatchRecord& record);

}  // namespace anodet
