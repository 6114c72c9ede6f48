#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>

#include "anodet/evaluation.hpp"
#include "anodet/manifest.hpp"

namespace anodet::synth {

using Rgb = std::array<float, 3>;

/// Parameters of the synthetic two-domain texture benchmark. Colors are RGB in [0,1].
struct SynthConfig {
    std::uint64_t seed = 0;
    std::int64_t n_train = 2000;
    std::int64_t n_test = 200;
    std::int64_t size = 64;
    double f_lo = 0.15;
    double f_hi = 0.35;
    std::int64_t base_frequency = 4;
    std::int64_t octaves = 2;
    Rgb healthy_low{0.93f, 0.62f, 0.80f};
    Rgb healthy_high{0.58f, 0.32f, 0.66f};
    Rgb anomaly_low{0.30f, 0.22f, 0.58f};
    Rgb anomaly_high{0.10f, 0.06f, 0.30f};
    std::int64_t anomaly_frequency = 16;
    /// Added to red and subtracted from blue for domain Y.
    double tint_delta = 0.06;

    /// Throws InvalidInputError unless 0 < f_lo <= f_hi < 1, size >= 32 and counts are positive.
    void validate() const;
};

/// Multi-octave value-noise texture in the healthy palette, CV_32FC3 RGB in
/// [-1,1]. A pure function of (seed, index, domain).
cv::Mat gen_healthy(const SynthConfig& cfg, std::int64_t index, Domain domain = Domain::X);

struct AnomalousSample {
    cv::Mat image;
    /// CV_8UC1, 255 inside the inserted region.
    cv::Mat mask;
    double fraction = 0.0;
};

/// gen_healthy with a wobbly blob of high-frequency texture in the anomaly
/// palette. The blob's area fraction lies in [f_lo, f_hi]; pixels outside the
/// mask equal the healthy image.
AnomalousSample gen_anomalous(const SynthConfig& cfg, std::int64_t index, Domain domain = Domain::X);

/// Writes `<out_dir>/manifest.csv` with train_x_*, train_y_*, test_h_* and
/// test_a_* patches plus `<id>_mask.png` for every test patch. Returns the manifest.
Manifest write_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir, std::size_t jobs = 1);

/// Mask-area scores of the manifest's test patches (metric "oracle").
std::vector<eval::ScoreRecord> oracle_scores(const Manifest& manifest, const std::filesystem::path& csv_path);

std::filesystem::path mask_file(const std::filesystem::path& csv_path, const std::string& patch_id);

/// CV_32FC3 in [-1,1] -> CV_8UC3 with round((v + 1) * 127.5).
cv::Mat quantize(const cv::Mat& image);

}  // namespace anodet::synth
