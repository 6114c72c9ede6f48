#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "anodet/evaluation.hpp"
#include "anodet/manifest.hpp"
#include "anodet/translator.hpp"

namespace anodet::scoring {

struct SsimParams {
    std::int64_t window = 11;
    double sigma = 1.5;
    double data_range = 2.0;
    double k1 = 0.01;
    double k2 = 0.03;
};

/// Mean SSIM over all valid Gaussian windows and channels, computed in double
/// precision. Inputs are (C,H,W) or (N,C,H,W) of identical shape.
double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params = {});

struct PerceptualConfig {
    std::int64_t base_channels = 16;
    std::int64_t stages = 5;
    std::uint64_t seed = 0;

    /// Channel count of stage `i`: c, 2c, 4c, 4c, ...
    std::int64_t channels(std::int64_t stage) const;
    std::string fingerprint() const;
    static PerceptualConfig from_fingerprint(const std::string& text);
    bool operator==(const PerceptualConfig&) const = default;
};

/// Fixed convolutional feature pyramid: per stage a 3x3 convolution and ReLU,
/// 2x2 average pooling between stages. Weights are drawn from a seeded
/// generator unless loaded from a file; per-channel distance weights default to 1.
class PerceptualExtractor {
public:
    explicit PerceptualExtractor(PerceptualConfig cfg = {});

    const PerceptualConfig& config() const { return cfg_; }
    /// Unit-normalized (over channels) features of every stage for a (3,H,W) or (N,3,H,W) image.
    std::vector<torch::Tensor> features(const torch::Tensor& image) const;
    /// Sum over stages of the spatial mean of channel-weighted squared
    /// differences between unit-normalized features.
    double distance(const torch::Tensor& a, const torch::Tensor& b) const;

    void save(const std::filesystem::path& path) const;
    static PerceptualExtractor load(const std::filesystem::path& path);

    std::vector<torch::Tensor>& conv_weights() { return weights_; }
    std::vector<torch::Tensor>& layer_weights() { return layer_weights_; }

private:
    PerceptualConfig cfg_;
    std::vector<torch::Tensor> weights_;
    std::vector<torch::Tensor> biases_;
    std::vector<torch::Tensor> layer_weights_;
};

double perceptual_distance(const torch::Tensor& a, const torch::Tensor& b, const PerceptualExtractor& extractor);

enum class Metric { Ssim, Perceptual };
std::string_view to_string(Metric metric);
/// Throws InvalidInputError for anything but "ssim" or "perceptual".
Metric parse_metric(std::string_view text);

/// Example-guided single-pass reconstruction:
/// G_target(E_c,source(x), E_s,target(x)). No randomness.
torch::Tensor reconstruct(nn::Translator& model, const torch::Tensor& image, Domain source = Domain::X,
                          Domain target = Domain::Y);

struct Reconstruction {
    torch::Tensor query;
    torch::Tensor reconstruction;
    Metric metric = Metric::Ssim;
    double score = 0.0;
};

/// Score of an image against a reconstruction: 1 - ssim or the perceptual distance.
double image_score(const torch::Tensor& image, const torch::Tensor& reconstruction, Metric metric,
                   const PerceptualExtractor* extractor = nullptr);

class Scorer {
public:
    Scorer(nn::Translator model, Metric metric, std::shared_ptr<const PerceptualExtractor> extractor = nullptr,
           Domain source = Domain::X, Domain target = Domain::Y);

    Reconstruction run(const torch::Tensor& image) const;
    double score(const torch::Tensor& image) const { return run(image).score; }
    Metric metric() const { return metric_; }

private:
    nn::Translator model_;
    Metric metric_;
    std::shared_ptr<const PerceptualExtractor> extractor_;
    Domain source_;
    Domain target_;
};

struct ScoreError {
    std::string patch_id;
    std::string message;
};

struct ScoreRun {
    std::vector<eval::ScoreRecord> records;
    std::vector<ScoreError> errors;
};

struct ScoreOptions {
    std::size_t jobs = 1;
    /// When set, `<dir>/<patch_id>.png` holds the query and its reconstruction side by side.
    std::optional<std::filesystem::path> dump_dir;
};

/// Test records of the manifest with a healthy or anomalous label, in manifest order.
std::vector<PatchRecord> scorable_records(const Manifest& manifest);

/// Scores every scorable record of the manifest at `csv_path`; patch pixels
/// are read from beside the manifest. Records keep manifest order for any
/// number of jobs; unreadable patches become error entries.
ScoreRun score_manifest(const Manifest& manifest, const std::filesystem::path& csv_path, const Scorer& scorer,
                        const ScoreOptions& options = {});

/// `patch_id,message` rows.
void write_score_errors(const std::vector<ScoreError>& errors, const std::filesystem::path& path);

}  // namespace anodet::scoring
