#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace anodet {

enum class Label { Healthy, Anomalous, Ambiguous };
enum class Domain { X, Y, None };
enum class Split { Train, Test };

std::string_view to_string(Label label);
std::string_view to_string(Domain domain);
std::string_view to_string(Split split);

Label parse_label(std::string_view text);
Domain parse_domain(std::string_view text);
Split parse_split(std::string_view text);

/// Coverage cut-offs that turn (tissue, lesion) fractions into a label.
struct ThresholdConfig {
    double tissue_min = 0.90;
    /// Largest lesion fraction still accepted into the healthy pool.
    double lesion_healthy_max = 0.0;
    double lesion_anomalous_min = 0.90;
};

struct PatchRecord {
    std::string patch_id;
    std::string slide_id;
    std::int64_t row = 0;
    std::int64_t col = 0;
    std::int64_t size = 0;
    double tissue_coverage = 0.0;
    double lesion_coverage = 0.0;
    Label label = Label::Ambiguous;
    Domain domain = Domain::None;
    Split split = Split::Train;

    bool operator==(const PatchRecord&) const = default;
};

/// Settings a manifest was produced with; stored next to the CSV.
struct ManifestFingerprint {
    ThresholdConfig thresholds;
    std::int64_t patch_size = 0;
    std::uint64_t seed = 0;
};

struct Manifest {
    std::vector<PatchRecord> records;
    ManifestFingerprint fingerprint;

    /// Throws InvalidInputError on duplicate ids or labels that disagree with the thresholds.
    void validate() const;
};

/// Writes `<dir>/manifest.csv` and `<dir>/manifest.fingerprint`.
void write_manifest(const Manifest& manifest, const std::filesystem::path& csv_path);
Manifest read_manifest(const std::filesystem::path& csv_path);

std::filesystem::path fingerprint_path(const std::filesystem::path& csv_path);

/// Location of a patch's pixel file, which lives beside the manifest.
std::filesystem::path patch_file(const std::filesystem::path& csv_path, const std::string& patch_id);

/// Formats a coverage value with six decimals, as stored in the manifest.
std::string format_coverage(double value);

}  // namespace anodet
