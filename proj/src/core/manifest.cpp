#include "anodet/manifest.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include "anodet/error.hpp"
#include "anodet/patch_pipeline.hpp"

namespace anodet {
namespace {

constexpr std::string_view kHeader =
    "patch_id,slide_id,row,col,size,tissue_coverage,lesion_coverage,label,domain,split";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream stream(line);
    while (std::getline(stream, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

template <typename T>
T parse_number(const std::string& text, const char* what) {
    T value{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw FormatError(std::string("cannot parse ") + what + " from '" + text + "'");
    }
    return value;
}

double parse_double(const std::string& text, const char* what) {
    try {
        std::size_t used = 0;
        const double value = std::stod(text, &used);
        if (used != text.size()) throw FormatError("");
        return value;
    } catch (const std::exception&) {
        throw FormatError(std::string("cannot parse ") + what + " from '" + text + "'");
    }
}

std::string format_double(double value) {
    char buffer[64];
    std::snprintf(buffer, sizeof buffer, "%.17g", value);
    return buffer;
}

}  // namespace

std::string_view to_string(Label label) {
    switch (label) {
        case Label::Healthy: return "healthy";
        case Label::Anomalous: return "anomalous";
        case Label::Ambiguous: return "ambiguous";
    }
    return "ambiguous";
}

std::string_view to_string(Domain domain) {
    switch (domain) {
        case Domain::X: return "X";
        case Domain::Y: return "Y";
        case Domain::None: return "none";
    }
    return "none";
}

std::string_view to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Label parse_label(std::string_view text) {
    if (text == "healthy") return Label::Healthy;
    if (text == "anomalous") return Label::Anomalous;
    if (text == "ambiguous") return Label::Ambiguous;
    throw FormatError("unknown label '" + std::string(text) + "'");
}

Domain parse_domain(std::string_view text) {
    if (text == "X") return Domain::X;
    if (text == "Y") return Domain::Y;
    if (text == "none") return Domain::None;
    throw FormatError("unknown domain '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::Train;
    if (text == "test") return Split::Test;
    throw FormatError("unknown split '" + std::string(text) + "'");
}

std::string format_coverage(double value) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.6f", value);
    return buffer;
}

void Manifest::validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& record : records) {
        if (!seen.insert(record.patch_id).second) {
            throw InvalidInputError("duplicate patch id '" + record.patch_id + "'");
        }
        if (record.patch_id.find(',') != std::string::npos || record.slide_id.find(',') != std::string::npos) {
            throw InvalidInputError("ids must not contain commas: '" + record.patch_id + "'");
        }
        const Label expected =
            classify_patch(record.tissue_coverage, record.lesion_coverage, fingerprint.thresholds);
        if (expected != record.label) {
            throw InvalidInputError("label of '" + record.patch_id + "' is " + std::string(to_string(record.label)) +
                                    " but thresholds give " + std::string(to_string(expected)));
        }
        if (record.domain != Domain::None &&
            (record.label != Label::Healthy || record.split != Split::Train)) {
            throw InvalidInputError("domain assigned to non-healthy or test record '" + record.patch_id + "'");
        }
    }
}

std::filesystem::path fingerprint_path(const std::filesystem::path& csv_path) {
    auto path = csv_path;
    path.replace_extension(".fingerprint");
    return path;
}

std::filesystem::path patch_file(const std::filesystem::path& csv_path, const std::string& patch_id) {
    return csv_path.parent_path() / (patch_id + ".png");
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& csv_path) {
    manifest.validate();
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());

    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw FormatError("cannot write " + csv_path.string());
    csv << kHeader << '\n';
    for (const auto& r : manifest.records) {
        csv << r.patch_id << ',' << r.slide_id << ',' << r.row << ',' << r.col << ',' << r.size << ','
            << format_coverage(r.tissue_coverage) << ',' << format_coverage(r.lesion_coverage) << ','
            << to_string(r.label) << ',' << to_string(r.domain) << ',' << to_string(r.split) << '\n';
    }

    std::ofstream meta(fingerprint_path(csv_path), std::ios::binary | std::ios::trunc);
    if (!meta) throw FormatError("cannot write " + fingerprint_path(csv_path).string());
    const auto& fp = manifest.fingerprint;
    meta << "tissue_min=" << format_double(fp.thresholds.tissue_min) << '\n'
         << "lesion_healthy_max=" << format_double(fp.thresholds.lesion_healthy_max) << '\n'
         << "lesion_anomalous_min=" << format_double(fp.thresholds.lesion_anomalous_min) << '\n'
         << "patch_size=" << fp.patch_size << '\n'
         << "seed=" << fp.seed << '\n';
}

Manifest read_manifest(const std::filesystem::path& csv_path) {
    std::ifstream csv(csv_path, std::ios::binary);
    if (!csv) throw FormatError("cannot read manifest " + csv_path.string());

    Manifest manifest;
    std::string line;
    if (!std::getline(csv, line) || line != kHeader) {
        throw FormatError("manifest " + csv_path.string() + " has an unexpected header");
    }
    std::size_t line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 10) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": expected 10 fields");
        }
        PatchRecord r;
        r.patch_id = fields[0];
        r.slide_id = fields[1];
        r.row = parse_number<std::int64_t>(fields[2], "row");
        r.col = parse_number<std::int64_t>(fields[3], "col");
        r.size = parse_number<std::int64_t>(fields[4], "size");
        r.tissue_coverage = parse_double(fields[5], "tissue_coverage");
        r.lesion_coverage = parse_double(fields[6], "lesion_coverage");
        r.label = parse_label(fields[7]);
        r.domain = parse_domain(fields[8]);
        r.split = parse_split(fields[9]);
        manifest.records.push_back(std::move(r));
    }

    std::ifstream meta(fingerprint_path(csv_path));
    if (meta) {
        std::map<std::string, std::string> kv;
        while (std::getline(meta, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        auto& fp = manifest.fingerprint;
        if (kv.count("tissue_min")) fp.thresholds.tissue_min = parse_double(kv["tissue_min"], "tissue_min");
        if (kv.count("lesion_healthy_max"))
            fp.thresholds.lesion_healthy_max = parse_double(kv["lesion_healthy_max"], "lesion_healthy_max");
        if (kv.count("lesion_anomalous_min"))
            fp.thresholds.lesion_anomalous_min = parse_double(kv["lesion_anomalous_min"], "lesion_anomalous_min");
        if (kv.count("patch_size")) fp.patch_size = parse_number<std::int64_t>(kv["patch_size"], "patch_size");
        if (kv.count("seed")) fp.seed = parse_number<std::uint64_t>(kv["seed"], "seed");
    }
    manifest.validate();
    return manifest;
}

}  // namespace anodet
