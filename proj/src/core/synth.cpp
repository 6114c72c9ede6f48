#include "anodet/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numbers>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "anodet/error.hpp"

namespace anodet::synth {
namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t hash(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (auto p : parts) h = splitmix(h ^ splitmix(p));
    return h;
}

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

enum Salt : std::uint64_t { kTexture = 1, kJitter = 2, kBlob = 3, kAnomalyTexture = 4 };

double smoothstep(double t) { return t * t * (3 - 2 * t); }

/// Value noise in [0,1] summed over octaves with halving amplitude.
cv::Mat value_noise(std::int64_t size, std::int64_t base_frequency, std::int64_t octaves, std::uint64_t key) {
    cv::Mat out = cv::Mat::zeros(static_cast<int>(size), static_cast<int>(size), CV_64F);
    double amplitude = 1.0, total = 0.0;
    for (std::int64_t o = 0; o < octaves; ++o) {
        const std::int64_t freq = base_frequency << o;
        std::vector<double> lattice(static_cast<std::size_t>((freq + 1) * (freq + 1)));
        for (std::size_t i = 0; i < lattice.size(); ++i) lattice[i] = unit(hash({key, static_cast<std::uint64_t>(o), i}));
        for (int r = 0; r < out.rows; ++r) {
            const double fy = (r + 0.5) / static_cast<double>(size) * static_cast<double>(freq);
            const auto y0 = static_cast<std::int64_t>(fy);
            const double ty = smoothstep(fy - static_cast<double>(y0));
            auto* row = out.ptr<double>(r);
            for (int c = 0; c < out.cols; ++c) {
                const double fx = (c + 0.5) / static_cast<double>(size) * static_cast<double>(freq);
                const auto x0 = static_cast<std::int64_t>(fx);
                const double tx = smoothstep(fx - static_cast<double>(x0));
                auto at = [&](std::int64_t y, std::int64_t x) { return lattice[static_cast<std::size_t>(y * (freq + 1) + x)]; };
                const double top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
                const double bottom = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
                row[c] += amplitude * (top + (bottom - top) * ty);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
    }
    return out / total;
}

/// Maps noise in [0,1] through a two-color palette plus an RGB offset, to [-1,1].
cv::Mat colorize(const cv::Mat& noise, const Rgb& low, const Rgb& high, const std::array<double, 3>& offset) {
    cv::Mat out(noise.size(), CV_32FC3);
    for (int r = 0; r < noise.rows; ++r) {
        const auto* n = noise.ptr<double>(r);
        auto* px = out.ptr<cv::Vec3f>(r);
        for (int c = 0; c < noise.cols; ++c) {
            for (int k = 0; k < 3; ++k) {
                const double v = low[k] + (high[k] - low[k]) * n[c] + offset[k];
                px[c][k] = static_cast<float>(std::clamp(v, 0.0, 1.0) * 2.0 - 1.0);
            }
        }
    }
    return out;
}

struct Blob {
    double cy, cx;
    double a1, a2, p1, p2;
};

double blob_radius(const Blob& b, double theta, double base) {
    return base * (1.0 + b.a1 * std::sin(3 * theta + b.p1) + b.a2 * std::sin(5 * theta + b.p2));
}

/// Inside-ness weight: 0 outside, ramping to 1 over 1.5 px inside the boundary.
cv::Mat blob_alpha(const Blob& b, double base, std::int64_t size) {
    cv::Mat alpha(static_cast<int>(size), static_cast<int>(size), CV_64F);
    for (int r = 0; r < alpha.rows; ++r) {
        auto* row = alpha.ptr<double>(r);
        for (int c = 0; c < alpha.cols; ++c) {
            const double dy = r + 0.5 - b.cy, dx = c + 0.5 - b.cx;
            const double d = std::hypot(dy, dx);
            const double edge = blob_radius(b, std::atan2(dy, dx), base);
            row[c] = d < edge ? std::min(1.0, (edge - d) / 1.5 + 1e-3) : 0.0;
        }
    }
    return alpha;
}

double inside_fraction(const cv::Mat& alpha) {
    return static_cast<double>(cv::countNonZero(alpha > 0)) / static_cast<double>(alpha.total());
}

std::string numbered(const char* prefix, std::int64_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05lld", prefix, static_cast<long long>(i));
    return buf;
}

void write_png(const std::filesystem::path& path, const cv::Mat& rgb_or_gray) {
    cv::Mat out = rgb_or_gray;
    if (out.channels() == 3) cv::cvtColor(rgb_or_gray, out, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), out)) throw Error("cannot write " + path.string());
}

}  // namespace

void SynthConfig::validate() const {
    if (!(f_lo > 0.0 && f_lo <= f_hi && f_hi < 1.0)) throw InvalidInputError("synth: need 0 < f_lo <= f_hi < 1");
    if (size < 32) throw InvalidInputError("synth: patch size must be at least 32");
    if (n_train <= 0 || n_test <= 0) throw InvalidInputError("synth: sample counts must be positive");
    if (base_frequency <= 0 || octaves <= 0 || anomaly_frequency <= 0) {
        throw InvalidInputError("synth: texture frequencies and octave count must be positive");
    }
}

cv::Mat gen_healthy(const SynthConfig& cfg, std::int64_t index, Domain domain) {
    const auto d = static_cast<std::uint64_t>(domain == Domain::Y ? 1 : 0);
    const auto idx = static_cast<std::uint64_t>(index);
    const auto noise = value_noise(cfg.size, cfg.base_frequency, cfg.octaves, hash({cfg.seed, idx, d, kTexture}));
    const double jitter = (unit(hash({cfg.seed, idx, d, kJitter})) - 0.5) * 0.06;
    const double tint = d == 1 ? cfg.tint_delta : 0.0;
    return colorize(noise, cfg.healthy_low, cfg.healthy_high, {jitter + tint, jitter, jitter - tint});
}

AnomalousSample gen_anomalous(const SynthConfig& cfg, std::int64_t index, Domain domain) {
    const auto d = static_cast<std::uint64_t>(domain == Domain::Y ? 1 : 0);
    const auto idx = static_cast<std::uint64_t>(index);
    auto draw = [&](std::uint64_t k) { return unit(hash({cfg.seed, idx, d, kBlob, k})); };
    const auto size = static_cast<double>(cfg.size);
    const double two_pi = 2 * std::numbers::pi;
    const Blob blob{size * (0.35 + 0.3 * draw(0)), size * (0.35 + 0.3 * draw(1)), 0.15 * draw(2), 0.08 * draw(3),
                    two_pi * draw(4), two_pi * draw(5)};
    const double target = cfg.f_lo + (cfg.f_hi - cfg.f_lo) * draw(6);

    // The covered area grows monotonically with the base radius.
    double lo = 0.0, hi = size;
    cv::Mat alpha;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (inside_fraction(blob_alpha(blob, mid, cfg.size)) < target ? lo : hi) = mid;
    }
    alpha = blob_alpha(blob, hi, cfg.size);
    double fraction = inside_fraction(alpha);
    if (fraction < cfg.f_lo || fraction > cfg.f_hi) {
        alpha = blob_alpha(blob, lo, cfg.size);
        fraction = inside_fraction(alpha);
    }
    if (fraction < cfg.f_lo || fraction > cfg.f_hi) {
        throw Error("synth: cannot place an anomaly with area fraction in range for index " + std::to_string(index));
    }

    AnomalousSample out;
    out.fraction = fraction;
    out.image = gen_healthy(cfg, index, domain);
    const auto noise = value_noise(cfg.size, cfg.anomaly_frequency, 1, hash({cfg.seed, idx, d, kAnomalyTexture}));
    const auto texture = colorize(noise, cfg.anomaly_low, cfg.anomaly_high, {0.0, 0.0, 0.0});
    out.mask = cv::Mat::zeros(out.image.size(), CV_8UC1);
    for (int r = 0; r < alpha.rows; ++r) {
        const auto* a = alpha.ptr<double>(r);
        const auto* t = texture.ptr<cv::Vec3f>(r);
        auto* px = out.image.ptr<cv::Vec3f>(r);
        auto* m = out.mask.ptr<std::uint8_t>(r);
        for (int c = 0; c < alpha.cols; ++c) {
            if (a[c] <= 0.0) continue;
            m[c] = 255;
            for (int k = 0; k < 3; ++k) px[c][k] = static_cast<float>((1 - a[c]) * px[c][k] + a[c] * t[c][k]);
        }
    }
    return out;
}

cv::Mat quantize(const cv::Mat& image) {
    cv::Mat out(image.size(), CV_8UC3);
    for (int r = 0; r < image.rows; ++r) {
        const auto* px = image.ptr<cv::Vec3f>(r);
        auto* o = out.ptr<cv::Vec3b>(r);
        for (int c = 0; c < image.cols; ++c) {
            for (int k = 0; k < 3; ++k) {
                o[c][k] = static_cast<std::uint8_t>(std::clamp(std::round((px[c][k] + 1.0) * 127.5), 0.0, 255.0));
            }
        }
    }
    return out;
}

std::filesystem::path mask_file(const std::filesystem::path& csv_path, const std::string& patch_id) {
    return csv_path.parent_path() / (patch_id + "_mask.png");
}

Manifest write_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir, std::size_t jobs) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const auto csv = out_dir / "manifest.csv";

    Manifest manifest;
    manifest.fingerprint.patch_size = cfg.size;
    manifest.fingerprint.seed = cfg.seed;
    manifest.fingerprint.thresholds.lesion_anomalous_min = cfg.f_lo;

    auto record = [&](std::string id, Label label, Domain domain, Split split) {
        PatchRecord r;
        r.patch_id = std::move(id);
        r.slide_id = "synth";
        r.size = cfg.size;
        r.tissue_coverage = 1.0;
        r.label = label;
        r.domain = domain;
        r.split = split;
        return r;
    };
    for (std::int64_t i = 0; i < cfg.n_train; ++i) {
        manifest.records.push_back(record(numbered("train_x", i), Label::Healthy, Domain::X, Split::Train));
    }
    for (std::int64_t i = 0; i < cfg.n_train; ++i) {
        manifest.records.push_back(record(numbered("train_y", i), Label::Healthy, Domain::Y, Split::Train));
    }
    for (std::int64_t i = 0; i < cfg.n_test; ++i) {
        manifest.records.push_back(record(numbered("test_h", i), Label::Healthy, Domain::None, Split::Test));
    }
    for (std::int64_t i = 0; i < cfg.n_test; ++i) {
        manifest.records.push_back(record(numbered("test_a", i), Label::Anomalous, Domain::None, Split::Test));
    }

    // Test patches alternate between the two cohorts' tints.
    auto produce = [&](std::size_t k) {
        auto& r = manifest.records[k];
        const auto n_train = static_cast<std::size_t>(cfg.n_train);
        const auto n_test = static_cast<std::size_t>(cfg.n_test);
        if (k < 2 * n_train) {
            const auto i = static_cast<std::int64_t>(k % n_train);
            write_png(patch_file(csv, r.patch_id), quantize(gen_healthy(cfg, i, r.domain)));
            return;
        }
        const auto t = static_cast<std::int64_t>((k - 2 * n_train) % n_test);
        const std::int64_t index = cfg.n_train + t;
        const Domain tint = t % 2 == 0 ? Domain::X : Domain::Y;
        if (r.label == Label::Healthy) {
            write_png(patch_file(csv, r.patch_id), quantize(gen_healthy(cfg, index, tint)));
            write_png(mask_file(csv, r.patch_id), cv::Mat::zeros(static_cast<int>(cfg.size), static_cast<int>(cfg.size), CV_8UC1));
        } else {
            const auto sample = gen_anomalous(cfg, index, tint);
            write_png(patch_file(csv, r.patch_id), quantize(sample.image));
            write_png(mask_file(csv, r.patch_id), sample.mask);
            r.lesion_coverage = std::stod(format_coverage(sample.fraction));
        }
    };

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (std::size_t k = next++; k < manifest.records.size() && !failed; k = next++) {
            try {
                produce(k);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < std::max<std::size_t>(1, jobs); ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    manifest.validate();
    write_manifest(manifest, csv);
    return manifest;
}

std::vector<eval::ScoreRecord> oracle_scores(const Manifest& manifest, const std::filesystem::path& csv_path) {
    std::vector<eval::ScoreRecord> out;
    for (const auto& r : manifest.records) {
        if (r.split != Split::Test || r.label == Label::Ambiguous) continue;
        const auto path = mask_file(csv_path, r.patch_id);
        const cv::Mat mask = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
        if (mask.empty()) throw FormatError("cannot read mask " + path.string());
        const double area = static_cast<double>(cv::countNonZero(mask)) / static_cast<double>(mask.total());
        out.push_back({r.patch_id, r.label == Label::Anomalous ? 1 : 0, "oracle", area});
    }
    return out;
}

}  // namespace anodet::synth
