#include "anodet/scorer.hpp"

#include <ATen/Parallel.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <opencv2/core.hpp>

#include "anodet/error.hpp"
#include "anodet/image_io.hpp"

namespace anodet::scoring {
namespace F = torch::nn::functional;

namespace {

constexpr const char* kPerceptualFormat = "anodet-perceptual-v1";

torch::Tensor as_batch(const torch::Tensor& t) { return t.dim() == 3 ? t.unsqueeze(0) : t; }

torch::Tensor gaussian_kernel(std::int64_t window, double sigma) {
    auto g = torch::arange(window, torch::kDouble) - static_cast<double>(window / 2);
    g = torch::exp(-(g * g) / (2 * sigma * sigma));
    return g / g.sum();
}

/// Separable "valid" Gaussian filtering of every channel independently.
torch::Tensor gaussian_filter(const torch::Tensor& x, const torch::Tensor& g) {
    const auto c = x.size(1);
    const auto w = g.size(0);
    const auto row = g.view({1, 1, 1, w}).expand({c, 1, 1, w}).contiguous();
    const auto col = g.view({1, 1, w, 1}).expand({c, 1, w, 1}).contiguous();
    const auto opts = F::Conv2dFuncOptions().groups(c);
    return F::conv2d(F::conv2d(x, row, opts), col, opts);
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream stream(text);
    for (std::string item; std::getline(stream, item, ';');) {
        const auto eq = item.find('=');
        if (eq != std::string::npos) kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return kv;
}

/// Restores the intra-op thread count on scope exit.
class SingleThreadScope {
public:
    SingleThreadScope() : saved_(at::get_num_threads()) { at::set_num_threads(1); }
    ~SingleThreadScope() { at::set_num_threads(saved_); }

private:
    int saved_;
};

}  // namespace

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimParams& params) {
    if (a.sizes() != b.sizes()) throw InvalidInputError("ssim: operand shapes differ");
    if (a.dim() != 3 && a.dim() != 4) throw InvalidInputError("ssim: expected (C,H,W) or (N,C,H,W)");
    if (params.window <= 0 || params.window % 2 == 0) throw InvalidInputError("ssim: window must be odd and positive");
    const auto x = as_batch(a).to(torch::kDouble);
    const auto y = as_batch(b).to(torch::kDouble);
    if (params.window > std::min(x.size(2), x.size(3))) {
        throw InvalidInputError("ssim: window " + std::to_string(params.window) + " exceeds image size");
    }
    const auto g = gaussian_kernel(params.window, params.sigma);
    const double c1 = std::pow(params.k1 * params.data_range, 2);
    const double c2 = std::pow(params.k2 * params.data_range, 2);

    const auto mu_x = gaussian_filter(x, g);
    const auto mu_y = gaussian_filter(y, g);
    const auto var_x = gaussian_filter(x * x, g) - mu_x * mu_x;
    const auto var_y = gaussian_filter(y * y, g) - mu_y * mu_y;
    const auto cov = gaussian_filter(x * y, g) - mu_x * mu_y;
    const auto map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) /
                     ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
    return map.mean().item<double>();
}

// ---------------------------------------------------------------------------

std::int64_t PerceptualConfig::channels(std::int64_t stage) const {
    return base_channels << std::min<std::int64_t>(stage, 2);
}

std::string PerceptualConfig::fingerprint() const {
    return "base_channels=" + std::to_string(base_channels) + ";stages=" + std::to_string(stages) +
           ";seed=" + std::to_string(seed);
}

PerceptualConfig PerceptualConfig::from_fingerprint(const std::string& text) {
    const auto kv = parse_kv(text);
    PerceptualConfig cfg;
    try {
        cfg.base_channels = std::stoll(kv.at("base_channels"));
        cfg.stages = std::stoll(kv.at("stages"));
        cfg.seed = std::stoull(kv.at("seed"));
    } catch (const std::exception&) {
        throw FormatError("malformed perceptual extractor config '" + text + "'");
    }
    return cfg;
}

PerceptualExtractor::PerceptualExtractor(PerceptualConfig cfg) : cfg_(cfg) {
    if (cfg_.base_channels <= 0 || cfg_.stages <= 0) throw InvalidInputError("perceptual extractor sizes must be positive");
    auto rng = nn::make_generator(cfg_.seed);
    std::int64_t in = 3;
    for (std::int64_t s = 0; s < cfg_.stages; ++s) {
        const auto out = cfg_.channels(s);
        const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
        weights_.push_back(torch::randn({out, in, 3, 3}, rng) * std);
        biases_.push_back(torch::zeros({out}));
        layer_weights_.push_back(torch::ones({out}));
        in = out;
    }
}

std::vector<torch::Tensor> PerceptualExtractor::features(const torch::Tensor& image) const {
    torch::NoGradGuard no_grad;
    auto x = as_batch(image).to(torch::kFloat32);
    std::vector<torch::Tensor> out;
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        if (s > 0) {
            if (x.size(2) < 2 || x.size(3) < 2) throw InvalidInputError("perceptual: image too small for the pyramid");
            x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
        }
        x = torch::relu(F::conv2d(x, weights_[s], F::Conv2dFuncOptions().bias(biases_[s]).padding(1)));
        const auto norm = x.to(torch::kDouble).pow(2).sum(1, true).sqrt();
        out.push_back(x.to(torch::kDouble) / (norm + 1e-10));
    }
    return out;
}

double PerceptualExtractor::distance(const torch::Tensor& a, const torch::Tensor& b) const {
    if (a.sizes() != b.sizes()) throw InvalidInputError("perceptual_distance: operand shapes differ");
    const auto fa = features(a);
    const auto fb = features(b);
    double total = 0.0;
    for (std::size_t s = 0; s < fa.size(); ++s) {
        const auto w = layer_weights_[s].to(torch::kDouble).view({1, -1, 1, 1});
        total += (w * (fa[s] - fb[s]).pow(2)).sum(1).mean().item<double>();
    }
    return total;
}

void PerceptualExtractor::save(const std::filesystem::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kPerceptualFormat)));
    archive.write("config", c10::IValue(cfg_.fingerprint()));
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        archive.write("weight_" + std::to_string(s), weights_[s], true);
        archive.write("bias_" + std::to_string(s), biases_[s], true);
        archive.write("layer_weight_" + std::to_string(s), layer_weights_[s], true);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
}

PerceptualExtractor PerceptualExtractor::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("extractor file " + path.string() + " does not exist");
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        throw FormatError("cannot read extractor file " + path.string());
    }
    c10::IValue format, config;
    if (!archive.try_read("format", format) || !format.isString() || format.toStringRef() != kPerceptualFormat) {
        throw FormatError(path.string() + " is not a perceptual extractor file");
    }
    if (!archive.try_read("config", config) || !config.isString()) throw FormatError("extractor file lacks a config");
    PerceptualExtractor ex(PerceptualConfig::from_fingerprint(config.toStringRef()));
    for (std::size_t s = 0; s < ex.weights_.size(); ++s) {
        torch::Tensor w, b, lw;
        if (!archive.try_read("weight_" + std::to_string(s), w, true) ||
            !archive.try_read("bias_" + std::to_string(s), b, true) ||
            !archive.try_read("layer_weight_" + std::to_string(s), lw, true)) {
            throw FormatError("extractor file lacks stage " + std::to_string(s));
        }
        if (w.sizes() != ex.weights_[s].sizes() || b.sizes() != ex.biases_[s].sizes() ||
            lw.sizes() != ex.layer_weights_[s].sizes()) {
            throw FormatError("extractor stage " + std::to_string(s) + " has unexpected shape");
        }
        ex.weights_[s] = w;
        ex.biases_[s] = b;
        ex.layer_weights_[s] = lw;
    }
    return ex;
}

double perceptual_distance(const torch::Tensor& a, const torch::Tensor& b, const PerceptualExtractor& extractor) {
    return extractor.distance(a, b);
}

// ---------------------------------------------------------------------------

std::string_view to_string(Metric metric) { return metric == Metric::Ssim ? "ssim" : "perceptual"; }

Metric parse_metric(std::string_view text) {
    if (text == "ssim") return Metric::Ssim;
    if (text == "perceptual") return Metric::Perceptual;
    throw InvalidInputError("unknown metric '" + std::string(text) + "' (expected ssim or perceptual)");
}

torch::Tensor reconstruct(nn::Translator& model, const torch::Tensor& image, Domain source, Domain target) {
    torch::NoGradGuard no_grad;
    return model->decode(model->encode_content(image, source), model->encode_style(image, target), target);
}

double image_score(const torch::Tensor& image, const torch::Tensor& reconstruction, Metric metric,
                   const PerceptualExtractor* extractor) {
    if (metric == Metric::Ssim) return 1.0 - ssim(image, reconstruction);
    if (extractor == nullptr) throw InvalidInputError("perceptual scoring needs an extractor");
    return extractor->distance(image, reconstruction);
}

Scorer::Scorer(nn::Translator model, Metric metric, std::shared_ptr<const PerceptualExtractor> extractor,
               Domain source, Domain target)
    : model_(std::move(model)), metric_(metric), extractor_(std::move(extractor)), source_(source), target_(target) {
    if (metric_ == Metric::Perceptual && !extractor_) extractor_ = std::make_shared<PerceptualExtractor>();
    if (source_ == Domain::None || target_ == Domain::None) throw InvalidInputError("scorer domains must be X or Y");
    model_->eval();
}

Reconstruction Scorer::run(const torch::Tensor& image) const {
    nn::Translator model = model_;
    Reconstruction r;
    r.query = image;
    r.reconstruction = reconstruct(model, image, source_, target_);
    r.metric = metric_;
    r.score = image_score(image, r.reconstruction, metric_, extractor_.get());
    if (!std::isfinite(r.score)) throw NumericError("non-finite anomaly score");
    return r;
}

std::vector<PatchRecord> scorable_records(const Manifest& manifest) {
    std::vector<PatchRecord> out;
    for (const auto& r : manifest.records) {
        if (r.split == Split::Test && r.label != Label::Ambiguous) out.push_back(r);
    }
    return out;
}

ScoreRun score_manifest(const Manifest& manifest, const std::filesystem::path& csv_path, const Scorer& scorer,
                        const ScoreOptions& options) {
    const auto records = scorable_records(manifest);
    std::vector<std::optional<eval::ScoreRecord>> results(records.size());
    std::vector<std::optional<std::string>> failures(records.size());
    if (options.dump_dir) std::filesystem::create_directories(*options.dump_dir);

    SingleThreadScope single_thread;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        torch::NoGradGuard no_grad;
        for (std::size_t i = next++; i < records.size(); i = next++) {
            const auto& rec = records[i];
            try {
                const auto image = load_image_tensor(patch_file(csv_path, rec.patch_id));
                const auto r = scorer.run(image);
                results[i] = eval::ScoreRecord{rec.patch_id, rec.label == Label::Anomalous ? 1 : 0,
                                               std::string(to_string(scorer.metric())), r.score};
                if (options.dump_dir) {
                    cv::Mat side;
                    cv::hconcat(to_mat(r.query), to_mat(r.reconstruction), side);
                    write_image(*options.dump_dir / (rec.patch_id + ".png"), side);
                }
            } catch (const std::exception& e) {
                failures[i] = e.what();
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, records.size()));
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    ScoreRun run;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (results[i]) run.records.push_back(*results[i]);
        if (failures[i]) run.errors.push_back({records[i].patch_id, *failures[i]});
    }
    return run;
}

void write_score_errors(const std::vector<ScoreError>& errors, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << "patch_id,message\n";
    for (const auto& e : errors) {
        std::string msg = e.message;
        for (auto& ch : msg) {
            if (ch == ',' || ch == '\n') ch = ' ';
        }
        out << e.patch_id << ',' << msg << '\n';
    }
    if (!out) throw Error("cannot write " + path.string());
}

}  // namespace anodet::scoring
