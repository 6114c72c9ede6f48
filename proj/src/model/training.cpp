#include "anodet/training.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "anodet/error.hpp"
#include "anodet/image_io.hpp"
#include "anodet/rng.hpp"

namespace anodet::nn {

namespace {

torch::Tensor zero_like_scalar(const torch::Tensor& ref) { return torch::zeros({}, ref.options()); }

void require_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>()) throw NumericError(std::string(what) + " contains non-finite values");
}

torch::Tensor g_adv_over_scales(const std::vector<torch::Tensor>& fake) {
    torch::Tensor total;
    for (const auto& f : fake) {
        const auto g = (f - 1).pow(2).mean();
        total = total.defined() ? total + g : g;
    }
    return total;
}

torch::Tensor d_adv_over_scales(const std::vector<torch::Tensor>& real, const std::vector<torch::Tensor>& fake) {
    torch::Tensor total;
    for (std::size_t i = 0; i < real.size(); ++i) {
        const auto d = adversarial_losses(real[i], fake[i]).d_loss;
        total = total.defined() ? total + d : d;
    }
    return total;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
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

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("trainer checkpoint lacks '" + key + "'");
    return it->second;
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
    for (auto p : params) p.set_requires_grad(on);
}

}  // namespace

void LossWeights::validate() const {
    for (double w : {img_recon, content_recon, style_recon, cycle, adv}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInputError("loss weights must be finite and non-negative");
    }
    if (!(adv > 0.0)) throw InvalidInputError("the adversarial loss weight must be positive");
}

double OptimConfig::lr_at(std::int64_t step) const {
    if (lr_decay_every <= 0) return lr;
    return lr * std::pow(lr_decay, static_cast<double>(step / lr_decay_every));
}

torch::Tensor recon_loss(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) throw ShapeError("recon_loss: operand shapes differ");
    return (a - b).abs().mean();
}

AdversarialLosses adversarial_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
    require_finite(real_logits, "real logits");
    require_finite(fake_logits, "fake logits");
    AdversarialLosses out;
    out.d_loss = 0.5 * (real_logits - 1).pow(2).mean() + 0.5 * fake_logits.pow(2).mean();
    out.g_loss = (fake_logits - 1).pow(2).mean();
    return out;
}

torch::Tensor cycle_images(Translator& model, const torch::Tensor& image, Domain source,
                           const torch::Tensor& target_style) {
    const Domain target = source == Domain::X ? Domain::Y : Domain::X;
    const auto translated = model->decode(model->encode_content(image, source), target_style, target);
    return model->decode(model->encode_content(translated, target), model->encode_style(image, source), source);
}

GeneratorLosses generator_objective(Translator& model, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                    const torch::Tensor& style_x, const torch::Tensor& style_y,
                                    const LossWeights& weights) {
    if (batch_x.sizes() != batch_y.sizes()) throw ShapeError("generator_objective: batch shapes differ");
    const auto c_x = model->encode_content(batch_x, Domain::X);
    const auto c_y = model->encode_content(batch_y, Domain::Y);
    const auto s_x = model->encode_style(batch_x, Domain::X);
    const auto s_y = model->encode_style(batch_y, Domain::Y);

    GeneratorLosses out;
    const auto zero = zero_like_scalar(batch_x);
    out.img_recon = zero;
    out.content_recon = zero;
    out.style_recon = zero;
    out.cycle = zero;

    if (weights.img_recon > 0) {
        out.img_recon = recon_loss(model->decode(c_x, s_x, Domain::X), batch_x) +
                        recon_loss(model->decode(c_y, s_y, Domain::Y), batch_y);
    }

    const auto x_to_y = model->decode(c_x, style_y, Domain::Y);
    const auto y_to_x = model->decode(c_y, style_x, Domain::X);

    out.adv = g_adv_over_scales(model->discriminate(x_to_y, Domain::Y)) +
              g_adv_over_scales(model->discriminate(y_to_x, Domain::X));

    torch::Tensor c_x_back, c_y_back;
    if (weights.content_recon > 0 || weights.cycle > 0) {
        c_x_back = model->encode_content(x_to_y, Domain::Y);
        c_y_back = model->encode_content(y_to_x, Domain::X);
    }
    if (weights.content_recon > 0) out.content_recon = recon_loss(c_x_back, c_x) + recon_loss(c_y_back, c_y);
    if (weights.style_recon > 0) {
        out.style_recon = recon_loss(model->encode_style(x_to_y, Domain::Y), style_y) +
                          recon_loss(model->encode_style(y_to_x, Domain::X), style_x);
    }
    if (weights.cycle > 0) {
        out.cycle = recon_loss(model->decode(c_x_back, s_x, Domain::X), batch_x) +
                    recon_loss(model->decode(c_y_back, s_y, Domain::Y), batch_y);
    }

    out.total = weights.adv * out.adv + weights.img_recon * out.img_recon +
                weights.content_recon * out.content_recon + weights.style_recon * out.style_recon +
                weights.cycle * out.cycle;
    return out;
}

torch::Tensor discriminator_objective(Translator& model, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                      const torch::Tensor& style_x, const torch::Tensor& style_y) {
    if (batch_x.sizes() != batch_y.sizes()) throw ShapeError("discriminator_objective: batch shapes differ");
    torch::Tensor x_to_y, y_to_x;
    {
        torch::NoGradGuard no_grad;
        x_to_y = model->decode(model->encode_content(batch_x, Domain::X), style_y, Domain::Y);
        y_to_x = model->decode(model->encode_content(batch_y, Domain::Y), style_x, Domain::X);
    }
    return d_adv_over_scales(model->discriminate(batch_x, Domain::X), model->discriminate(y_to_x, Domain::X)) +
           d_adv_over_scales(model->discriminate(batch_y, Domain::Y), model->discriminate(x_to_y, Domain::Y));
}

std::vector<std::pair<std::string, double>> StepMetrics::items() const {
    return {{"img_recon", img_recon}, {"content_recon", content_recon}, {"style_recon", style_recon},
            {"cycle", cycle},         {"g_adv", g_adv},                 {"d_adv", d_adv},
            {"total", total}};
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TranslatorConfig model_cfg, LossWeights weights, OptimConfig optim, std::uint64_t seed)
    : model_(std::move(model_cfg)),
      weights_(weights),
      optim_(optim),
      seed_(seed),
      rng_(make_generator(seed)) {
    weights_.validate();
    const auto adam = torch::optim::AdamOptions(optim_.lr).betas({optim_.beta1, optim_.beta2});
    gen_opt_ = std::make_unique<torch::optim::Adam>(model_->generator_parameters(), adam);
    dis_opt_ = std::make_unique<torch::optim::Adam>(model_->discriminator_parameters(), adam);
}

void Trainer::set_lr() {
    const double lr = optim_.lr_at(step_);
    for (auto* opt : {gen_opt_.get(), dis_opt_.get()}) {
        for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
}

namespace {

void check_batches(const torch::Tensor& batch_x, const torch::Tensor& batch_y) {
    if (batch_x.dim() != 4 || batch_x.sizes() != batch_y.sizes()) {
        throw ShapeError("train step: batches must be (N,3,H,W) with equal shapes");
    }
}

}  // namespace

double Trainer::discriminator_update(const torch::Tensor& batch_x, const torch::Tensor& batch_y) {
    check_batches(batch_x, batch_y);
    set_lr();
    const auto n = batch_x.size(0);
    const auto dim = model_->config().style_dim;
    const auto style_x = sample_style(rng_, n, dim);
    const auto style_y = sample_style(rng_, n, dim);
    dis_opt_->zero_grad();
    const auto d_loss = discriminator_objective(model_, batch_x, batch_y, style_x, style_y);
    const double value = d_loss.item<double>();
    if (!std::isfinite(value)) {
        throw NumericError("step " + std::to_string(step_ + 1) + ": discriminator loss is " + format_double(value));
    }
    d_loss.backward();
    dis_opt_->step();
    return value;
}

void Trainer::generator_update(const torch::Tensor& batch_x, const torch::Tensor& batch_y, StepMetrics& metrics) {
    check_batches(batch_x, batch_y);
    set_lr();
    const auto n = batch_x.size(0);
    const auto dim = model_->config().style_dim;
    const auto style_x = sample_style(rng_, n, dim);
    const auto style_y = sample_style(rng_, n, dim);
    const auto dis_params = model_->discriminator_parameters();
    set_requires_grad(dis_params, false);
    gen_opt_->zero_grad();
    try {
        const auto losses = generator_objective(model_, batch_x, batch_y, style_x, style_y, weights_);
        metrics.img_recon = losses.img_recon.item<double>();
        metrics.content_recon = losses.content_recon.item<double>();
        metrics.style_recon = losses.style_recon.item<double>();
        metrics.cycle = losses.cycle.item<double>();
        metrics.g_adv = losses.adv.item<double>();
        metrics.total = losses.total.item<double>();
        for (const auto& [name, value] : metrics.items()) {
            if (!std::isfinite(value)) {
                throw NumericError("step " + std::to_string(step_ + 1) + ": loss " + name + " is " +
                                   format_double(value));
            }
        }
        losses.total.backward();
    } catch (...) {
        set_requires_grad(dis_params, true);
        throw;
    }
    set_requires_grad(dis_params, true);
    gen_opt_->step();
}

StepMetrics Trainer::step(const torch::Tensor& batch_x, const torch::Tensor& batch_y) {
    StepMetrics metrics;
    metrics.d_adv = discriminator_update(batch_x, batch_y);
    generator_update(batch_x, batch_y, metrics);
    ++step_;
    metrics.step = step_;
    return metrics;
}

void Trainer::save(const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    write_model(archive, model_);
    std::ostringstream state;
    state << "step=" << step_ << ";seed=" << seed_ << ";w_img_recon=" << format_double(weights_.img_recon)
          << ";w_content_recon=" << format_double(weights_.content_recon)
          << ";w_style_recon=" << format_double(weights_.style_recon) << ";w_cycle=" << format_double(weights_.cycle)
          << ";w_adv=" << format_double(weights_.adv) << ";lr=" << format_double(optim_.lr)
          << ";beta1=" << format_double(optim_.beta1) << ";beta2=" << format_double(optim_.beta2)
          << ";lr_decay_every=" << optim_.lr_decay_every << ";lr_decay=" << format_double(optim_.lr_decay);
    archive.write("trainer", c10::IValue(state.str()));
    archive.write("rng_state", rng_.get_state(), /*is_buffer=*/true);
    torch::serialize::OutputArchive gen_state, dis_state;
    gen_opt_->save(gen_state);
    dis_opt_->save(dis_state);
    archive.write("optimizer_gen", gen_state);
    archive.write("optimizer_dis", dis_state);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    archive.save_to(tmp);
    std::filesystem::rename(tmp, path);
}

namespace {

torch::serialize::InputArchive open_archive(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("checkpoint " + path.string() + " does not exist");
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        throw FormatError("cannot read checkpoint " + path.string());
    }
    return archive;
}

std::map<std::string, std::string> read_trainer_state(torch::serialize::InputArchive& archive) {
    c10::IValue state;
    if (!archive.try_read("trainer", state) || !state.isString()) {
        throw FormatError("checkpoint has no trainer state (weights-only checkpoint?)");
    }
    return parse_kv(state.toStringRef());
}

}  // namespace

void Trainer::resume(const std::filesystem::path& path) {
    auto archive = open_archive(path);
    const auto kv = read_trainer_state(archive);
    read_model_into(archive, model_);
    torch::Tensor rng_state;
    if (!archive.try_read("rng_state", rng_state, true)) throw FormatError("checkpoint lacks rng_state");
    torch::serialize::InputArchive gen_state, dis_state;
    if (!archive.try_read("optimizer_gen", gen_state) || !archive.try_read("optimizer_dis", dis_state)) {
        throw FormatError("checkpoint lacks optimizer state");
    }
    gen_opt_->load(gen_state);
    dis_opt_->load(dis_state);
    rng_.set_state(rng_state);
    step_ = std::stoll(need(kv, "step"));
}

Trainer Trainer::from_checkpoint(const std::filesystem::path& path) {
    auto archive = open_archive(path);
    const auto kv = read_trainer_state(archive);
    c10::IValue config;
    if (!archive.try_read("config", config) || !config.isString()) throw FormatError("checkpoint lacks a config");
    LossWeights weights;
    OptimConfig optim;
    try {
        weights.img_recon = std::stod(need(kv, "w_img_recon"));
        weights.content_recon = std::stod(need(kv, "w_content_recon"));
        weights.style_recon = std::stod(need(kv, "w_style_recon"));
        weights.cycle = std::stod(need(kv, "w_cycle"));
        weights.adv = std::stod(need(kv, "w_adv"));
        optim.lr = std::stod(need(kv, "lr"));
        optim.beta1 = std::stod(need(kv, "beta1"));
        optim.beta2 = std::stod(need(kv, "beta2"));
        optim.lr_decay_every = std::stoll(need(kv, "lr_decay_every"));
        optim.lr_decay = std::stod(need(kv, "lr_decay"));
    } catch (const std::logic_error&) {
        throw FormatError("malformed trainer state in " + path.string());
    }
    Trainer trainer(TranslatorConfig::from_fingerprint(config.toStringRef()), weights, optim,
                    std::stoull(need(kv, "seed")));
    trainer.resume(path);
    return trainer;
}

// ---------------------------------------------------------------------------

torch::Tensor FilePatchSource::get(std::size_t index) const { return load_image_tensor(files_.at(index)); }

EpochSampler::EpochSampler(std::size_t size_x, std::size_t size_y, std::size_t batch_size, std::uint64_t seed)
    : size_x_(size_x), size_y_(size_y), batch_size_(batch_size), seed_(seed) {
    if (batch_size == 0) throw InvalidInputError("batch size must be positive");
    const std::size_t smaller = std::min(size_x, size_y);
    if (smaller < batch_size) {
        throw InsufficientDataError("each domain needs at least " + std::to_string(batch_size) +
                                    " images for one batch, the smaller has " + std::to_string(smaller));
    }
    batches_per_epoch_ = smaller / batch_size;
}

std::vector<std::size_t> EpochSampler::permutation(std::size_t n, std::int64_t epoch, std::uint64_t salt) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                      static_cast<std::uint32_t>(salt)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    portable_shuffle(order, rng);
    return order;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> EpochSampler::indices_at(std::int64_t step) const {
    if (step < 0) throw InvalidInputError("negative step");
    const auto per_epoch = static_cast<std::int64_t>(batches_per_epoch_);
    const std::int64_t epoch = step / per_epoch;
    const auto offset = static_cast<std::size_t>(step % per_epoch) * batch_size_;
    const auto px = permutation(size_x_, epoch, 1);
    const auto py = permutation(size_y_, epoch, 2);
    return {std::vector<std::size_t>(px.begin() + offset, px.begin() + offset + batch_size_),
            std::vector<std::size_t>(py.begin() + offset, py.begin() + offset + batch_size_)};
}

torch::Tensor make_batch(const PatchSource& source, const std::vector<std::size_t>& indices) {
    std::vector<torch::Tensor> images;
    images.reserve(indices.size());
    for (auto i : indices) images.push_back(source.get(i));
    return torch::stack(images);
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!append || !std::filesystem::exists(path)) {
        std::ofstream out(path, std::ios::trunc);
        out << "step,loss_name,value\n";
        if (!out) throw Error("cannot write " + path.string());
    }
}

void MetricsWriter::write(const StepMetrics& metrics) {
    std::ofstream out(path_, std::ios::app);
    char buf[64];
    for (const auto& [name, value] : metrics.items()) {
        std::snprintf(buf, sizeof buf, "%.9g", value);
        out << metrics.step << ',' << name << ',' << buf << '\n';
    }
    if (!out) throw Error("cannot append to " + path_.string());
}

void run_training(Trainer& trainer, const PatchSource& domain_x, const PatchSource& domain_y, const LoopConfig& cfg,
                  const std::function<void(const StepMetrics&)>& on_step) {
    const EpochSampler sampler(domain_x.size(), domain_y.size(), static_cast<std::size_t>(cfg.batch_size),
                               cfg.data_seed);
    const bool resuming = trainer.step_count() > 0;
    MetricsWriter writer(cfg.out_dir / "metrics.csv", resuming);
    while (trainer.step_count() < cfg.steps) {
        const auto [ix, iy] = sampler.indices_at(trainer.step_count());
        const auto metrics = trainer.step(make_batch(domain_x, ix), make_batch(domain_y, iy));
        writer.write(metrics);
        if (on_step) on_step(metrics);
        if (cfg.checkpoint_every > 0 && metrics.step % cfg.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof name, "step_%08" PRId64 ".pt", metrics.step);
            trainer.save(cfg.out_dir / "checkpoints" / name);
        }
    }
    trainer.save(cfg.out_dir / "checkpoint.pt");
}

}  // namespace anodet::nn
