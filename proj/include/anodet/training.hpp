#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "anodet/translator.hpp"

namespace anodet::nn {

struct LossWeights {
    double img_recon = 10.0;
    double content_recon = 1.0;
    double style_recon = 1.0;
    double cycle = 10.0;
    double adv = 1.0;

    /// All weights must be non-negative and `adv` strictly positive.
    void validate() const;
};

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::int64_t lr_decay_every = 100000;
    double lr_decay = 0.5;

    double lr_at(std::int64_t step) const;
};

/// Mean absolute difference of two equally shaped tensors.
torch::Tensor recon_loss(const torch::Tensor& a, const torch::Tensor& b);

struct AdversarialLosses {
    torch::Tensor d_loss;
    torch::Tensor g_loss;
};

/// Least-squares GAN objectives for one discriminator output:
/// d = 0.5*mean((real-1)^2) + 0.5*mean(fake^2), g = mean((fake-1)^2).
AdversarialLosses adversarial_losses(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// Source -> other domain (with `target_style`) -> back to source, using the
/// source image's own style for the return trip.
torch::Tensor cycle_images(Translator& model, const torch::Tensor& image, Domain source,
                           const torch::Tensor& target_style);

/// Individual generator loss terms (summed over both domains) and their weighted total.
/// Terms whose weight is zero are not computed and hold 0.
struct GeneratorLosses {
    torch::Tensor img_recon;
    torch::Tensor content_recon;
    torch::Tensor style_recon;
    torch::Tensor cycle;
    torch::Tensor adv;
    torch::Tensor total;
};

/// Generator objective for one pair of batches with explicit prior styles for
/// the cross translations. Deterministic given its inputs.
GeneratorLosses generator_objective(Translator& model, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                    const torch::Tensor& style_x, const torch::Tensor& style_y,
                                    const LossWeights& weights);

/// Discriminator objective on real batches versus translations built from the given styles.
torch::Tensor discriminator_objective(Translator& model, const torch::Tensor& batch_x, const torch::Tensor& batch_y,
                                      const torch::Tensor& style_x, const torch::Tensor& style_y);

struct StepMetrics {
    std::int64_t step = 0;
    double img_recon = 0.0;
    double content_recon = 0.0;
    double style_recon = 0.0;
    double cycle = 0.0;
    double g_adv = 0.0;
    double d_adv = 0.0;
    double total = 0.0;

    std::vector<std::pair<std::string, double>> items() const;
};

/// Owns the model, both optimizers, the style RNG and the step counter.
class Trainer {
public:
    Trainer(TranslatorConfig model_cfg, LossWeights weights, OptimConfig optim, std::uint64_t seed);

    /// One discriminator update followed by one generator update.
    StepMetrics step(const torch::Tensor& batch_x, const torch::Tensor& batch_y);

    /// The two halves of `step`; neither advances the step counter. Each
    /// draws fresh prior styles from the trainer's generator.
    double discriminator_update(const torch::Tensor& batch_x, const torch::Tensor& batch_y);
    void generator_update(const torch::Tensor& batch_x, const torch::Tensor& batch_y, StepMetrics& metrics);

    Translator& model() { return model_; }
    std::int64_t step_count() const { return step_; }
    const LossWeights& weights() const { return weights_; }
    const OptimConfig& optim() const { return optim_; }
    std::uint64_t seed() const { return seed_; }

    /// Translator checkpoint plus optimizer state, step counter and RNG state.
    void save(const std::filesystem::path& path);
    /// Restores a checkpoint written by `save`; the model config must match.
    void resume(const std::filesystem::path& path);
    static Trainer from_checkpoint(const std::filesystem::path& path);

private:
    void set_lr();

    Translator model_;
    LossWeights weights_;
    OptimConfig optim_;
    std::uint64_t seed_;
    at::Generator rng_;
    std::unique_ptr<torch::optim::Adam> gen_opt_;
    std::unique_ptr<torch::optim::Adam> dis_opt_;
    std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Data feeding.

/// Random-access collection of (3,H,W) images in [-1,1].
class PatchSource {
public:
    virtual ~PatchSource() = default;
    virtual std::size_t size() const = 0;
    virtual torch::Tensor get(std::size_t index) const = 0;
};

class TensorPatchSource : public PatchSource {
public:
    explicit TensorPatchSource(std::vector<torch::Tensor> images) : images_(std::move(images)) {}
    std::size_t size() const override { return images_.size(); }
    torch::Tensor get(std::size_t index) const override { return images_.at(index); }

private:
    std::vector<torch::Tensor> images_;
};

/// Decodes image files on demand.
class FilePatchSource : public PatchSource {
public:
    explicit FilePatchSource(std::vector<std::filesystem::path> files) : files_(std::move(files)) {}
    std::size_t size() const override { return files_.size(); }
    torch::Tensor get(std::size_t index) const override;

private:
    std::vector<std::filesystem::path> files_;
};

/// Deterministic batch schedule over two domains. An epoch is defined over
/// the smaller domain; every epoch draws a fresh permutation per domain. The
/// batch for a given step depends only on (seed, step), so resuming
/// reproduces the uninterrupted schedule.
class EpochSampler {
public:
    EpochSampler(std::size_t size_x, std::size_t size_y, std::size_t batch_size, std::uint64_t seed);

    std::pair<std::vector<std::size_t>, std::vector<std::size_t>> indices_at(std::int64_t step) const;
    std::size_t batches_per_epoch() const { return batches_per_epoch_; }

private:
    std::vector<std::size_t> permutation(std::size_t n, std::int64_t epoch, std::uint64_t salt) const;

    std::size_t size_x_;
    std::size_t size_y_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t batches_per_epoch_;
};

torch::Tensor make_batch(const PatchSource& source, const std::vector<std::size_t>& indices);

struct LoopConfig {
    std::int64_t steps = 1000;
    std::int64_t batch_size = 1;
    std::int64_t checkpoint_every = 0;
    std::filesystem::path out_dir;
    std::uint64_t data_seed = 0;
};

/// Appends `step,loss_name,value` rows.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::filesystem::path& path, bool append);
    void write(const StepMetrics& metrics);

private:
    std::filesystem::path path_;
};

/// Runs `trainer` from its current step up to `cfg.steps`, writing
/// checkpoints every `cfg.checkpoint_every` steps and at the end.
void run_training(Trainer& trainer, const PatchSource& domain_x, const PatchSource& domain_y, const LoopConfig& cfg,
                  const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace anodet::nn
