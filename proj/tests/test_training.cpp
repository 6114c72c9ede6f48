#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "anodet/error.hpp"
#include "anodet/rng.hpp"
#include "anodet/training.hpp"

using namespace anodet;
using namespace anodet::nn;

namespace {

TranslatorConfig tiny_config() {
    TranslatorConfig cfg;
    cfg.base_width = 4;
    cfg.downsample = 2;
    cfg.res_blocks = 1;
    cfg.style_width = 4;
    cfg.style_downsample = 2;
    cfg.style_dim = 3;
    cfg.mlp_dim = 8;
    cfg.mlp_layers = 2;
    cfg.disc_width = 4;
    cfg.disc_layers = 2;
    cfg.disc_scales = 2;
    cfg.seed = 5;
    return cfg;
}

TranslatorConfig small_config() {
    TranslatorConfig cfg;
    cfg.base_width = 8;
    cfg.res_blocks = 2;
    cfg.style_width = 8;
    cfg.style_downsample = 3;
    cfg.mlp_dim = 32;
    cfg.disc_width = 8;
    cfg.disc_layers = 2;
    cfg.disc_scales = 2;
    cfg.seed = 1;
    return cfg;
}

torch::Tensor random_batch(std::int64_t n, std::int64_t size, std::uint64_t seed) {
    auto rng = make_generator(seed);
    return torch::rand({n, 3, size, size}, rng) * 2 - 1;
}

/// Smooth structured image so that a small model can fit it quickly.
torch::Tensor smooth_image(std::int64_t size) {
    const auto lin = torch::linspace(0, 1, size);
    const auto yy = lin.view({size, 1}).expand({size, size});
    const auto xx = lin.view({1, size}).expand({size, size});
    return torch::stack({torch::sin(3.0 * xx) * 0.6, torch::cos(2.0 * yy) * 0.5, (xx - yy) * 0.4});
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
    std::vector<torch::Tensor> out;
    for (const auto& p : params) out.push_back(p.detach().clone());
    return out;
}

bool unchanged(const std::vector<torch::Tensor>& before, const std::vector<torch::Tensor>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!torch::equal(before[i], params[i].detach())) return false;
    }
    return true;
}

}  // namespace

TEST(ReconLoss, Examples) {
    const auto a = torch::rand({2, 3, 4, 4});
    EXPECT_EQ(recon_loss(a, a).item<double>(), 0.0);
    EXPECT_DOUBLE_EQ(recon_loss(torch::ones({5, 5}), torch::zeros({5, 5})).item<double>(), 1.0);
    auto b = torch::zeros({4, 4}, torch::kDouble);
    b.index_put_({torch::indexing::Slice(0, 2)}, 0.5);
    EXPECT_DOUBLE_EQ(recon_loss(b, torch::zeros({4, 4}, torch::kDouble)).item<double>(), 0.25);
    EXPECT_THROW(recon_loss(torch::zeros({2, 3}), torch::zeros({3, 2})), ShapeError);
}

TEST(AdversarialLosses, Examples) {
    auto check = [](double real, double fake, double d, double g) {
        const auto out = adversarial_losses(torch::full({2, 1, 3, 3}, real, torch::kDouble),
                                            torch::full({2, 1, 3, 3}, fake, torch::kDouble));
        EXPECT_DOUBLE_EQ(out.d_loss.item<double>(), d);
        EXPECT_DOUBLE_EQ(out.g_loss.item<double>(), g);
    };
    check(1.0, 0.0, 0.0, 1.0);
    check(0.5, 0.5, 0.25, 0.25);
    check(1.0, 1.0, 0.5, 0.0);
    EXPECT_THROW(adversarial_losses(torch::full({2}, NAN), torch::zeros({2})), NumericError);
    EXPECT_THROW(adversarial_losses(torch::zeros({2}), torch::full({2}, INFINITY)), NumericError);
}

TEST(LossWeights, Validation) {
    LossWeights w;
    EXPECT_NO_THROW(w.validate());
    w.cycle = -1;
    EXPECT_THROW(w.validate(), InvalidInputError);
    w = LossWeights{};
    w.adv = 0;
    EXPECT_THROW(w.validate(), InvalidInputError);
}

TEST(OptimConfig, StepDecay) {
    OptimConfig o;
    EXPECT_DOUBLE_EQ(o.lr_at(0), 1e-4);
    EXPECT_DOUBLE_EQ(o.lr_at(99999), 1e-4);
    EXPECT_DOUBLE_EQ(o.lr_at(100000), 5e-5);
    EXPECT_DOUBLE_EQ(o.lr_at(250000), 2.5e-5);
}

TEST(CycleImages, ShapeAndDeterminism) {
    torch::NoGradGuard no_grad;
    Translator model{small_config()};
    const auto x = random_batch(2, 32, 1);
    auto rng_a = make_generator(3);
    auto rng_b = make_generator(3);
    const auto a = cycle_images(model, x, Domain::X, sample_style(rng_a, 2, 8));
    const auto b = cycle_images(model, x, Domain::X, sample_style(rng_b, 2, 8));
    EXPECT_EQ(a.sizes(), x.sizes());
    EXPECT_TRUE(torch::equal(a, b));
    EXPECT_EQ(cycle_images(model, x[0], Domain::Y, sample_style(rng_a, 8)).sizes(), x[0].sizes());
}

TEST(GeneratorObjective, TermsAreNonNegativeAndWeighted) {
    Translator model{small_config()};
    auto rng = make_generator(2);
    const auto x = random_batch(2, 32, 3);
    const auto y = random_batch(2, 32, 4);
    const auto sx = sample_style(rng, 2, 8);
    const auto sy = sample_style(rng, 2, 8);
    const LossWeights w;
    const auto l = generator_objective(model, x, y, sx, sy, w);
    for (const auto& t : {l.img_recon, l.content_recon, l.style_recon, l.cycle, l.adv}) {
        EXPECT_GE(t.item<double>(), 0.0);
    }
    const double expected = w.adv * l.adv.item<double>() + w.img_recon * l.img_recon.item<double>() +
                            w.content_recon * l.content_recon.item<double>() +
                            w.style_recon * l.style_recon.item<double>() + w.cycle * l.cycle.item<double>();
    EXPECT_NEAR(l.total.item<double>(), expected, 1e-4 * std::abs(expected));
    EXPECT_THROW(generator_objective(model, x, random_batch(1, 32, 5), sx, sy, w), ShapeError);
}

TEST(Trainer, AdversarialOnlyWeightsReportZeroReconTerms) {
    LossWeights w{0, 0, 0, 0, 1};
    Trainer trainer(small_config(), w, OptimConfig{}, 7);
    const auto m = trainer.step(random_batch(2, 32, 1), random_batch(2, 32, 2));
    EXPECT_EQ(m.img_recon, 0.0);
    EXPECT_EQ(m.content_recon, 0.0);
    EXPECT_EQ(m.style_recon, 0.0);
    EXPECT_EQ(m.cycle, 0.0);
    EXPECT_GT(m.g_adv, 0.0);
    EXPECT_DOUBLE_EQ(m.total, m.g_adv);
}

TEST(Trainer, UpdateIsolation) {
    Trainer trainer(small_config(), LossWeights{}, OptimConfig{}, 3);
    auto& model = trainer.model();
    const auto x = random_batch(2, 32, 8);
    const auto y = random_batch(2, 32, 9);

    auto gen_before = snapshot(model->generator_parameters());
    auto dis_before = snapshot(model->discriminator_parameters());
    trainer.discriminator_update(x, y);
    EXPECT_TRUE(unchanged(gen_before, model->generator_parameters()));
    EXPECT_FALSE(unchanged(dis_before, model->discriminator_parameters()));

    gen_before = snapshot(model->generator_parameters());
    dis_before = snapshot(model->discriminator_parameters());
    StepMetrics metrics;
    trainer.generator_update(x, y, metrics);
    EXPECT_TRUE(unchanged(dis_before, model->discriminator_parameters()));
    EXPECT_FALSE(unchanged(gen_before, model->generator_parameters()));
    for (const auto& p : model->discriminator_parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Trainer, DeterministicGivenSeedAndStyleRandomnessOtherwise) {
    const auto x = random_batch(2, 32, 10);
    const auto y = random_batch(2, 32, 11);
    Trainer a(small_config(), LossWeights{}, OptimConfig{}, 21);
    Trainer b(small_config(), LossWeights{}, OptimConfig{}, 21);
    Trainer c(small_config(), LossWeights{}, OptimConfig{}, 22);
    for (int i = 0; i < 3; ++i) {
        const auto ma = a.step(x, y);
        const auto mb = b.step(x, y);
        const auto mc = c.step(x, y);
        EXPECT_EQ(ma.items(), mb.items());
        EXPECT_NE(ma.g_adv, mc.g_adv);
        EXPECT_NE(ma.style_recon, mc.style_recon);
        EXPECT_EQ(ma.step, i + 1);
    }
    EXPECT_EQ(a.step_count(), 3);
}

TEST(Trainer, MismatchedBatchesAreShapeErrors) {
    Trainer trainer(small_config(), LossWeights{}, OptimConfig{}, 3);
    EXPECT_THROW(trainer.step(random_batch(2, 32, 1), random_batch(2, 16, 2)), ShapeError);
    EXPECT_THROW(trainer.step(random_batch(2, 32, 1)[0], random_batch(2, 32, 2)[0]), ShapeError);
}

TEST(Trainer, NonFiniteInputAborts) {
    Trainer trainer(small_config(), LossWeights{}, OptimConfig{}, 3);
    auto x = random_batch(2, 32, 1);
    x[0][0][0][0] = NAN;
    EXPECT_THROW(trainer.step(x, random_batch(2, 32, 2)), NumericError);
}

TEST(Trainer, CheckpointResumeMatchesUninterruptedRun) {
    const auto dir = std::filesystem::temp_directory_path() / "anodet_trainer_ckpt";
    std::filesystem::remove_all(dir);
    const auto x = random_batch(2, 32, 12);
    const auto y = random_batch(2, 32, 13);
    LossWeights w;
    w.cycle = 5;
    OptimConfig o;
    o.lr = 3e-4;

    Trainer full(small_config(), w, o, 4);
    for (int i = 0; i < 4; ++i) full.step(x, y);

    Trainer first(small_config(), w, o, 4);
    for (int i = 0; i < 2; ++i) first.step(x, y);
    first.save(dir / "ckpt.pt");
    auto resumed = Trainer::from_checkpoint(dir / "ckpt.pt");
    EXPECT_EQ(resumed.step_count(), 2);
    EXPECT_EQ(resumed.weights().cycle, 5.0);
    EXPECT_EQ(resumed.optim().lr, 3e-4);
    EXPECT_EQ(resumed.seed(), 4u);
    for (int i = 0; i < 2; ++i) resumed.step(x, y);
    const auto gen_full = full.model()->generator_parameters();
    const auto gen_resumed = resumed.model()->generator_parameters();
    for (std::size_t i = 0; i < gen_full.size(); ++i) EXPECT_TRUE(torch::equal(gen_full[i], gen_resumed[i]));

    auto translator = load_translator(dir / "ckpt.pt");
    EXPECT_EQ(translator->config(), small_config());
    save_translator(translator, dir / "weights_only.pt");
    EXPECT_THROW(Trainer::from_checkpoint(dir / "weights_only.pt"), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(EpochSampler, EpochsCoverTheSmallerDomain) {
    const EpochSampler sampler(10, 7, 2, 99);
    EXPECT_EQ(sampler.batches_per_epoch(), 3u);
    std::set<std::size_t> seen_y, seen_x;
    for (std::int64_t s = 0; s < 3; ++s) {
        const auto [ix, iy] = sampler.indices_at(s);
        ASSERT_EQ(ix.size(), 2u);
        for (auto i : ix) {
            EXPECT_LT(i, 10u);
            EXPECT_TRUE(seen_x.insert(i).second);
        }
        for (auto i : iy) {
            EXPECT_LT(i, 7u);
            EXPECT_TRUE(seen_y.insert(i).second);
        }
    }
    EXPECT_EQ(sampler.indices_at(5), EpochSampler(10, 7, 2, 99).indices_at(5));
    EXPECT_NE(sampler.indices_at(0), sampler.indices_at(3));
    EXPECT_THROW(EpochSampler(1, 5, 2, 0), InsufficientDataError);
}

TEST(RunTraining, WritesMetricsAndCheckpoints) {
    const auto dir = std::filesystem::temp_directory_path() / "anodet_run_training";
    std::filesystem::remove_all(dir);
    std::vector<torch::Tensor> xs, ys;
    for (int i = 0; i < 4; ++i) {
        xs.push_back(random_batch(1, 16, 100 + i)[0]);
        ys.push_back(random_batch(1, 16, 200 + i)[0]);
    }
    TensorPatchSource sx(xs), sy(ys);
    auto cfg = small_config();
    cfg.style_downsample = 2;
    Trainer trainer(cfg, LossWeights{}, OptimConfig{}, 1);
    LoopConfig loop{4, 2, 2, dir, 5};
    int calls = 0;
    run_training(trainer, sx, sy, loop, [&](const StepMetrics&) { ++calls; });
    EXPECT_EQ(calls, 4);
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "step_00000002.pt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "step_00000004.pt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint.pt"));

    auto resumed = Trainer::from_checkpoint(dir / "checkpoints" / "step_00000002.pt");
    loop.steps = 5;
    run_training(resumed, sx, sy, loop);
    std::ifstream in(dir / "metrics.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,loss_name,value");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, (4 + 3) * 7);
    std::filesystem::remove_all(dir);
}

TEST(GradientCheck, GeneratorLossMatchesCentralDifferences) {
    torch::manual_seed(0);
    Translator model{tiny_config()};
    model->to(torch::kDouble);
    auto rng = make_generator(17);
    const auto x = (torch::rand({2, 3, 8, 8}, rng) * 2 - 1).to(torch::kDouble);
    const auto y = (torch::rand({2, 3, 8, 8}, rng) * 2 - 1).to(torch::kDouble);
    const auto sx = sample_style(rng, 2, 3).to(torch::kDouble);
    const auto sy = sample_style(rng, 2, 3).to(torch::kDouble);
    const LossWeights w;

    auto params = model->generator_parameters();
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    generator_objective(model, x, y, sx, sy, w).total.backward();

    // Entries below the floor (e.g. conv biases feeding an instance norm) have
    // structurally zero gradient; relative error is meaningless there, so they
    // are checked in absolute terms instead.
    const double floor = 1e-5;
    std::vector<std::pair<std::size_t, std::int64_t>> candidates, flat_zero;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].grad().view({-1});
        for (std::int64_t j = 0; j < g.numel(); ++j) {
            (std::abs(g[j].item<double>()) >= floor ? candidates : flat_zero).emplace_back(i, j);
        }
    }
    std::mt19937_64 pick(23);
    portable_shuffle(candidates, pick);
    portable_shuffle(flat_zero, pick);
    ASSERT_GE(candidates.size(), 30u);

    torch::NoGradGuard no_grad;
    const double h = 1e-6;
    auto central = [&](std::size_t i, std::int64_t j) {
        auto flat = params[i].view({-1});
        const double original = flat[j].item<double>();
        flat[j] = original + h;
        const double plus = generator_objective(model, x, y, sx, sy, w).total.item<double>();
        flat[j] = original - h;
        const double minus = generator_objective(model, x, y, sx, sy, w).total.item<double>();
        flat[j] = original;
        return (plus - minus) / (2 * h);
    };
    int checked = 0;
    double worst = 0.0;
    for (std::size_t k = 0; k < 30; ++k) {
        const auto [i, j] = candidates[k];
        const double analytic = params[i].grad().view({-1})[j].item<double>();
        const double numeric = central(i, j);
        const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
        worst = std::max(worst, rel);
        EXPECT_LT(rel, 1e-3) << "param " << i << "[" << j << "] analytic " << analytic << " numeric " << numeric;
        ++checked;
    }
    EXPECT_GE(checked, 20);
    for (std::size_t k = 0; k < std::min<std::size_t>(5, flat_zero.size()); ++k) {
        const auto [i, j] = flat_zero[k];
        EXPECT_LT(std::abs(central(i, j)), 1e-4);
    }
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Overfit, SingleImageTranslationAndCycle) {
    const auto image = smooth_image(16);
    TensorPatchSource source({image});
    auto cfg = small_config();
    cfg.style_downsample = 2;
    OptimConfig o;
    o.lr = 1e-3;
    Trainer trainer(cfg, LossWeights{}, o, 2);
    const auto batch = image.unsqueeze(0);
    for (int i = 0; i < 600; ++i) trainer.step(batch, batch);

    torch::NoGradGuard no_grad;
    auto& model = trainer.model();
    const auto translated = model->translate(image, Domain::X, Domain::Y, StyleSource::FromImage);
    const double translate_mae = recon_loss(translated, image).item<double>();
    auto rng = make_generator(8);
    const auto cycled = cycle_images(model, image, Domain::X, sample_style(rng, cfg.style_dim));
    const double cycle_mae = recon_loss(cycled, image).item<double>();
    EXPECT_LT(translate_mae, 0.05);
    EXPECT_LT(cycle_mae, 0.05);
}
