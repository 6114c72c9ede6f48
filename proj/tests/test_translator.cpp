#include <gtest/gtest.h>

#include <filesystem>

#include "anodet/error.hpp"
#include "anodet/translator.hpp"

using namespace anodet;
using namespace anodet::nn;

namespace {

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
    cfg.seed = 3;
    return cfg;
}

torch::Tensor random_image(std::int64_t h, std::int64_t w, std::uint64_t seed, std::int64_t batch = 0) {
    auto rng = make_generator(seed);
    auto img = batch > 0 ? torch::rand({batch, 3, h, w}, rng) : torch::rand({3, h, w}, rng);
    return img * 2 - 1;
}

}  // namespace

TEST(Adain, UnitGammaZeroBetaStandardizes) {
    auto rng = make_generator(1);
    const auto x = torch::randn({2, 5, 9, 11}, rng) * 4 + 3;
    const auto out = adain(x, torch::ones({5}), torch::zeros({5}), 1e-5);
    const auto mean = out.mean({2, 3});
    const auto std = out.var({2, 3}, false).sqrt();
    EXPECT_LT(mean.abs().max().item<double>(), 1e-4);
    EXPECT_LT((std - 1).abs().max().item<double>(), 1e-4);
}

TEST(Adain, AffineTargetsAndPerSampleParams) {
    auto rng = make_generator(2);
    const auto x = torch::randn({3, 4, 16, 16}, rng);
    const auto out = adain(x, torch::full({4}, 3.0), torch::full({4}, 2.0));
    EXPECT_LT((out.mean({2, 3}) - 2).abs().max().item<double>(), 1e-3);
    EXPECT_LT((out.var({2, 3}, false).sqrt() - 3).abs().max().item<double>(), 1e-3);

    const auto gamma = torch::randn({3, 4}, rng);
    const auto beta = torch::randn({3, 4}, rng);
    const auto per_sample = adain(x, gamma, beta);
    EXPECT_LT((per_sample.mean({2, 3}) - beta).abs().max().item<double>(), 1e-3);
    EXPECT_LT((per_sample.var({2, 3}, false).sqrt() - gamma.abs()).abs().max().item<double>(), 1e-3);
}

TEST(Adain, ConstantChannelMapsToBeta) {
    auto x = torch::full({1, 2, 6, 6}, 5.0);
    const auto out = adain(x, torch::ones({2}), torch::tensor({0.0f, 1.5f}));
    EXPECT_TRUE(torch::isfinite(out).all().item<bool>());
    EXPECT_EQ(out[0][0].abs().max().item<float>(), 0.0f);
    EXPECT_EQ(out[0][1].sub(1.5f).abs().max().item<float>(), 0.0f);
}

TEST(Adain, LengthMismatchIsShapeError) {
    const auto x = torch::zeros({1, 3, 4, 4});
    EXPECT_THROW(adain(x, torch::ones({4}), torch::zeros({3})), ShapeError);
    EXPECT_THROW(adain(x, torch::ones({3}), torch::zeros({2, 3})), ShapeError);
}

TEST(SampleStyle, DeterministicStandardNormal) {
    auto a = make_generator(9);
    auto b = make_generator(9);
    EXPECT_TRUE(torch::equal(sample_style(a, 8), sample_style(b, 8)));
    EXPECT_EQ(sample_style(a, 8).size(0), 8);

    auto rng = make_generator(10);
    const auto samples = sample_style(rng, 100000, 8).to(torch::kDouble);
    EXPECT_LT(samples.mean(0).abs().max().item<double>(), 0.02);
    EXPECT_LT((samples.var(0) - 1).abs().max().item<double>(), 0.05);
    EXPECT_THROW(sample_style(rng, 0), InvalidInputError);
}

TEST(Translator, ContentShapesFollowDownsampling) {
    torch::NoGradGuard no_grad;
    Translator model{TranslatorConfig{}};
    EXPECT_EQ(model->config().content_channels(), 256);
    const auto code = model->encode_content(random_image(256, 256, 1), Domain::X);
    EXPECT_EQ(code.sizes(), (std::vector<std::int64_t>{256, 64, 64}));
    const auto small = model->encode_content(random_image(64, 64, 2), Domain::Y);
    EXPECT_EQ(small.sizes(), (std::vector<std::int64_t>{256, 16, 16}));
    EXPECT_THROW(model->encode_content(random_image(250, 250, 3), Domain::X), ShapeError);
}

TEST(Translator, DecodeUpsamplesBackToImageSize) {
    torch::NoGradGuard no_grad;
    Translator model{TranslatorConfig{}};
    auto rng = make_generator(4);
    const auto content = torch::randn({256, 64, 64}, rng);
    const auto style = sample_style(rng, 8);
    const auto image = model->decode(content, style, Domain::Y);
    EXPECT_EQ(image.sizes(), (std::vector<std::int64_t>{3, 256, 256}));
    EXPECT_LE(image.abs().max().item<float>(), 1.0f);
    EXPECT_TRUE(torch::equal(image, model->decode(content, style, Domain::Y)));
    EXPECT_THROW(model->decode(torch::randn({128, 8, 8}), style, Domain::X), ShapeError);
}

TEST(Translator, StyleCodesAndAdainParams) {
    torch::NoGradGuard no_grad;
    Translator model{TranslatorConfig{}};
    const auto image = random_image(64, 64, 5);
    const auto style = model->encode_style(image, Domain::X);
    EXPECT_EQ(style.sizes(), (std::vector<std::int64_t>{8}));
    EXPECT_TRUE(torch::equal(style, model->encode_style(image, Domain::X)));
    EXPECT_THROW(model->encode_style(torch::empty({3, 0, 0}), Domain::X), InvalidInputError);

    EXPECT_EQ(model->config().adain_param_count(), 2048);
    const auto params = model->style_to_adain(style);
    ASSERT_EQ(params.gamma.size(), 4u);
    ASSERT_EQ(params.beta.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(params.gamma[i].sizes(), (std::vector<std::int64_t>{1, 256}));
        EXPECT_EQ(params.beta[i].sizes(), (std::vector<std::int64_t>{1, 256}));
    }
    const auto again = model->style_to_adain(style);
    EXPECT_TRUE(torch::equal(params.gamma[2], again.gamma[2]));
    EXPECT_THROW(model->style_to_adain(torch::zeros({7})), ShapeError);

    for (auto& p : model->mlp->parameters()) p.zero_();
    const auto zero = model->style_to_adain(style);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(zero.gamma[i].abs().max().item<float>(), 0.0f);
        EXPECT_EQ(zero.beta[i].abs().max().item<float>(), 0.0f);
    }
}

TEST(Translator, TranslateIsTheComposition) {
    torch::NoGradGuard no_grad;
    Translator model{small_config()};
    const auto x = random_image(32, 32, 6);
    const auto expected =
        model->decode(model->encode_content(x, Domain::X), model->encode_style(x, Domain::Y), Domain::Y);
    const auto got = model->translate(x, Domain::X, Domain::Y, StyleSource::FromImage);
    EXPECT_TRUE(torch::equal(got, expected));
    EXPECT_EQ(got.sizes(), x.sizes());

    auto rng_a = make_generator(1);
    auto rng_b = make_generator(1);
    EXPECT_TRUE(torch::equal(model->translate(x, Domain::Y, Domain::X, StyleSource::Sampled, &rng_a),
                             model->translate(x, Domain::Y, Domain::X, StyleSource::Sampled, &rng_b)));
    EXPECT_THROW(model->translate(x, Domain::X, Domain::Y, StyleSource::Sampled), InvalidInputError);
}

TEST(Translator, CrossPluggingAndSharedSpaces) {
    torch::NoGradGuard no_grad;
    Translator model{small_config()};
    const auto x = random_image(32, 32, 7, 2);
    const auto y = random_image(32, 32, 8, 2);
    const auto cx = model->encode_content(x, Domain::X);
    const auto cy = model->encode_content(y, Domain::Y);
    const auto sx = model->encode_style(x, Domain::X);
    const auto sy = model->encode_style(y, Domain::Y);
    EXPECT_EQ(cx.sizes(), cy.sizes());
    EXPECT_EQ(sx.sizes(), sy.sizes());
    for (const auto& content : {cx, cy}) {
        for (const auto& style : {sx, sy}) {
            for (Domain d : {Domain::X, Domain::Y}) {
                const auto out = model->decode(content, style, d);
                EXPECT_EQ(out.sizes(), x.sizes());
                EXPECT_LE(out.abs().max().item<float>(), 1.0f);
            }
        }
    }
}

TEST(Translator, DecoderBoundedOnExtremeInputs) {
    torch::NoGradGuard no_grad;
    Translator model{small_config()};
    auto rng = make_generator(11);
    const auto content = torch::randn({3, model->config().content_channels(), 4, 4}, rng) * 50;
    const auto style = sample_style(rng, 3, 8) * 50;
    const auto out = model->decode(content, style, Domain::X);
    EXPECT_LE(out.abs().max().item<float>(), 1.0f);
}

TEST(Translator, ParameterGroupsArePartitioned) {
    Translator model{small_config()};
    const auto gen = model->generator_parameters();
    const auto dis = model->discriminator_parameters();
    EXPECT_EQ(gen.size() + dis.size(), model->parameters().size());
}

TEST(Checkpoint, RoundTripAndCompatibility) {
    const auto dir = std::filesystem::temp_directory_path() / "anodet_ckpt_test";
    std::filesystem::remove_all(dir);
    Translator model{small_config()};
    save_translator(model, dir / "model.pt");
    auto loaded = load_translator(dir / "model.pt");
    EXPECT_EQ(loaded->config(), model->config());

    torch::NoGradGuard no_grad;
    const auto x = random_image(32, 32, 12);
    EXPECT_TRUE(torch::equal(model->translate(x, Domain::X, Domain::Y, StyleSource::FromImage),
                             loaded->translate(x, Domain::X, Domain::Y, StyleSource::FromImage)));

    auto other_cfg = small_config();
    other_cfg.base_width = 4;
    Translator other{other_cfg};
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "model.pt").string());
    EXPECT_THROW(read_model_into(archive, other), FormatError);

    torch::serialize::OutputArchive bogus;
    bogus.write("format", c10::IValue(std::string("something-else")));
    bogus.save_to((dir / "bogus.pt").string());
    EXPECT_THROW(load_translator(dir / "bogus.pt"), FormatError);
    EXPECT_THROW(load_translator(dir / "missing.pt"), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, FingerprintRoundTrip) {
    auto cfg = small_config();
    cfg.init_std = 0.0125;
    EXPECT_EQ(TranslatorConfig::from_fingerprint(cfg.fingerprint()), cfg);
    EXPECT_THROW(TranslatorConfig::from_fingerprint("base_width=4"), FormatError);
}
