#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "anodet/manifest.hpp"

namespace anodet::nn {

/// Architecture sizes of the translator and its discriminators.
struct TranslatorConfig {
    std::int64_t base_width = 64;
    /// Stride-2 stages in the content encoder and upsampling stages in the decoder.
    std::int64_t downsample = 2;
    std::int64_t res_blocks = 4;
    std::int64_t style_width = 64;
    std::int64_t style_downsample = 4;
    std::int64_t style_dim = 8;
    std::int64_t mlp_dim = 256;
    std::int64_t mlp_layers = 3;
    std::int64_t disc_width = 64;
    std::int64_t disc_layers = 4;
    std::int64_t disc_scales = 3;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    std::int64_t content_channels() const { return base_width << downsample; }
    /// Number of values the style MLP emits: gamma and beta per residual-block channel.
    std::int64_t adain_param_count() const { return 2 * res_blocks * content_channels(); }

    void validate() const;
    /// Stable `key=value;...` rendering stored in checkpoints.
    std::string fingerprint() const;
    static TranslatorConfig from_fingerprint(const std::string& text);

    bool operator==(const TranslatorConfig&) const = default;
};

/// Per-residual-block AdaIN scale and shift, each (N, C).
struct AdaINParams {
    std::vector<torch::Tensor> gamma;
    std::vector<torch::Tensor> beta;
};

/// Adaptive instance normalization: per sample and channel, normalize over
/// spatial positions and apply `gamma * z + beta`. `gamma`/`beta` are (N, C) or (C).
torch::Tensor adain(const torch::Tensor& features, const torch::Tensor& gamma, const torch::Tensor& beta,
                    double epsilon = 1e-5);

/// i.i.d. standard-normal style code of length `style_dim`.
torch::Tensor sample_style(at::Generator& rng, std::int64_t style_dim);
/// Batch of `n` style codes, shape (n, style_dim).
torch::Tensor sample_style(at::Generator& rng, std::int64_t n, std::int64_t style_dim);

at::Generator make_generator(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Building blocks.

enum class Norm { None, Instance, Layer };
enum class Activation { None, Relu, LeakyRelu, Tanh };

struct ConvBlockImpl : torch::nn::Module {
    ConvBlockImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                  Norm norm, Activation activation);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Conv2d conv{nullptr};
    torch::Tensor ln_gamma;
    torch::Tensor ln_beta;
    Norm norm;
    Activation activation;
};
TORCH_MODULE(ConvBlock);

struct ResBlockImpl : torch::nn::Module {
    explicit ResBlockImpl(std::int64_t dim);
    torch::Tensor forward(torch::Tensor x);

    ConvBlock first{nullptr};
    ConvBlock second{nullptr};
};
TORCH_MODULE(ResBlock);

/// Residual block whose two normalizations are AdaIN layers sharing one (gamma, beta) pair.
struct AdaINResBlockImpl : torch::nn::Module {
    explicit AdaINResBlockImpl(std::int64_t dim);
    torch::Tensor forward(torch::Tensor x, const torch::Tensor& gamma, const torch::Tensor& beta);

    torch::nn::Conv2d first{nullptr};
    torch::nn::Conv2d second{nullptr};
};
TORCH_MODULE(AdaINResBlock);

struct ContentEncoderImpl : torch::nn::Module {
    explicit ContentEncoderImpl(const TranslatorConfig& cfg);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(ContentEncoder);

struct StyleEncoderImpl : torch::nn::Module {
    explicit StyleEncoderImpl(const TranslatorConfig& cfg);
    /// Returns (N, style_dim).
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Sequential layers{nullptr};
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(StyleEncoder);

/// The style-parameter MLP: style code -> flat AdaIN parameters.
struct StyleMlpImpl : torch::nn::Module {
    explicit StyleMlpImpl(const TranslatorConfig& cfg);
    torch::Tensor forward(torch::Tensor style);

    torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(StyleMlp);

struct DecoderImpl : torch::nn::Module {
    explicit DecoderImpl(const TranslatorConfig& cfg);
    torch::Tensor forward(torch::Tensor content, const AdaINParams& params);

    torch::nn::ModuleList res_blocks{nullptr};
    torch::nn::Sequential upsampling{nullptr};
};
TORCH_MODULE(Decoder);

/// Least-squares PatchGAN discriminator applied at several image scales.
struct MultiScaleDiscriminatorImpl : torch::nn::Module {
    explicit MultiScaleDiscriminatorImpl(const TranslatorConfig& cfg);
    std::vector<torch::Tensor> forward(torch::Tensor x);

    torch::nn::ModuleList scales{nullptr};
};
TORCH_MODULE(MultiScaleDiscriminator);

// ---------------------------------------------------------------------------

enum class StyleSource { Sampled, FromImage };

/// Two-domain content/style translator: per-domain content and style
/// encoders, per-domain AdaIN decoders, one shared style MLP and a
/// discriminator per domain. Images are (3,H,W) or (N,3,H,W) in [-1,1].
class TranslatorImpl : public torch::nn::Module {
public:
    explicit TranslatorImpl(TranslatorConfig cfg);

    const TranslatorConfig& config() const { return cfg_; }

    torch::Tensor encode_content(const torch::Tensor& image, Domain domain);
    torch::Tensor encode_style(const torch::Tensor& image, Domain domain);
    AdaINParams style_to_adain(const torch::Tensor& style);
    torch::Tensor decode(const torch::Tensor& content, const torch::Tensor& style, Domain domain);

    /// decode(encode_content(image, source), style, target), where the style is
    /// either drawn from the prior or extracted from `image` by the target
    /// domain's style encoder.
    torch::Tensor translate(const torch::Tensor& image, Domain source, Domain target, StyleSource style_source,
                            at::Generator* rng = nullptr);

    std::vector<torch::Tensor> discriminate(const torch::Tensor& image, Domain domain);

    std::vector<torch::Tensor> generator_parameters();
    std::vector<torch::Tensor> discriminator_parameters();

    ContentEncoder content_x{nullptr}, content_y{nullptr};
    StyleEncoder style_x{nullptr}, style_y{nullptr};
    Decoder decoder_x{nullptr}, decoder_y{nullptr};
    StyleMlp mlp{nullptr};
    MultiScaleDiscriminator dis_x{nullptr}, dis_y{nullptr};

private:
    void initialize_weights();

    TranslatorConfig cfg_;
};
TORCH_MODULE(Translator);

// ---------------------------------------------------------------------------
// Checkpoints: a torch archive holding the format tag, the config fingerprint
// and every subnetwork's weights.

inline constexpr const char* kCheckpointFormat = "anodet-ckpt-v1";

void write_model(torch::serialize::OutputArchive& archive, Translator& model);
/// Verifies the format tag and rebuilds a translator from the stored config.
Translator read_model(torch::serialize::InputArchive& archive);
/// Loads weights into an existing translator; the stored config must match.
void read_model_into(torch::serialize::InputArchive& archive, Translator& model);

void save_translator(Translator& model, const std::filesystem::path& path);
Translator load_translator(const std::filesystem::path& path);

}  // namespace anodet::nn
