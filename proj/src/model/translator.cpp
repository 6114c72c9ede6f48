#include "anodet/translator.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <map>
#include <sstream>

#include "anodet/error.hpp"

namespace anodet::nn {
namespace F = torch::nn::functional;

namespace {

struct BatchView {
    torch::Tensor batch;
    bool squeezed = false;

    torch::Tensor restore(const torch::Tensor& t) const { return squeezed ? t.squeeze(0) : t; }
};

BatchView as_image_batch(const torch::Tensor& image, const char* op) {
    if (!image.defined() || image.numel() == 0) throw InvalidInputError(std::string(op) + ": empty image");
    BatchView view;
    if (image.dim() == 3) {
        view.batch = image.unsqueeze(0);
        view.squeezed = true;
    } else if (image.dim() == 4) {
        view.batch = image;
    } else {
        throw ShapeError(std::string(op) + ": expected (3,H,W) or (N,3,H,W), got " + std::to_string(image.dim()) +
                         " dims");
    }
    if (view.batch.size(1) != 3) {
        throw ShapeError(std::string(op) + ": expected 3 channels, got " + std::to_string(view.batch.size(1)));
    }
    return view;
}

torch::Tensor activate(const torch::Tensor& x, Activation activation) {
    switch (activation) {
        case Activation::Relu: return torch::relu(x);
        case Activation::LeakyRelu: return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
        case Activation::Tanh: return torch::tanh(x);
        case Activation::None: break;
    }
    return x;
}

torch::nn::Conv2d make_conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                            std::int64_t padding) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream stream(text);
    for (std::string item; std::getline(stream, item, ';');) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) continue;
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return kv;
}

}  // namespace

// ---------------------------------------------------------------------------

void TranslatorConfig::validate() const {
    auto positive = [](std::int64_t v, const char* name) {
        if (v < 1) throw InvalidInputError(std::string("translator ") + name + " must be >= 1");
    };
    positive(base_width, "base_width");
    positive(style_width, "style_width");
    positive(style_dim, "style_dim");
    positive(mlp_dim, "mlp_dim");
    positive(disc_width, "disc_width");
    positive(disc_layers, "disc_layers");
    positive(disc_scales, "disc_scales");
    positive(res_blocks, "res_blocks");
    if (downsample < 0 || downsample > 6) throw InvalidInputError("translator downsample must be in [0,6]");
    if (style_downsample < 0) throw InvalidInputError("translator style_downsample must be >= 0");
    if (mlp_layers < 2) throw InvalidInputError("translator mlp_layers must be >= 2");
    if (!(init_std > 0.0)) throw InvalidInputError("translator init_std must be positive");
}

std::string TranslatorConfig::fingerprint() const {
    std::ostringstream out;
    out.precision(17);
    out << "base_width=" << base_width << ";downsample=" << downsample << ";res_blocks=" << res_blocks
        << ";style_width=" << style_width << ";style_downsample=" << style_downsample << ";style_dim=" << style_dim
        << ";mlp_dim=" << mlp_dim << ";mlp_layers=" << mlp_layers << ";disc_width=" << disc_width
        << ";disc_layers=" << disc_layers << ";disc_scales=" << disc_scales << ";init_std=" << init_std
        << ";seed=" << seed;
    return out.str();
}

TranslatorConfig TranslatorConfig::from_fingerprint(const std::string& text) {
    const auto kv = parse_kv(text);
    auto get = [&](const char* key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(std::string("checkpoint config lacks '") + key + "'");
        return it->second;
    };
    TranslatorConfig cfg;
    try {
        cfg.base_width = std::stoll(get("base_width"));
        cfg.downsample = std::stoll(get("downsample"));
        cfg.res_blocks = std::stoll(get("res_blocks"));
        cfg.style_width = std::stoll(get("style_width"));
        cfg.style_downsample = std::stoll(get("style_downsample"));
        cfg.style_dim = std::stoll(get("style_dim"));
        cfg.mlp_dim = std::stoll(get("mlp_dim"));
        cfg.mlp_layers = std::stoll(get("mlp_layers"));
        cfg.disc_width = std::stoll(get("disc_width"));
        cfg.disc_layers = std::stoll(get("disc_layers"));
        cfg.disc_scales = std::stoll(get("disc_scales"));
        cfg.init_std = std::stod(get("init_std"));
        cfg.seed = std::stoull(get("seed"));
    } catch (const std::logic_error& e) {
        throw FormatError(std::string("malformed checkpoint config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------

torch::Tensor adain(const torch::Tensor& features, const torch::Tensor& gamma, const torch::Tensor& beta,
                    double epsilon) {
    if (features.dim() != 4) throw ShapeError("adain: features must be (N,C,H,W)");
    if (!(epsilon > 0.0)) throw InvalidInputError("adain: epsilon must be positive");
    const auto n = features.size(0);
    const auto c = features.size(1);
    auto reshape = [&](const torch::Tensor& p, const char* name) {
        if (p.dim() == 1 && p.size(0) == c) return p.view({1, c, 1, 1});
        if (p.dim() == 2 && p.size(1) == c && (p.size(0) == n || p.size(0) == 1)) return p.view({p.size(0), c, 1, 1});
        throw ShapeError(std::string("adain: ") + name + " must have one entry per channel (" + std::to_string(c) +
                         ")");
    };
    const auto g = reshape(gamma, "gamma");
    const auto b = reshape(beta, "beta");
    const auto mean = features.mean({2, 3}, /*keepdim=*/true);
    const auto var = features.var({2, 3}, /*unbiased=*/false, /*keepdim=*/true);
    return g * (features - mean) / torch::sqrt(var + epsilon) + b;
}

at::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

torch::Tensor sample_style(at::Generator& rng, std::int64_t style_dim) {
    if (style_dim < 1) throw InvalidInputError("style_dim must be >= 1");
    return torch::randn({style_dim}, rng);
}

torch::Tensor sample_style(at::Generator& rng, std::int64_t n, std::int64_t style_dim) {
    if (style_dim < 1 || n < 1) throw InvalidInputError("style batch and style_dim must be >= 1");
    return torch::randn({n, style_dim}, rng);
}

// ---------------------------------------------------------------------------

ConvBlockImpl::ConvBlockImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                             std::int64_t padding, Norm norm_, Activation activation_)
    : norm(norm_), activation(activation_) {
    conv = register_module("conv", make_conv(in, out, kernel, stride, padding));
    if (norm == Norm::Layer) {
        ln_gamma = register_parameter("ln_gamma", torch::ones({out}));
        ln_beta = register_parameter("ln_beta", torch::zeros({out}));
    }
}

torch::Tensor ConvBlockImpl::forward(torch::Tensor x) {
    x = conv(x);
    switch (norm) {
        case Norm::Instance:
            x = F::instance_norm(x, F::InstanceNormFuncOptions().eps(1e-5));
            break;
        case Norm::Layer: {
            const std::vector<std::int64_t> shape(x.sizes().begin() + 1, x.sizes().end());
            x = torch::layer_norm(x, shape, {}, {}, 1e-5);
            x = x * ln_gamma.view({1, -1, 1, 1}) + ln_beta.view({1, -1, 1, 1});
            break;
        }
        case Norm::None:
            break;
    }
    return activate(x, activation);
}

ResBlockImpl::ResBlockImpl(std::int64_t dim) {
    first = register_module("first", ConvBlock(dim, dim, 3, 1, 1, Norm::Instance, Activation::Relu));
    second = register_module("second", ConvBlock(dim, dim, 3, 1, 1, Norm::Instance, Activation::None));
}

torch::Tensor ResBlockImpl::forward(torch::Tensor x) { return x + second(first(x)); }

AdaINResBlockImpl::AdaINResBlockImpl(std::int64_t dim) {
    first = register_module("first", make_conv(dim, dim, 3, 1, 1));
    second = register_module("second", make_conv(dim, dim, 3, 1, 1));
}

torch::Tensor AdaINResBlockImpl::forward(torch::Tensor x, const torch::Tensor& gamma, const torch::Tensor& beta) {
    auto h = torch::relu(adain(first(x), gamma, beta));
    h = adain(second(h), gamma, beta);
    return x + h;
}

ContentEncoderImpl::ContentEncoderImpl(const TranslatorConfig& cfg) {
    torch::nn::Sequential seq;
    std::int64_t dim = cfg.base_width;
    seq->push_back(ConvBlock(3, dim, 7, 1, 3, Norm::Instance, Activation::Relu));
    for (std::int64_t i = 0; i < cfg.downsample; ++i) {
        seq->push_back(ConvBlock(dim, 2 * dim, 4, 2, 1, Norm::Instance, Activation::Relu));
        dim *= 2;
    }
    for (std::int64_t i = 0; i < cfg.res_blocks; ++i) seq->push_back(ResBlock(dim));
    layers = register_module("layers", seq);
}

torch::Tensor ContentEncoderImpl::forward(torch::Tensor x) { return layers->forward(x); }

StyleEncoderImpl::StyleEncoderImpl(const TranslatorConfig& cfg) {
    torch::nn::Sequential seq;
    std::int64_t dim = cfg.style_width;
    seq->push_back(ConvBlock(3, dim, 7, 1, 3, Norm::None, Activation::Relu));
    for (std::int64_t i = 0; i < cfg.style_downsample; ++i) {
        const std::int64_t next = i < 2 ? 2 * dim : dim;
        seq->push_back(ConvBlock(dim, next, 4, 2, 1, Norm::None, Activation::Relu));
        dim = next;
    }
    layers = register_module("layers", seq);
    head = register_module("head", make_conv(dim, cfg.style_dim, 1, 1, 0));
}

torch::Tensor StyleEncoderImpl::forward(torch::Tensor x) {
    x = layers->forward(x);
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1));
    return head(x).flatten(1);
}

StyleMlpImpl::StyleMlpImpl(const TranslatorConfig& cfg) {
    torch::nn::Sequential seq;
    seq->push_back(torch::nn::Linear(cfg.style_dim, cfg.mlp_dim));
    seq->push_back(torch::nn::ReLU());
    for (std::int64_t i = 0; i < cfg.mlp_layers - 2; ++i) {
        seq->push_back(torch::nn::Linear(cfg.mlp_dim, cfg.mlp_dim));
        seq->push_back(torch::nn::ReLU());
    }
    seq->push_back(torch::nn::Linear(cfg.mlp_dim, cfg.adain_param_count()));
    layers = register_module("layers", seq);
}

torch::Tensor StyleMlpImpl::forward(torch::Tensor style) { return layers->forward(style); }

DecoderImpl::DecoderImpl(const TranslatorConfig& cfg) {
    std::int64_t dim = cfg.content_channels();
    torch::nn::ModuleList blocks;
    for (std::int64_t i = 0; i < cfg.res_blocks; ++i) blocks->push_back(AdaINResBlock(dim));
    res_blocks = register_module("res_blocks", blocks);

    torch::nn::Sequential seq;
    for (std::int64_t i = 0; i < cfg.downsample; ++i) {
        seq->push_back(torch::nn::Upsample(
            torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
        seq->push_back(ConvBlock(dim, dim / 2, 5, 1, 2, Norm::Layer, Activation::Relu));
        dim /= 2;
    }
    seq->push_back(ConvBlock(dim, 3, 7, 1, 3, Norm::None, Activation::Tanh));
    upsampling = register_module("upsampling", seq);
}

torch::Tensor DecoderImpl::forward(torch::Tensor content, const AdaINParams& params) {
    for (std::size_t i = 0; i < res_blocks->size(); ++i) {
        content = res_blocks[i]->as<AdaINResBlock>()->forward(content, params.gamma[i], params.beta[i]);
    }
    return upsampling->forward(content);
}

MultiScaleDiscriminatorImpl::MultiScaleDiscriminatorImpl(const TranslatorConfig& cfg) {
    torch::nn::ModuleList list;
    for (std::int64_t s = 0; s < cfg.disc_scales; ++s) {
        torch::nn::Sequential seq;
        std::int64_t dim = cfg.disc_width;
        seq->push_back(ConvBlock(3, dim, 4, 2, 1, Norm::None, Activation::LeakyRelu));
        for (std::int64_t i = 0; i < cfg.disc_layers - 1; ++i) {
            seq->push_back(ConvBlock(dim, 2 * dim, 4, 2, 1, Norm::None, Activation::LeakyRelu));
            dim *= 2;
        }
        seq->push_back(make_conv(dim, 1, 1, 1, 0));
        list->push_back(seq);
    }
    scales = register_module("scales", list);
}

std::vector<torch::Tensor> MultiScaleDiscriminatorImpl::forward(torch::Tensor x) {
    std::vector<torch::Tensor> outputs;
    for (std::size_t s = 0; s < scales->size(); ++s) {
        outputs.push_back(scales[s]->as<torch::nn::Sequential>()->forward(x));
        x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false));
    }
    return outputs;
}

// ---------------------------------------------------------------------------

TranslatorImpl::TranslatorImpl(TranslatorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    content_x = register_module("content_x", ContentEncoder(cfg_));
    content_y = register_module("content_y", ContentEncoder(cfg_));
    style_x = register_module("style_x", StyleEncoder(cfg_));
    style_y = register_module("style_y", StyleEncoder(cfg_));
    decoder_x = register_module("decoder_x", Decoder(cfg_));
    decoder_y = register_module("decoder_y", Decoder(cfg_));
    mlp = register_module("mlp", StyleMlp(cfg_));
    dis_x = register_module("dis_x", MultiScaleDiscriminator(cfg_));
    dis_y = register_module("dis_y", MultiScaleDiscriminator(cfg_));
    initialize_weights();
}

void TranslatorImpl::initialize_weights() {
    torch::NoGradGuard no_grad;
    auto rng = make_generator(cfg_.seed);
    for (const auto& module : modules(/*include_self=*/false)) {
        if (auto* conv = module->as<torch::nn::Conv2d>()) {
            conv->weight.normal_(0.0, cfg_.init_std, rng);
            if (conv->bias.defined()) conv->bias.zero_();
        } else if (auto* linear = module->as<torch::nn::Linear>()) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(linear->weight.size(1)));
            linear->weight.uniform_(-bound, bound, rng);
            linear->bias.uniform_(-bound, bound, rng);
        }
    }
}

torch::Tensor TranslatorImpl::encode_content(const torch::Tensor& image, Domain domain) {
    const auto view = as_image_batch(image, "encode_content");
    const std::int64_t factor = std::int64_t{1} << cfg_.downsample;
    if (view.batch.size(2) % factor != 0 || view.batch.size(3) % factor != 0) {
        throw ShapeError("encode_content: spatial size " + std::to_string(view.batch.size(2)) + "x" +
                         std::to_string(view.batch.size(3)) + " is not divisible by " + std::to_string(factor));
    }
    auto& encoder = domain == Domain::Y ? content_y : content_x;
    return view.restore(encoder->forward(view.batch));
}

torch::Tensor TranslatorImpl::encode_style(const torch::Tensor& image, Domain domain) {
    const auto view = as_image_batch(image, "encode_style");
    const std::int64_t minimum = std::int64_t{1} << cfg_.style_downsample;
    if (view.batch.size(2) < minimum || view.batch.size(3) < minimum) {
        throw ShapeError("encode_style: image smaller than " + std::to_string(minimum) + " pixels");
    }
    auto& encoder = domain == Domain::Y ? style_y : style_x;
    return view.restore(encoder->forward(view.batch));
}

AdaINParams TranslatorImpl::style_to_adain(const torch::Tensor& style) {
    const bool single = style.dim() == 1;
    const auto batch = single ? style.unsqueeze(0) : style;
    if (batch.dim() != 2 || batch.size(1) != cfg_.style_dim) {
        throw ShapeError("style_to_adain: style code must have length " + std::to_string(cfg_.style_dim));
    }
    const auto flat = mlp->forward(batch);
    const auto channels = cfg_.content_channels();
    AdaINParams params;
    for (std::int64_t b = 0; b < cfg_.res_blocks; ++b) {
        params.gamma.push_back(flat.narrow(1, 2 * b * channels, channels));
        params.beta.push_back(flat.narrow(1, 2 * b * channels + channels, channels));
    }
    return params;
}

torch::Tensor TranslatorImpl::decode(const torch::Tensor& content, const torch::Tensor& style, Domain domain) {
    const bool single = content.dim() == 3;
    const auto batch = single ? content.unsqueeze(0) : content;
    if (batch.dim() != 4 || batch.size(1) != cfg_.content_channels()) {
        throw ShapeError("decode: content code must have " + std::to_string(cfg_.content_channels()) + " channels");
    }
    const auto style_batch = style.dim() == 1 ? style.unsqueeze(0) : style;
    if (style_batch.dim() != 2 || style_batch.size(0) != batch.size(0)) {
        throw ShapeError("decode: content and style batch sizes differ");
    }
    const auto params = style_to_adain(style_batch);
    auto& decoder = domain == Domain::Y ? decoder_y : decoder_x;
    const auto image = decoder->forward(batch, params);
    return single ? image.squeeze(0) : image;
}

torch::Tensor TranslatorImpl::translate(const torch::Tensor& image, Domain source, Domain target,
                                        StyleSource style_source, at::Generator* rng) {
    const auto content = encode_content(image, source);
    torch::Tensor style;
    if (style_source == StyleSource::FromImage) {
        style = encode_style(image, target);
    } else {
        if (rng == nullptr) throw InvalidInputError("translate: sampled style requires a random generator");
        style = image.dim() == 3 ? sample_style(*rng, cfg_.style_dim)
                                 : sample_style(*rng, image.size(0), cfg_.style_dim);
        style = style.to(image.dtype());
    }
    return decode(content, style, target);
}

std::vector<torch::Tensor> TranslatorImpl::discriminate(const torch::Tensor& image, Domain domain) {
    const auto view = as_image_batch(image, "discriminate");
    return (domain == Domain::Y ? dis_y : dis_x)->forward(view.batch);
}

std::vector<torch::Tensor> TranslatorImpl::generator_parameters() {
    std::vector<torch::Tensor> params;
    for (torch::nn::Module* part : std::initializer_list<torch::nn::Module*>{
             content_x.get(), content_y.get(), style_x.get(), style_y.get(), decoder_x.get(), decoder_y.get(),
             mlp.get()}) {
        const auto p = part->parameters();
        params.insert(params.end(), p.begin(), p.end());
    }
    return params;
}

std::vector<torch::Tensor> TranslatorImpl::discriminator_parameters() {
    auto params = dis_x->parameters();
    const auto y = dis_y->parameters();
    params.insert(params.end(), y.begin(), y.end());
    return params;
}

// ---------------------------------------------------------------------------

void write_model(torch::serialize::OutputArchive& archive, Translator& model) {
    archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
    archive.write("config", c10::IValue(model->config().fingerprint()));
    torch::serialize::OutputArchive weights;
    model->save(weights);
    archive.write("model", weights);
}

namespace {

TranslatorConfig read_config(torch::serialize::InputArchive& archive) {
    c10::IValue format;
    if (!archive.try_read("format", format) || !format.isString() || format.toStringRef() != kCheckpointFormat) {
        throw FormatError(std::string("not an ") + kCheckpointFormat + " checkpoint");
    }
    c10::IValue config;
    if (!archive.try_read("config", config) || !config.isString()) throw FormatError("checkpoint lacks a config");
    return TranslatorConfig::from_fingerprint(config.toStringRef());
}

}  // namespace

Translator read_model(torch::serialize::InputArchive& archive) {
    Translator model(read_config(archive));
    torch::serialize::InputArchive weights;
    if (!archive.try_read("model", weights)) throw FormatError("checkpoint lacks model weights");
    model->load(weights);
    return model;
}

void read_model_into(torch::serialize::InputArchive& archive, Translator& model) {
    const auto stored = read_config(archive);
    if (!(stored == model->config())) {
        throw FormatError("checkpoint config '" + stored.fingerprint() + "' does not match model config '" +
                          model->config().fingerprint() + "'");
    }
    torch::serialize::InputArchive weights;
    if (!archive.try_read("model", weights)) throw FormatError("checkpoint lacks model weights");
    model->load(weights);
}

void save_translator(Translator& model, const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    write_model(archive, model);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(path.string());
}

Translator load_translator(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("checkpoint " + path.string() + " does not exist");
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw FormatError("cannot read checkpoint " + path.string());
    }
    return read_model(archive);
}

}  // namespace anodet::nn
