#include "anodet/cli.hpp"

#include <ATen/Parallel.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>

#include "anodet/error.hpp"
#include "anodet/evaluation.hpp"
#include "anodet/image_io.hpp"
#include "anodet/manifest.hpp"
#include "anodet/patch_pipeline.hpp"
#include "anodet/scorer.hpp"
#include "anodet/synth.hpp"
#include "anodet/training.hpp"

namespace anodet::cli {
namespace fs = std::filesystem;

namespace {

/// Usage-level problem detected after parsing (bad paths, inconsistent inputs).
class UsageError : public Error {
public:
    using Error::Error;
};

struct Common {
    std::uint64_t seed = 0;
    fs::path out;
    std::size_t jobs = 1;
};

void add_common(CLI::App* sub, Common& common, bool out_required) {
    sub->add_option("--config", "Flat key=value config file; flags override its values")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Random seed")->capture_default_str();
    auto* out = sub->add_option("--out", common.out, "Output directory");
    if (out_required) out->required();
    sub->add_option("--jobs", common.jobs, "Worker count cap")->capture_default_str()->check(CLI::PositiveNumber);
}

/// Expands `--config FILE` into `--key=value` arguments for every key not
/// given on the command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    const auto it = std::find(args.begin(), args.end(), "--config");
    if (it == args.end() || it + 1 == args.end() || !fs::is_regular_file(*(it + 1))) return args;
    const auto items = CLI::ConfigINI().from_file(*(it + 1));
    std::vector<std::string> extra;
    for (const auto& item : items) {
        if (item.name.empty() || item.name == "config" || item.name.starts_with("++") || item.name.starts_with("--")) {
            continue;
        }
        const std::string flag = "--" + item.name;
        const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == flag || a.starts_with(flag + "=");
        });
        if (given) continue;
        for (const auto& value : item.inputs) extra.push_back(flag + "=" + value);
    }
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
}

void echo_config(const CLI::App* sub, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "config.resolved", std::ios::trunc);
    out << sub->config_to_str(true, false);
    if (!out) throw Error("cannot write " + (dir / "config.resolved").string());
}

bool is_image(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    static const std::vector<std::string> known{".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"};
    return std::find(known.begin(), known.end(), ext) != known.end() && !p.stem().string().ends_with("_mask");
}

std::vector<fs::path> list_images(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image(entry.path())) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::optional<fs::path> find_mask(const fs::path& image) {
    for (const char* ext : {".png", ".tif", ".tiff", ".bmp"}) {
        auto candidate = image.parent_path() / (image.stem().string() + "_mask" + ext);
        if (fs::exists(candidate)) return candidate;
    }
    return std::nullopt;
}

Manifest load_manifest_or_usage(const fs::path& path) {
    if (!fs::exists(path)) throw UsageError("manifest " + path.string() + " does not exist");
    return read_manifest(path);
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
    Common common;
    fs::path input;
    ExtractConfig extract;
    FilterParams filter;
    std::size_t max_train = 0;
};

void cmd_preprocess(const PreprocessArgs& a, const CLI::App* sub, std::ostream& out) {
    if (!fs::is_directory(a.input)) throw UsageError("input directory " + a.input.string() + " is not readable");
    std::vector<std::pair<fs::path, Split>> slides;
    const bool split_dirs = fs::is_directory(a.input / "train") || fs::is_directory(a.input / "test");
    if (split_dirs) {
        for (auto [name, split] : {std::pair{"train", Split::Train}, std::pair{"test", Split::Test}}) {
            if (!fs::is_directory(a.input / name)) continue;
            for (auto& p : list_images(a.input / name)) slides.emplace_back(p, split);
        }
    } else {
        for (auto& p : list_images(a.input)) slides.emplace_back(p, Split::Train);
    }
    if (slides.empty()) throw UsageError("no images found in " + a.input.string());

    echo_config(sub, a.common.out);
    const auto csv = a.common.out / "manifest.csv";
    std::vector<PatchRecord> records;
    std::vector<SlideImage> loaded;
    std::vector<std::size_t> slide_of;
    for (const auto& [path, split] : slides) {
        SlideImage slide;
        slide.id = path.stem().string();
        slide.pixels = read_rgb(path);
        if (const auto mask = find_mask(path)) slide.lesion_mask = read_gray(*mask) > 127;
        auto cfg = a.extract;
        cfg.split = split;
        const auto tissue = compute_tissue_mask(slide, a.filter);
        auto patches = extract_patches(slide, tissue, cfg);
        for (auto& r : patches) {
            records.push_back(std::move(r));
            slide_of.push_back(loaded.size());
        }
        loaded.push_back(std::move(slide));
    }

    Manifest manifest;
    manifest.records =
        a.max_train == 0 ? records : sample_healthy_train(records, a.max_train, a.common.seed);
    manifest.fingerprint.thresholds = a.extract.thresholds;
    manifest.fingerprint.patch_size = a.extract.patch_size;
    manifest.fingerprint.seed = a.common.seed;

    std::size_t cursor = 0;
    for (const auto& kept : manifest.records) {
        while (records[cursor].patch_id != kept.patch_id) ++cursor;
        write_image(patch_file(csv, kept.patch_id), crop_patch(loaded[slide_of[cursor]], kept));
    }
    manifest.validate();
    write_manifest(manifest, csv);
    out << "preprocess: " << slides.size() << " images, " << manifest.records.size() << " patches -> " << csv.string()
        << '\n';
}

// ---------------------------------------------------------------------------

struct SplitArgs {
    Common common;
    fs::path manifest;
};

void cmd_split(const SplitArgs& a, const CLI::App* sub, std::ostream& out) {
    auto manifest = load_manifest_or_usage(a.manifest);
    const fs::path out_dir = a.common.out.empty() ? a.manifest.parent_path() : a.common.out;
    manifest = split_domains(std::move(manifest), a.common.seed);
    echo_config(sub, out_dir);
    write_manifest(manifest, a.manifest);
    std::size_t nx = 0, ny = 0;
    for (const auto& r : manifest.records) {
        nx += r.domain == Domain::X;
        ny += r.domain == Domain::Y;
    }
    out << "split-domains: X=" << nx << " Y=" << ny << '\n';
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    Common common;
    fs::path manifest;
    fs::path resume;
    nn::TranslatorConfig model;
    nn::LossWeights weights;
    nn::OptimConfig optim;
    std::int64_t steps = 1000;
    std::int64_t batch_size = 1;
    std::int64_t checkpoint_every = 1000;
    std::int64_t log_every = 100;
};

void cmd_train(const TrainArgs& a, const CLI::App* sub, std::ostream& out) {
    const auto manifest = load_manifest_or_usage(a.manifest);
    std::vector<fs::path> fx, fy;
    for (const auto& r : manifest.records) {
        if (r.domain == Domain::X) fx.push_back(patch_file(a.manifest, r.patch_id));
        if (r.domain == Domain::Y) fy.push_back(patch_file(a.manifest, r.patch_id));
    }
    if (fx.empty() || fy.empty()) {
        throw UsageError("manifest has no domain assignment; run `anodet split-domains --manifest " +
                         a.manifest.string() + "` first");
    }
    if (a.batch_size > static_cast<std::int64_t>(std::min(fx.size(), fy.size()))) {
        throw UsageError("batch size exceeds the smaller domain");
    }
    at::set_num_threads(static_cast<int>(a.common.jobs));

    auto model_cfg = a.model;
    model_cfg.seed = a.common.seed;
    std::optional<nn::Trainer> trainer;
    if (!a.resume.empty()) {
        if (!fs::exists(a.resume)) throw UsageError("checkpoint " + a.resume.string() + " does not exist");
        trainer.emplace(nn::Trainer::from_checkpoint(a.resume));
        out << "train: resumed at step " << trainer->step_count() << '\n';
    } else {
        model_cfg.validate();
        a.weights.validate();
        trainer.emplace(model_cfg, a.weights, a.optim, a.common.seed);
    }
    echo_config(sub, a.common.out);

    const nn::FilePatchSource sx(fx), sy(fy);
    const nn::LoopConfig loop{a.steps, a.batch_size, a.checkpoint_every, a.common.out, a.common.seed};
    nn::run_training(*trainer, sx, sy, loop, [&](const nn::StepMetrics& m) {
        if (a.log_every > 0 && m.step % a.log_every == 0) {
            out << "step " << m.step << " img_recon " << m.img_recon << " cycle " << m.cycle << " g_adv " << m.g_adv
                << " d_adv " << m.d_adv << '\n';
        }
    });
    out << "train: " << trainer->step_count() << " steps, checkpoint " << (a.common.out / "checkpoint.pt").string()
        << '\n';
}

// ---------------------------------------------------------------------------

struct ScoreArgs {
    Common common;
    fs::path manifest;
    fs::path checkpoint;
    fs::path extractor;
    fs::path dump_dir;
    std::string metric = "ssim";
    std::string source = "X";
    std::string target = "Y";
};

int cmd_score(const ScoreArgs& a, const CLI::App* sub, std::ostream& out, std::ostream& err) {
    const auto manifest = load_manifest_or_usage(a.manifest);
    if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint " + a.checkpoint.string() + " does not exist");
    const auto metric = scoring::parse_metric(a.metric);
    std::shared_ptr<const scoring::PerceptualExtractor> extractor;
    if (!a.extractor.empty()) {
        extractor = std::make_shared<scoring::PerceptualExtractor>(scoring::PerceptualExtractor::load(a.extractor));
    }
    const scoring::Scorer scorer(nn::load_translator(a.checkpoint), metric, extractor, parse_domain(a.source),
                                 parse_domain(a.target));
    echo_config(sub, a.common.out);
    scoring::ScoreOptions options;
    options.jobs = a.common.jobs;
    if (!a.dump_dir.empty()) options.dump_dir = a.dump_dir;
    const auto run = scoring::score_manifest(manifest, a.manifest, scorer, options);
    eval::write_score_file(run.records, a.common.out / "scores.csv");
    out << "score: " << run.records.size() << " records -> " << (a.common.out / "scores.csv").string() << '\n';
    if (!run.errors.empty()) {
        scoring::write_score_errors(run.errors, a.common.out / "scores.errors.csv");
        err << "score: " << run.errors.size() << " patches failed, see "
            << (a.common.out / "scores.errors.csv").string() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    Common common;
    fs::path scores;
};

void cmd_evaluate(const EvaluateArgs& a, const CLI::App* sub, std::ostream& out) {
    if (!fs::exists(a.scores)) throw UsageError("score file " + a.scores.string() + " does not exist");
    echo_config(sub, a.common.out);
    const auto report = eval::render_report(a.scores, a.common.out);
    out << "evaluate: auc " << report.auc << " ap " << report.ap << " f1 " << report.f1 << " ca " << report.ca
        << " -> " << (a.common.out / "report.txt").string() << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    Common common;
    synth::SynthConfig cfg;
    bool oracle = false;
};

void cmd_synth(const SynthArgs& a, const CLI::App* sub, std::ostream& out) {
    auto cfg = a.cfg;
    cfg.seed = a.common.seed;
    try {
        cfg.validate();
    } catch (const InvalidInputError& e) {
        throw UsageError(e.what());
    }
    echo_config(sub, a.common.out);
    const auto manifest = synth::write_dataset(cfg, a.common.out, a.common.jobs);
    out << "synth: " << manifest.records.size() << " patches -> " << (a.common.out / "manifest.csv").string() << '\n';
    if (a.oracle) {
        const auto scores = synth::oracle_scores(manifest, a.common.out / "manifest.csv");
        eval::write_score_file(scores, a.common.out / "oracle_scores.csv");
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Unsupervised anomaly detection by example-guided image translation"};
    app.name("anodet");
    app.require_subcommand(1, 1);

    PreprocessArgs pre;
    auto* sp = app.add_subcommand("preprocess", "Tile images into a patch manifest");
    add_common(sp, pre.common, true);
    sp->add_option("--input", pre.input, "Directory of images (optionally with train/ and test/)")->required();
    sp->add_option("--patch-size", pre.extract.patch_size)->capture_default_str()->check(CLI::PositiveNumber);
    sp->add_option("--stride", pre.extract.stride, "0 = patch size")->capture_default_str();
    sp->add_flag("--keep-ambiguous", pre.extract.keep_ambiguous);
    sp->add_option("--tissue-min", pre.extract.thresholds.tissue_min)->capture_default_str();
    sp->add_option("--lesion-healthy-max", pre.extract.thresholds.lesion_healthy_max)->capture_default_str();
    sp->add_option("--lesion-anomalous-min", pre.extract.thresholds.lesion_anomalous_min)->capture_default_str();
    sp->add_option("--saturation-threshold", pre.filter.saturation_threshold)->capture_default_str();
    sp->add_option("--value-threshold", pre.filter.value_threshold)->capture_default_str();
    sp->add_option("--closing-radius", pre.filter.closing_radius)->capture_default_str();
    sp->add_option("--min-object-pixels", pre.filter.min_object_pixels)->capture_default_str();
    sp->add_option("--max-train-patches", pre.max_train, "0 = keep all")->capture_default_str();

    SplitArgs split;
    auto* ss = app.add_subcommand("split-domains", "Assign healthy training patches to domains X and Y");
    add_common(ss, split.common, false);
    ss->add_option("--manifest", split.manifest)->required();

    TrainArgs train;
    auto* st = app.add_subcommand("train", "Train the translator on domains X and Y");
    add_common(st, train.common, true);
    st->add_option("--manifest", train.manifest)->required();
    st->add_option("--resume", train.resume, "Trainer checkpoint to continue from");
    st->add_option("--steps", train.steps)->capture_default_str();
    st->add_option("--batch-size", train.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    st->add_option("--checkpoint-every", train.checkpoint_every, "0 = only at the end")->capture_default_str();
    st->add_option("--log-every", train.log_every)->capture_default_str();
    st->add_option("--base-width", train.model.base_width)->capture_default_str();
    st->add_option("--downsample", train.model.downsample)->capture_default_str();
    st->add_option("--res-blocks", train.model.res_blocks)->capture_default_str();
    st->add_option("--style-width", train.model.style_width)->capture_default_str();
    st->add_option("--style-downsample", train.model.style_downsample)->capture_default_str();
    st->add_option("--style-dim", train.model.style_dim)->capture_default_str();
    st->add_option("--mlp-dim", train.model.mlp_dim)->capture_default_str();
    st->add_option("--mlp-layers", train.model.mlp_layers)->capture_default_str();
    st->add_option("--disc-width", train.model.disc_width)->capture_default_str();
    st->add_option("--disc-layers", train.model.disc_layers)->capture_default_str();
    st->add_option("--disc-scales", train.model.disc_scales)->capture_default_str();
    st->add_option("--init-std", train.model.init_std)->capture_default_str();
    st->add_option("--w-img-recon", train.weights.img_recon)->capture_default_str();
    st->add_option("--w-content-recon", train.weights.content_recon)->capture_default_str();
    st->add_option("--w-style-recon", train.weights.style_recon)->capture_default_str();
    st->add_option("--w-cycle", train.weights.cycle)->capture_default_str();
    st->add_option("--w-adv", train.weights.adv)->capture_default_str();
    st->add_option("--lr", train.optim.lr)->capture_default_str();
    st->add_option("--beta1", train.optim.beta1)->capture_default_str();
    st->add_option("--beta2", train.optim.beta2)->capture_default_str();
    st->add_option("--lr-decay-every", train.optim.lr_decay_every)->capture_default_str();
    st->add_option("--lr-decay", train.optim.lr_decay)->capture_default_str();

    ScoreArgs score;
    auto* sc = app.add_subcommand("score", "Score test patches by reconstruction error");
    add_common(sc, score.common, true);
    sc->add_option("--manifest", score.manifest)->required();
    sc->add_option("--checkpoint", score.checkpoint)->required();
    sc->add_option("--metric", score.metric)->capture_default_str()->check(CLI::IsMember({"ssim", "perceptual"}));
    sc->add_option("--extractor", score.extractor, "Saved perceptual extractor weights");
    sc->add_option("--dump-reconstructions", score.dump_dir, "Write query|reconstruction images here");
    sc->add_option("--source", score.source)->capture_default_str()->check(CLI::IsMember({"X", "Y"}));
    sc->add_option("--target", score.target)->capture_default_str()->check(CLI::IsMember({"X", "Y"}));

    EvaluateArgs evaluate;
    auto* se = app.add_subcommand("evaluate", "Compute ROC/AP/F1/CA report from a score file");
    add_common(se, evaluate.common, true);
    se->add_option("--scores", evaluate.scores)->required();

    SynthArgs syn;
    auto* sy = app.add_subcommand("synth", "Generate the synthetic two-domain benchmark");
    add_common(sy, syn.common, true);
    sy->add_option("--n-train", syn.cfg.n_train, "Training patches per domain")->capture_default_str();
    sy->add_option("--n-test", syn.cfg.n_test, "Test patches per class")->capture_default_str();
    sy->add_option("--size", syn.cfg.size)->capture_default_str();
    sy->add_option("--f-lo", syn.cfg.f_lo)->capture_default_str();
    sy->add_option("--f-hi", syn.cfg.f_hi)->capture_default_str();
    sy->add_option("--base-frequency", syn.cfg.base_frequency)->capture_default_str();
    sy->add_option("--octaves", syn.cfg.octaves)->capture_default_str();
    sy->add_option("--anomaly-frequency", syn.cfg.anomaly_frequency)->capture_default_str();
    sy->add_option("--tint-delta", syn.cfg.tint_delta)->capture_default_str();
    sy->add_flag("--oracle-scores", syn.oracle, "Also write mask-area scores to oracle_scores.csv");

    std::vector<std::string> expanded;
    try {
        expanded = expand_config(args);
    } catch (const CLI::Error& e) {
        err << "anodet: config: " << e.what() << '\n';
        return kExitUsage;
    }
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "anodet: " << e.what() << '\n';
        if (!app.get_subcommands().empty()) err << "run `anodet " << app.get_subcommands().front()->get_name() << " --help` for usage\n";
        return kExitUsage;
    }

    try {
        if (sp->parsed()) cmd_preprocess(pre, sp, out);
        if (ss->parsed()) cmd_split(split, ss, out);
        if (st->parsed()) cmd_train(train, st, out);
        if (sc->parsed()) return cmd_score(score, sc, out, err);
        if (se->parsed()) cmd_evaluate(evaluate, se, out);
        if (sy->parsed()) cmd_synth(syn, sy, out);
    } catch (const UsageError& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitUsage;
    } catch (const FormatError& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitUsage;
    } catch (const InvalidInputError& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DegenerateInputError& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitUsage;
    } catch (const InsufficientDataError& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "anodet: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace anodet::cli
