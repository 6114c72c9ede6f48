#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "anodet/error.hpp"
#include "anodet/evaluation.hpp"
#include "anodet/synth.hpp"

using namespace anodet;
using namespace anodet::synth;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.seed = 11;
    cfg.n_train = 6;
    cfg.n_test = 5;
    cfg.size = 32;
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) { return cv::norm(a, b, cv::NORM_INF); }

}  // namespace

TEST(SynthConfig, Validation) {
    SynthConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.f_lo = 0.0;
    EXPECT_THROW(cfg.validate(), InvalidInputError);
    cfg = SynthConfig{};
    cfg.f_lo = 0.5;
    cfg.f_hi = 0.4;
    EXPECT_THROW(cfg.validate(), InvalidInputError);
    cfg = SynthConfig{};
    cfg.f_hi = 1.0;
    EXPECT_THROW(cfg.validate(), InvalidInputError);
    cfg = SynthConfig{};
    cfg.size = 16;
    EXPECT_THROW(cfg.validate(), InvalidInputError);
}

TEST(GenHealthy, DeterministicBoundedAndVaried) {
    const SynthConfig cfg;
    const auto a = gen_healthy(cfg, 3);
    EXPECT_EQ(a.type(), CV_32FC3);
    EXPECT_EQ(a.rows, 64);
    EXPECT_EQ(max_abs_diff(a, gen_healthy(cfg, 3)), 0.0);
    for (std::int64_t i = 0; i < 100; ++i) {
        const auto x = gen_healthy(cfg, i);
        const auto y = gen_healthy(cfg, i + 100);
        double lo, hi;
        cv::minMaxLoc(x.reshape(1), &lo, &hi);
        EXPECT_GE(lo, -1.0);
        EXPECT_LE(hi, 1.0);
        cv::Mat diff;
        cv::absdiff(x, y, diff);
        cv::Mat any_channel;
        cv::transform(diff, any_channel, cv::Matx13f(1, 1, 1));
        const double differing = cv::countNonZero(any_channel > 1e-6) / static_cast<double>(x.total());
        EXPECT_GE(differing, 0.01) << "pair " << i;
    }
    SynthConfig other = cfg;
    other.seed = 1;
    EXPECT_GT(max_abs_diff(gen_healthy(cfg, 0), gen_healthy(other, 0)), 0.0);
}

TEST(GenHealthy, DomainsDifferInTint) {
    const SynthConfig cfg;
    double red_gap = 0.0, blue_gap = 0.0;
    for (std::int64_t i = 0; i < 50; ++i) {
        const auto mx = cv::mean(gen_healthy(cfg, i, Domain::X));
        const auto my = cv::mean(gen_healthy(cfg, i, Domain::Y));
        red_gap += (my[0] - mx[0]) / 50;
        blue_gap += (my[2] - mx[2]) / 50;
    }
    EXPECT_GT(red_gap, 0.05);
    EXPECT_LT(blue_gap, -0.05);
}

TEST(GenAnomalous, MaskFractionInRangeAndHealthyOutside) {
    const SynthConfig cfg;
    for (std::int64_t i = 0; i < 200; ++i) {
        const Domain d = i % 2 ? Domain::Y : Domain::X;
        const auto s = gen_anomalous(cfg, i, d);
        const double fraction = cv::countNonZero(s.mask) / static_cast<double>(s.mask.total());
        EXPECT_EQ(fraction, s.fraction);
        EXPECT_GE(fraction, cfg.f_lo);
        EXPECT_LE(fraction, cfg.f_hi);
        const auto healthy = gen_healthy(cfg, i, d);
        double worst = 0.0;
        for (int r = 0; r < healthy.rows; ++r) {
            for (int c = 0; c < healthy.cols; ++c) {
                if (s.mask.at<std::uint8_t>(r, c) != 0) continue;
                const auto diff = s.image.at<cv::Vec3f>(r, c) - healthy.at<cv::Vec3f>(r, c);
                for (int k = 0; k < 3; ++k) worst = std::max(worst, static_cast<double>(std::abs(diff[k])));
            }
        }
        EXPECT_LE(worst, 1e-6);
    }
    const auto a = gen_anomalous(cfg, 7);
    const auto b = gen_anomalous(cfg, 7);
    EXPECT_EQ(max_abs_diff(a.image, b.image), 0.0);
    EXPECT_EQ(cv::countNonZero(a.mask != b.mask), 0);
}

TEST(WriteDataset, LayoutDeterminismAndOracle) {
    const auto base = std::filesystem::temp_directory_path() / "anodet_synth_test";
    std::filesystem::remove_all(base);
    const auto cfg = small_config();
    const auto m1 = write_dataset(cfg, base / "a", 1);
    const auto m2 = write_dataset(cfg, base / "b", 3);
    ASSERT_EQ(m1.records.size(), static_cast<std::size_t>(2 * 6 + 2 * 5));
    EXPECT_EQ(m1.records, m2.records);
    for (const auto& entry : std::filesystem::directory_iterator(base / "a")) {
        const auto name = entry.path().filename();
        EXPECT_EQ(slurp(entry.path()), slurp(base / "b" / name)) << name;
    }
    const auto read = read_manifest(base / "a" / "manifest.csv");
    EXPECT_EQ(read.records, m1.records);
    EXPECT_NO_THROW(read.validate());
    EXPECT_EQ(read.records.front().patch_id, "train_x_00000");
    EXPECT_EQ(read.records[6].domain, Domain::Y);
    EXPECT_EQ(read.records.back().patch_id, "test_a_00004");
    EXPECT_TRUE(std::filesystem::exists(base / "a" / "test_a_00004_mask.png"));
    EXPECT_TRUE(std::filesystem::exists(base / "a" / "test_h_00000_mask.png"));
    for (const auto& r : read.records) {
        if (r.label == Label::Anomalous) {
            EXPECT_GE(r.lesion_coverage, cfg.f_lo);
            EXPECT_LE(r.lesion_coverage, cfg.f_hi);
        }
    }

    const auto scores = oracle_scores(read, base / "a" / "manifest.csv");
    ASSERT_EQ(scores.size(), 10u);
    eval::write_score_file(scores, base / "oracle.csv");
    const auto back = eval::read_score_file(base / "oracle.csv");
    std::vector<double> s;
    std::vector<int> y;
    for (const auto& r : back) {
        s.push_back(r.score);
        y.push_back(r.true_label);
    }
    EXPECT_EQ(eval::auc(eval::roc_points(s, y)), 1.0);
    std::filesystem::remove_all(base);
}
