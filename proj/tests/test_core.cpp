#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "ffwm/config.hpp"
#include "ffwm/core.hpp"
#include "ffwm/data.hpp"
#include "ffwm/rng.hpp"

using namespace ffwm;

namespace {

Sample valid_sample() {
    SyntheticFaceSpec spec;
    spec.identity_seed = 7;
    spec.pose_deg = 45;
    spec.illum_id = 3;
    spec.resolution = 32;
    return render_synthetic(spec);
}

bool has_message(const std::vector<std::string>& v, const std::string& needle) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

}  // namespace

TEST(Image, RejectsWrongShapeAndRange) {
    EXPECT_THROW(Image(torch::zeros({1, 4, 4})), InvalidArgument);
    EXPECT_THROW(Image(torch::full({3, 4, 4}, 1.5)), InvalidArgument);
    EXPECT_THROW(Image(torch::full({3, 4, 4}, -0.1)), InvalidArgument);
    EXPECT_THROW(Image(torch::full({3, 4, 4}, std::nan(""))), InvalidArgument);
    const Image ok(torch::rand({3, 8, 12}));
    EXPECT_EQ(ok.height(), 8);
    EXPECT_EQ(ok.width(), 12);
}

TEST(Mask, AcceptsOnlyBinaryValues) {
    EXPECT_THROW(Mask(torch::full({1, 4, 4}, 0.5)), InvalidArgument);
    EXPECT_TRUE(Mask(torch::zeros({4, 4})).empty());
    EXPECT_FALSE(Mask(torch::ones({1, 4, 4})).empty());
}

TEST(FlowField, ClampsToImageExtent) {
    auto t = torch::zeros({2, 4, 6});
    t[0].fill_(100.0);
    t[1].fill_(-100.0);
    const FlowField f(t);
    EXPECT_FLOAT_EQ(f.tensor()[0].max().item<float>(), 6.f);
    EXPECT_FLOAT_EQ(f.tensor()[1].min().item<float>(), -4.f);
    EXPECT_THROW(FlowField(torch::zeros({3, 4, 4})), InvalidArgument);
}

TEST(SampleFlow, BilinearAtFractionalPoint) {
    auto t = torch::zeros({2, 2, 2});
    t[0][0][1] = 4.0;  // dx at (x=1,y=0)
    t[1][1][1] = 8.0;  // dy at (x=1,y=1)
    const Point2 p = sample_flow(t, {0.5f, 0.5f});
    EXPECT_FLOAT_EQ(p.x, 1.0f);
    EXPECT_FLOAT_EQ(p.y, 2.0f);
}

TEST(ValidateSample, SyntheticSampleIsClean) {
    const auto errors = validate_sample(valid_sample());
    EXPECT_TRUE(errors.empty()) << errors.front();
}

TEST(ValidateSample, ReportsEachViolation) {
    {
        auto s = valid_sample();
        s.profile.landmarks.pop_back();
        EXPECT_TRUE(has_message(validate_sample(s), "landmark count"));
    }
    {
        auto s = valid_sample();
        s.frontal.landmarks[0].x = -3.f;
        EXPECT_TRUE(has_message(validate_sample(s), "out of bounds"));
    }
    {
        auto s = valid_sample();
        s.profile.mask = Mask(torch::zeros({1, 32, 32}));
        EXPECT_TRUE(has_message(validate_sample(s), "mask empty"));
    }
    {
        auto s = valid_sample();
        s.frontal = FaceView{Image(torch::rand({3, 30, 30})), Mask(torch::ones({1, 30, 30})), s.frontal.landmarks};
        EXPECT_TRUE(has_message(validate_sample(s), "multiple of 4"));
    }
    {
        auto s = valid_sample();
        auto lm = s.frontal.landmarks;  // rescaled so only the size check fires
        for (auto& p : lm) {
            p.x *= 27.f / 32.f;
            p.y *= 27.f / 32.f;
        }
        s.frontal = FaceView{Image(torch::rand({3, 28, 28})), Mask(torch::ones({1, 28, 28})), lm};
        EXPECT_TRUE(has_message(validate_sample(s), "resolution mismatch"));
    }
    {
        auto s = valid_sample();
        s.gt_forward_flow = FlowField(s.gt_forward_flow->tensor() + 2.0);
        EXPECT_TRUE(has_message(validate_sample(s), "flow/landmark"));
    }
}

TEST(Downsample, AveragesBlocks) {
    const auto t = torch::arange(16, torch::kFloat32).reshape({1, 1, 4, 4});
    const auto d = downsample(t, 2);
    ASSERT_EQ(d.sizes(), (std::vector<int64_t>{1, 1, 2, 2}));
    EXPECT_FLOAT_EQ(d[0][0][0][0].item<float>(), (0 + 1 + 4 + 5) / 4.f);
    EXPECT_FLOAT_EQ(d[0][0][1][1].item<float>(), (10 + 11 + 14 + 15) / 4.f);
    EXPECT_TRUE(torch::equal(downsample(t, 1), t));
    EXPECT_THROW(downsample(t, 3), InvalidArgument);
    EXPECT_THROW(downsample(t, 8), InvalidArgument);
}

TEST(Config, DefaultsAndDerivedValues) {
    Config c;
    EXPECT_EQ(c.lambdas, (LambdaWeights{5.0, 1.0, 0.1, 15.0, 1.0}));
    EXPECT_EQ(c.warmup_steps(), c.total_steps / 10);
    EXPECT_EQ(c.guided_radius(), c.resolution / 4);
    c.gfilter_warmup_steps = 7;
    c.gfilter_radius = 3;
    EXPECT_EQ(c.warmup_steps(), 7);
    EXPECT_EQ(c.guided_radius(), 3);
}

TEST(Config, TextRoundTrip) {
    Config c;
    c.lambdas = {1.5, 2.0, 0.25, 0.0, 3.0};
    c.lr_flow = 1.25e-5;
    c.seed = 99;
    c.vgg_layer_weights = {1.0, 1.0, 0.5, 0.5, 0.1};
    const Config back = parse_config(c.to_text());
    EXPECT_EQ(back.lambdas, c.lambdas);
    EXPECT_DOUBLE_EQ(back.lr_flow, c.lr_flow);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_EQ(back.vgg_layer_weights, c.vgg_layer_weights);
    EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(Config, RejectsMalformedInput) {
    EXPECT_THROW(parse_config("nonsense_key = 1\n"), InvalidArgument);
    EXPECT_THROW(parse_config("batch_size = eight\n"), InvalidArgument);
    EXPECT_THROW(parse_config("lambdas = 1, 2, 3\n"), InvalidArgument);
    EXPECT_THROW(parse_config("batch_size 8\n"), InvalidArgument);
    EXPECT_THROW(parse_config("resolution = 30\n"), InvalidArgument);
    EXPECT_NO_THROW(parse_config("# comment only\n\nbatch_size = 4  # trailing\n"));
    EXPECT_THROW(load_config("/nonexistent/dir/x.cfg"), IoError);
}

TEST(Config, ShippedFilesParse) {
    const std::filesystem::path dir = FFWM_SOURCE_DIR "/configs";
    const Config paper = load_config(dir / "paper.cfg");
    EXPECT_EQ(paper.lambdas, (LambdaWeights{5.0, 1.0, 0.1, 15.0, 1.0}));
    EXPECT_DOUBLE_EQ(paper.lr_main, 4e-4);
    EXPECT_DOUBLE_EQ(paper.lr_flow, 5e-5);
    EXPECT_EQ(paper.batch_size, 8);
    EXPECT_EQ(paper.resolution, 128);
    EXPECT_EQ(paper.guided_radius(), 32);
    const Config desk = load_config(dir / "desk.cfg");
    EXPECT_EQ(desk.resolution, 64);
    EXPECT_EQ(desk.lambdas, paper.lambdas);
}

TEST(Rng, MatchesSplitmixReference) {
    // First splitmix64 output for state 0.
    Rng r(0);
    EXPECT_EQ(r.next_u64(), 0xe220a8397b1dcdafULL);
}

TEST(Rng, RangesAndDeterminism) {
    Rng a(5), b(5);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_EQ(u, b.uniform());
        const int k = a.uniform_int(-2, 3);
        ASSERT_GE(k, -2);
        ASSERT_LE(k, 3);
        b.uniform_int(-2, 3);
    }
}

TEST(Rng, DeriveSeedSeparatesStreams) {
    std::set<uint64_t> seen;
    for (uint64_t s = 0; s < 4; ++s) {
        for (uint64_t t = 0; t < 50; ++t) {
            seen.insert(derive_seed(s, {t}));
        }
        seen.insert(derive_seed(s, {}));
    }
    EXPECT_EQ(seen.size(), 4u * 51u);
    EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
    EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
}
