#include <gtest/gtest.h>

#include "ffwm/gfilter.hpp"
#include "support.hpp"

using namespace ffwm;

TEST(BoxSum, MatchesDirectWindowSum) {
    torch::manual_seed(1);
    const auto x = torch::rand({1, 1, 7, 9}, torch::kFloat64);
    const auto s = box_sum(x, 2);
    auto acc = x.accessor<double, 4>();
    for (int64_t y = 0; y < 7; ++y) {
        for (int64_t c = 0; c < 9; ++c) {
            double want = 0.0;
            for (int64_t yy = std::max<int64_t>(0, y - 2); yy <= std::min<int64_t>(6, y + 2); ++yy) {
                for (int64_t xx = std::max<int64_t>(0, c - 2); xx <= std::min<int64_t>(8, c + 2); ++xx) {
                    want += acc[0][0][yy][xx];
                }
            }
            EXPECT_NEAR(s[0][0][y][c].item<double>(), want, 1e-12);
        }
    }
}

TEST(GuidedFilter, MatchesWindowOracle) {
    torch::manual_seed(2);
    for (int i = 0; i < 20; ++i) {
        const int64_t h = 2 + i % 11, w = 3 + (i * 7) % 13;
        const int r = 1 + i % 4;
        const double eps = (i % 2) ? 1e-2 : 1e-3;
        const auto p = torch::rand({3, h, w}, torch::kFloat64);
        const auto g = torch::rand({3, h, w}, torch::kFloat64);
        const auto got = guided_filter(p, g, {r, eps});
        EXPECT_LE((got - ffwm::testing::guided_filter_oracle(p, g, r, eps)).abs().max().item<double>(), 1e-10);
    }
}

TEST(GuidedFilter, SelfGuidedWithTinyEpsIsIdentity) {
    torch::manual_seed(3);
    const auto q = torch::rand({3, 12, 12}, torch::kFloat64);
    EXPECT_LE((guided_filter(q, q, {2, 1e-12}) - q).abs().max().item<double>(), 1e-5);
}

TEST(GuidedFilter, ConstantInputPassesThrough) {
    torch::manual_seed(4);
    const auto g = torch::rand({3, 10, 8}, torch::kFloat64);
    const auto p = torch::full({3, 10, 8}, 0.37, torch::kFloat64);
    EXPECT_LE((guided_filter(p, g, {3, 1e-2}) - p).abs().max().item<double>(), 1e-6);
}

TEST(GuidedFilter, BatchedAndFloatForms) {
    torch::manual_seed(5);
    const auto p = torch::rand({2, 3, 8, 8});
    const auto g = torch::rand({2, 3, 8, 8});
    const auto out = guided_filter(p, g, {2, 1e-2});
    EXPECT_EQ(out.scalar_type(), torch::kFloat32);
    for (int64_t n = 0; n < 2; ++n) {
        EXPECT_TRUE(torch::allclose(out[n], guided_filter(p[n], g[n], {2, 1e-2}), 1e-5, 1e-6));
    }
}

TEST(GuidedFilter, RejectsBadArguments) {
    const auto p = torch::rand({3, 4, 4});
    EXPECT_THROW(guided_filter(p, torch::rand({3, 4, 5}), {1, 1e-2}), InvalidArgument);
    EXPECT_THROW(guided_filter(p, p, {0, 1e-2}), InvalidArgument);
    EXPECT_THROW(guided_filter(p, p, {1, 0.0}), InvalidArgument);
}

TEST(GuidedFilter, RadiusFollowsResolution) {
    EXPECT_EQ(GuidedFilterParams::for_resolution(64).radius, 16);
    EXPECT_EQ(GuidedFilterParams::for_resolution(32).radius, 8);
}

TEST(GuidedFilter, GradientsAgreeWithFiniteDifferences) {
    torch::manual_seed(6);
    for (int i = 0; i < 6; ++i) {
        const int64_t h = 4 + i % 5, w = 4 + (i * 3) % 5;
        const auto p = torch::rand({2, h, w}, torch::kFloat64);
        const auto g = torch::rand({2, h, w}, torch::kFloat64);
        const GuidedFilterParams params{1 + i % 2, 1e-2};
        EXPECT_LE(gfilter_grad_check(p, g, params, GuidedGradWrt::Input), 1e-4);
        EXPECT_LE(gfilter_grad_check(p, g, params, GuidedGradWrt::Guide), 1e-4);
    }
}

TEST(GuidedFilter, AutogradMatchesManualBackward) {
    torch::manual_seed(7);
    auto p = torch::rand({1, 3, 6, 6}, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
    auto g = torch::rand({1, 3, 6, 6}, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
    const auto w = torch::rand({1, 3, 6, 6}, torch::kFloat64);
    (guided_filter(p, g, {1, 1e-2}) * w).sum().backward();
    // Directional derivative along a random direction.
    const auto dp = torch::randn_like(p);
    const double h = 1e-6;
    auto f = [&](const torch::Tensor& pp) {
        torch::NoGradGuard ng;
        return (guided_filter(pp, g.detach(), {1, 1e-2}) * w).sum().item<double>();
    };
    const double numeric = (f(p.detach() + h * dp) - f(p.detach() - h * dp)) / (2 * h);
    EXPECT_NEAR((p.grad() * dp).sum().item<double>(), numeric, 1e-6);
}
