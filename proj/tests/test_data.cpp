#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "ffwm/data.hpp"
#include "ffwm/image_io.hpp"
#include "ffwm/losses.hpp"
#include "ffwm/rng.hpp"
#include "ffwm/warp.hpp"
#include "support.hpp"

using namespace ffwm;
using ffwm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

double masked_l1(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& m) {
    return ((a - b).abs() * m).sum().item<double>() / (3.0 * m.sum().item<double>());
}

torch::Tensor erode(const torch::Tensor& m) { return -torch::max_pool2d(-m.unsqueeze(0), 3, 1, 1).squeeze(0); }

SyntheticFaceSpec spec_for(int id, int pose, int illum, int res = 64) {
    SyntheticFaceSpec s;
    s.identity_id = id;
    s.identity_seed = derive_seed(77, {static_cast<uint64_t>(id)});
    s.pose_deg = pose;
    s.illum_id = illum;
    s.resolution = res;
    return s;
}

}  // namespace

TEST(Synthetic, PoseZeroIsIdentity) {
    const auto s = render_synthetic(spec_for(1, 0, 5));
    EXPECT_TRUE(torch::equal(s.profile.image.tensor(), s.frontal.image.tensor()));
    EXPECT_EQ(s.gt_forward_flow->tensor().abs().max().item<float>(), 0.f);
    EXPECT_EQ(s.gt_reverse_flow->tensor().abs().max().item<float>(), 0.f);
    const PoseWarp w(0);
    EXPECT_EQ(w.pose_fraction(), 0.0);
    EXPECT_EQ(w.forward(0.3), 0.3);
}

TEST(Synthetic, RejectsBadSpecs) {
    EXPECT_THROW(render_synthetic(spec_for(1, 95, 0)), InvalidArgument);
    EXPECT_THROW(render_synthetic(spec_for(1, -91, 0)), InvalidArgument);
    EXPECT_THROW(render_synthetic(spec_for(1, 30, 0, 30)), InvalidArgument);
}

TEST(Synthetic, Deterministic) {
    const auto a = render_synthetic(spec_for(3, -45, 7));
    const auto b = render_synthetic(spec_for(3, -45, 7));
    EXPECT_TRUE(torch::equal(a.profile.image.tensor(), b.profile.image.tensor()));
    EXPECT_TRUE(torch::equal(a.gt_forward_flow->tensor(), b.gt_forward_flow->tensor()));
    const auto c = render_synthetic(spec_for(4, -45, 7));
    EXPECT_FALSE(torch::equal(a.frontal.image.tensor(), c.frontal.image.tensor()));
}

TEST(Synthetic, FrontalIsNotMirrorSymmetric) {
    for (int id = 0; id < 10; ++id) {
        const auto f = render_synthetic(spec_for(id, 0, 0)).frontal.image.tensor();
        EXPECT_GT((f - hflip(f)).abs().max().item<float>(), 0.1f) << "identity " << id;
    }
}

TEST(Synthetic, PoseWarpIsMonotoneAndInvertible) {
    for (int pose = -90; pose <= 90; pose += 15) {
        const PoseWarp w(pose);
        double prev = -1e9;
        for (double u = -1.5; u <= 1.5; u += 0.01) {
            const double v = w.forward(u);
            ASSERT_GT(v, prev) << "pose " << pose;
            prev = v;
            ASSERT_NEAR(w.inverse(v), u, 1e-9) << "pose " << pose;
        }
        // The squeeze narrows the face as |pose| grows.
        EXPECT_LE(w.squeeze(), 1.0);
    }
    EXPECT_LT(PoseWarp(90).squeeze(), PoseWarp(45).squeeze());
}

TEST(Synthetic, GeneratedPairsSatisfyFlowProperties) {
    for (int id = 0; id < 6; ++id) {
        for (int pose : {-90, -60, -30, 15, 45, 75, 90}) {
            const int illum = (id * 7 + pose + 90) % kIlluminations;
            const auto r = render_synthetic_full(spec_for(id, pose, illum));
            const auto& s = r.sample;
            const auto problems = validate_sample(s);
            ASSERT_TRUE(problems.empty()) << problems.front();
            const auto fm = s.frontal.mask.tensor();
            const auto fwd = s.gt_forward_flow->tensor();
            const auto rev = s.gt_reverse_flow->tensor();

            const double back = masked_l1(ffwm::testing::warp_oracle(r.clean_profile.tensor(), fwd).to(torch::kFloat32),
                                          s.frontal.image.tensor(), fm);
            EXPECT_LE(back, 2.0 / 255.0) << "id " << id << " pose " << pose;

            const auto to_profile = warp(s.frontal.image.tensor(), rev);
            const double round_trip = masked_l1(warp(to_profile, fwd), s.frontal.image.tensor(), erode(fm));
            EXPECT_LE(round_trip, 4.0 / 255.0) << "id " << id << " pose " << pose;

            const double lmk =
                landmark_flow_loss(fwd, s.profile.landmarks, s.frontal.landmarks).item<double>();
            EXPECT_LT(lmk, 0.5);
            const double lmk_rev =
                landmark_flow_loss(rev, s.frontal.landmarks, s.profile.landmarks).item<double>();
            EXPECT_LT(lmk_rev, 0.5);

            if (std::abs(pose) >= 60) {
                const double incons = masked_l1(to_profile, s.profile.image.tensor(), s.profile.mask.tensor());
                EXPECT_GE(incons, 0.05) << "id " << id << " pose " << pose << " illum " << illum;
            }
        }
    }
}

TEST(Synthetic, InconsistencyGrowsWithPose) {
    double prev = -1.0;
    for (int pose : {0, 30, 60, 90}) {
        double sum = 0.0;
        for (int id = 0; id < 4; ++id) {
            const auto s = render_synthetic(spec_for(id, pose, 2));
            sum += masked_l1(warp(s.frontal.image.tensor(), s.gt_reverse_flow->tensor()), s.profile.image.tensor(),
                             s.profile.mask.tensor());
        }
        EXPECT_GT(sum, prev) << "pose " << pose;
        prev = sum;
    }
}

TEST(Synthetic, LandmarkLayout) {
    const auto s = render_synthetic(spec_for(2, 30, 0));
    EXPECT_EQ(s.profile.landmarks.size(), static_cast<size_t>(kLandmarkCount));
    EXPECT_EQ(LandmarkRegions::all().size(), 4u);
    for (const auto& group : LandmarkRegions::all()) {
        for (int i : group) {
            EXPECT_LT(i, kLandmarkCount);
        }
    }
}

TEST(Manifest, DeterministicSplitAndGallery) {
    TempDir dir("manifest");
    const auto a = build_manifest(dir.path(), 10, default_poses(), 5);
    const auto b = build_manifest(dir.path(), 10, default_poses(), 5);
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.train_ids.size(), 8u);
    EXPECT_EQ(a.test_ids.size(), 2u);
    std::set<int> train(a.train_ids.begin(), a.train_ids.end());
    for (int t : a.test_ids) {
        EXPECT_EQ(train.count(t), 0u);
    }
    EXPECT_EQ(a.gallery().size(), a.test_ids.size());
    for (const auto& g : a.gallery()) {
        EXPECT_FALSE(a.is_train(g.identity_id));
    }
    const auto c = build_manifest(dir.path(), 10, default_poses(), 6);
    EXPECT_NE(a.to_json(), c.to_json());
    // pose 0 once per identity, every other pose with each illumination
    EXPECT_EQ(a.records.size(), 10u * (1u + 12u * kIlluminations) + 2u);
    EXPECT_EQ(a.split_records(true).size(), 8u * (1u + 12u * kIlluminations));
}

TEST(Manifest, SmallSplitsAndErrors) {
    TempDir dir("manifest_err");
    const auto m = build_manifest(dir.path(), 2, {0, 30}, 1, 32, 2);
    EXPECT_EQ(m.train_ids.size(), 1u);
    EXPECT_EQ(m.test_ids.size(), 1u);
    EXPECT_THROW(build_manifest(dir.path(), 1, {0}, 1), InvalidArgument);
    EXPECT_THROW(build_manifest(dir.path(), 4, {0, 120}, 1), InvalidArgument);
    {
        std::ofstream f(dir / "file");
        f << "x";
    }
    EXPECT_THROW(build_manifest(dir / "file", 4, {0}, 1), IoError);
}

TEST(Manifest, JsonRoundTripAndFileIo) {
    TempDir dir("manifest_io");
    const auto m = build_manifest(dir.path(), 5, {0, -30, 60}, 9, 32, 3);
    const auto back = DatasetManifest::from_json(m.to_json());
    EXPECT_EQ(back.to_json(), m.to_json());
    save_manifest(m, dir / "m.json");
    EXPECT_EQ(load_manifest(dir / "m.json").to_json(), m.to_json());
    EXPECT_THROW(load_manifest(dir / "missing.json"), IoError);
    EXPECT_THROW(DatasetManifest::from_json("{\"format\":\"other\"}"), InvalidArgument);
    EXPECT_THROW(DatasetManifest::from_json("not json"), InvalidArgument);
}

TEST(Manifest, RecordsRenderValidSamples) {
    TempDir dir("manifest_render");
    const auto m = build_manifest(dir.path(), 3, {0, 45}, 2, 32, 2);
    for (const auto& r : m.records) {
        const auto s = render_record(m, r);
        EXPECT_TRUE(validate_sample(s).empty());
        EXPECT_EQ(s.identity_id, r.identity_id);
        if (r.gallery) {
            EXPECT_EQ(s.pose_deg, 0);
        }
    }
}

TEST(RealData, ExportedLayoutLoadsBack) {
    TempDir dir("real");
    const auto m = build_manifest(dir / "syn", 2, {0, 30}, 4, 32, 2);
    const auto files = export_real_layout(m, dir / "real");
    EXPECT_FALSE(files.empty());
    const int id = m.identities.front().id;
    const auto pair_dir = dir / "real" / std::to_string(id);
    const auto s = load_real_pair(pair_dir, 30, 1, 32);
    EXPECT_TRUE(validate_sample(s).empty());
    EXPECT_FALSE(s.gt_forward_flow.has_value());
    const auto ref = render_record(m, {id, 30, 1, false});
    // 8-bit quantization is the only loss.
    EXPECT_LE((s.profile.image.tensor() - ref.profile.image.tensor()).abs().max().item<float>(), 0.5f / 255.f + 1e-6f);
    EXPECT_TRUE(torch::equal(s.profile.mask.tensor(), ref.profile.mask.tensor()));

    // Downscaled load keeps landmarks in the image.
    const auto small = load_real_pair(pair_dir, 30, 1, 16);
    EXPECT_EQ(small.profile.image.width(), 16);
    EXPECT_TRUE(validate_sample(small).empty());
}

TEST(RealData, EightBitValuesAreNormalized) {
    TempDir dir("real8");
    auto img = torch::zeros({8, 8, 3}, torch::kUInt8);
    img.select(2, 0).fill_(255);
    img.select(2, 1).fill_(128);
    write_png_u8(dir / "x.png", img);
    const auto t = read_png(dir / "x.png");
    EXPECT_EQ(t.size(0), 3);
    EXPECT_NEAR(t[0].mean().item<float>(), 1.f, 1e-6);
    EXPECT_NEAR(t[1].mean().item<float>(), 128.f / 255.f, 1e-6);
    EXPECT_NEAR(t[2].mean().item<float>(), 0.f, 1e-6);
}

TEST(RealData, IngestionErrorsNameTheFile) {
    TempDir dir("real_err");
    const auto m = build_manifest(dir / "syn", 2, {0, 30}, 4, 32, 1);
    export_real_layout(m, dir / "real");
    const auto id_dir = dir / "real" / std::to_string(m.identities.front().id);

    auto expect_io_error = [](auto&& fn, const std::string& needle) {
        try {
            fn();
            ADD_FAILURE() << "expected IoError mentioning " << needle;
        } catch (const IoError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };

    fs::remove(id_dir / "30_0.mask.png");
    expect_io_error([&] { load_real_pair(id_dir, 30, 0, 32); }, "30_0.mask.png");

    export_real_layout(m, dir / "real");
    fs::remove(id_dir / "30_0.lmk.txt");
    expect_io_error([&] { load_real_pair(id_dir, 30, 0, 32); }, "30_0.lmk.txt");

    export_real_layout(m, dir / "real");
    {
        std::ofstream out(id_dir / "30_0.lmk.txt");
        out << "1 2\n3 4\n";
    }
    expect_io_error([&] { load_real_pair(id_dir, 30, 0, 32); }, "landmark count mismatch");

    expect_io_error([&] { load_real_pair(dir / "real" / "nope", 30, 0, 32); }, "nope");
}

TEST(Collate, StacksSamples) {
    std::vector<Sample> v{render_synthetic(spec_for(0, 30, 1, 32)), render_synthetic(spec_for(1, -60, 2, 32))};
    const auto b = collate(v);
    EXPECT_EQ(b.size(), 2);
    EXPECT_EQ(b.profile.sizes(), (std::vector<int64_t>{2, 3, 32, 32}));
    EXPECT_EQ(b.gt_forward.sizes(), (std::vector<int64_t>{2, 2, 32, 32}));
    EXPECT_EQ(b.poses, (std::vector<int>{30, -60}));
    EXPECT_TRUE(torch::equal(b.frontal[1], v[1].frontal.image.tensor()));
    EXPECT_THROW(collate({}), InvalidArgument);
}
