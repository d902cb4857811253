#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ffwm/eval.hpp"
#include "ffwm/image_io.hpp"
#include "ffwm/rng.hpp"
#include "ffwm/train.hpp"
#include "support.hpp"

using namespace ffwm;
using ffwm::testing::TempDir;

namespace {

// Mann-Whitney count over all positive/negative pairs, ties worth one half.
double auc_oracle(const std::vector<double>& s, const std::vector<bool>& same) {
    double wins = 0.0, pairs = 0.0;
    for (size_t i = 0; i < s.size(); ++i) {
        for (size_t j = 0; j < s.size(); ++j) {
            if (same[i] && !same[j]) {
                pairs += 1;
                wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
        }
    }
    return wins / pairs;
}

Sample consistent_sample(int id, int pose) {
    SyntheticFaceSpec s;
    s.identity_id = id;
    s.identity_seed = derive_seed(3, {static_cast<uint64_t>(id)});
    s.pose_deg = pose;
    s.resolution = 32;
    s.illumination = false;
    s.dropout = false;
    return render_synthetic(s);
}

}  // namespace

TEST(Rank1, SelfMatchIsPerfect) {
    torch::manual_seed(1);
    const auto g = torch::randn({6, 16});
    const std::vector<int> ids{0, 1, 2, 3, 4, 5};
    const auto r = rank1_from_embeddings(g, ids, g, ids, {15, 30, 45, 60, 75, 90});
    for (const auto& [pose, rate] : r.rates) {
        EXPECT_DOUBLE_EQ(rate, 100.0);
    }
    EXPECT_DOUBLE_EQ(r.average, 100.0);
    EXPECT_EQ(r.gallery_size, 6);
}

TEST(Rank1, MatchesBruteForceAndIgnoresProbeOrder) {
    torch::manual_seed(2);
    const int n_gallery = 5, n_probes = 60;
    const auto gallery = torch::randn({n_gallery, 8}, torch::kFloat64);
    std::vector<int> gallery_ids{10, 11, 12, 13, 14};
    std::vector<int> ids, poses;
    Rng rng(4);
    for (int i = 0; i < n_probes; ++i) {
        ids.push_back(10 + rng.uniform_int(0, n_gallery - 1));
        poses.push_back((rng.uniform_int(1, 3) * 30) * (rng.uniform() < 0.5 ? -1 : 1));
    }
    // Probes near their own gallery entry plus noise large enough to cause some misses.
    auto probes = torch::randn({n_probes, 8}, torch::kFloat64) * 1.2;
    for (int i = 0; i < n_probes; ++i) {
        probes[i] += gallery[ids[static_cast<size_t>(i)] - 10];
    }
    const auto r = rank1_from_embeddings(gallery, gallery_ids, probes, ids, poses);

    std::map<int, std::pair<int, int>> want;  // |pose| -> hits, count
    for (int i = 0; i < n_probes; ++i) {
        double best = -2.0;
        int arg = -1;
        for (int g = 0; g < n_gallery; ++g) {
            const auto p = probes[i];
            const auto q = gallery[g];
            const double c = (p * q).sum().item<double>() / (p.norm().item<double>() * q.norm().item<double>());
            if (c > best) {
                best = c;
                arg = g;
            }
        }
        auto& w = want[std::abs(poses[static_cast<size_t>(i)])];
        w.first += gallery_ids[static_cast<size_t>(arg)] == ids[static_cast<size_t>(i)] ? 1 : 0;
        w.second += 1;
    }
    for (const auto& [bin, hc] : want) {
        EXPECT_NEAR(r.rates.at(bin), 100.0 * hc.first / hc.second, 1e-9);
        EXPECT_EQ(r.probes.at(bin), hc.second);
    }

    std::vector<int64_t> perm(static_cast<size_t>(n_probes));
    std::iota(perm.begin(), perm.end(), 0);
    Rng shuffle_rng(9);
    shuffle_rng.shuffle(perm);
    std::vector<int> pid, ppose;
    for (const auto k : perm) {
        pid.push_back(ids[static_cast<size_t>(k)]);
        ppose.push_back(poses[static_cast<size_t>(k)]);
    }
    const auto shuffled = rank1_from_embeddings(gallery, gallery_ids, probes.index_select(0, torch::tensor(perm)), pid,
                                                ppose);
    EXPECT_EQ(shuffled.rates, r.rates);
    EXPECT_DOUBLE_EQ(shuffled.average, r.average);
}

TEST(Rank1, ProbeWithoutGalleryIsAProtocolError) {
    const auto g = torch::randn({2, 4});
    EXPECT_THROW(rank1_from_embeddings(g, {0, 1}, torch::randn({1, 4}), {7}, {30}), ProtocolError);
    EXPECT_THROW(rank1_from_embeddings(g, {0}, g, {0, 1}, {30, 30}), InvalidArgument);
}

TEST(Rank1, AverageSkipsFrontalBin) {
    RecognitionResult r;
    r.rates = {{0, 100.0}, {30, 50.0}, {60, 70.0}};
    EXPECT_DOUBLE_EQ(r.average_from(1), 60.0);
    EXPECT_DOUBLE_EQ(r.average_from(60), 70.0);
}

TEST(Rank1, OracleFrontalizerIsPerfectOnManifest) {
    TempDir dir("eval_rank1");
    const auto m = build_manifest(dir.path(), 10, {0, 30, -90}, 3, 32, 2);
    Embedder e;
    const auto r = rank1_recognition(oracle_frontalizer(), m, e);
    EXPECT_DOUBLE_EQ(r.average, 100.0);
    EXPECT_EQ(r.gallery_size, 2);
    EXPECT_EQ(r.probes.at(90), 2 * 2);
}

TEST(Verification, PerfectAndInvertedScores) {
    const std::vector<double> s{0.9, 0.8, 0.1, 0.2, 0.95, 0.05};
    const std::vector<bool> same{true, true, false, false, true, false};
    auto r = verification_scores(s, same);
    EXPECT_DOUBLE_EQ(r.auc, 1.0);
    EXPECT_DOUBLE_EQ(r.accuracy, 100.0);
    std::vector<double> neg(s.size());
    std::transform(s.begin(), s.end(), neg.begin(), [](double v) { return -v; });
    EXPECT_DOUBLE_EQ(verification_scores(neg, same).auc, 0.0);
}

TEST(Verification, AucMatchesPairCountingWithTies) {
    Rng rng(5);
    std::vector<double> s;
    std::vector<bool> same;
    for (int i = 0; i < 300; ++i) {
        same.push_back(i % 3 == 0);
        // coarse quantization produces many ties
        s.push_back(std::round((rng.uniform() + (same.back() ? 0.3 : 0.0)) * 10.0) / 10.0);
    }
    EXPECT_NEAR(verification_scores(s, same).auc, auc_oracle(s, same), 1e-12);
    const std::vector<double> flat(10, 0.5);
    const std::vector<bool> half{true, false, true, false, true, false, true, false, true, false};
    EXPECT_DOUBLE_EQ(verification_scores(flat, half).auc, 0.5);
}

TEST(Verification, MonotoneTransformInvariance) {
    Rng rng(6);
    std::vector<double> s, cubed;
    std::vector<bool> same;
    for (int i = 0; i < 200; ++i) {
        same.push_back(rng.uniform() < 0.5);
        s.push_back(rng.normal() + (same.back() ? 0.8 : 0.0));
        cubed.push_back(s.back() * s.back() * s.back());
    }
    const auto a = verification_scores(s, same);
    const auto b = verification_scores(cubed, same);
    EXPECT_DOUBLE_EQ(a.auc, b.auc);
    EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
}

TEST(Verification, RandomScoresGiveChanceAuc) {
    Rng rng(7);
    std::vector<double> s;
    std::vector<bool> same;
    for (int i = 0; i < 4000; ++i) {
        same.push_back(i % 2 == 0);
        s.push_back(rng.uniform());
    }
    const auto r = verification_scores(s, same);
    EXPECT_NEAR(r.auc, 0.5, 0.03);
    EXPECT_NEAR(r.accuracy, 50.0, 4.0);
}

TEST(Verification, Errors) {
    EXPECT_THROW(verification_scores({0.5}, {true}), InvalidArgument);
    EXPECT_THROW(verification_scores({0.5, 0.6}, {true, true}), InvalidArgument);
    EXPECT_THROW(verification_scores({0.5, 0.6}, {true}), InvalidArgument);
}

TEST(Verification, PairsAreBalancedAndFromTestSplit) {
    TempDir dir("eval_pairs");
    const auto m = build_manifest(dir.path(), 10, {0, 45}, 3, 32, 2);
    const auto pairs = make_verification_pairs(m, 40, 1);
    ASSERT_EQ(pairs.size(), 40u);
    int same = 0;
    for (const auto& p : pairs) {
        same += p.same ? 1 : 0;
        EXPECT_EQ(p.same, p.a.identity_id == p.b.identity_id);
        EXPECT_FALSE(m.is_train(p.a.identity_id));
        EXPECT_FALSE(m.is_train(p.b.identity_id));
    }
    EXPECT_EQ(same, 20);
    const auto again = make_verification_pairs(m, 40, 1);
    EXPECT_EQ(again.front().b.pose_deg, pairs.front().b.pose_deg);
    Embedder e;
    const auto r = verification(oracle_frontalizer(), m, pairs, e);
    EXPECT_DOUBLE_EQ(r.auc, 1.0);  // identical frontal images for same pairs
}

TEST(Illumination, OracleOnConsistentDataIsInterpolationNoise) {
    std::vector<Sample> samples;
    for (int id = 0; id < 4; ++id) {
        for (int pose : {-90, -45, 30, 75}) {
            samples.push_back(consistent_sample(id, pose));
        }
    }
    const auto r = illumination_metrics(oracle_frontalizer(), samples);
    EXPECT_LT(r.mean_warped_vs_profile, 4.0 / 255.0);
    EXPECT_LT(r.mean_synth_vs_frontal, 4.0 / 255.0);
    EXPECT_EQ(r.warped_vs_profile.size(), 4u);
    const auto j = nlohmann::json::parse(illum_json(r));
    EXPECT_TRUE(j.contains("mean_warped_vs_profile"));
}

TEST(Illumination, MaskedMeanL1PerElement) {
    auto a = torch::zeros({2, 3, 4, 4});
    auto b = torch::zeros({2, 3, 4, 4});
    b[0].fill_(0.5);
    b[1].fill_(0.25);
    auto m = torch::zeros({2, 1, 4, 4});
    m[0].fill_(1.0);
    m[1].slice(2, 0, 1).fill_(1.0);
    b[1].slice(2, 1, 4).fill_(9.0);  // outside the mask
    const auto l = masked_mean_l1(a, b, m);
    EXPECT_FLOAT_EQ(l[0].item<float>(), 0.5f);
    EXPECT_FLOAT_EQ(l[1].item<float>(), 0.25f);
}

TEST(Qualitative, FilesAndWhiteZeroFlowPanel) {
    TempDir dir("qual");
    std::vector<Sample> samples{consistent_sample(0, 0), consistent_sample(1, 60)};
    const auto files = dump_qualitative(raw_profile_frontalizer(), samples, dir / "out");
    ASSERT_EQ(files.size(), 6u);
    for (const auto& f : files) {
        EXPECT_TRUE(std::filesystem::exists(f)) << f;
    }
    const auto flow_png = read_png(dir / "out" / "sample_000_flow.png");
    EXPECT_EQ(flow_png.min().item<float>(), 1.f);
    const auto tri = read_png(dir / "out" / "sample_001_triptych.png");
    EXPECT_EQ(tri.size(2), 3 * 32 + 2 * 2);
}

TEST(Qualitative, ModelOutputsIncludeAttention) {
    TempDir dir("qual_model");
    Config cfg;
    cfg.resolution = 32;
    Models m(cfg);
    const auto files = dump_qualitative(model_frontalizer(m), {consistent_sample(2, 45)}, dir.path());
    ASSERT_EQ(files.size(), 3u);
    const auto att = read_png(dir / "sample_000_attention.png");
    EXPECT_EQ(att.size(2), 3 * 32 + 2 * 2);
}

TEST(Report, TableLayout) {
    RecognitionResult r;
    r.rates = {{15, 100.0}, {90, 12.5}};
    r.probes = {{15, 4}, {90, 8}};
    r.average = 56.25;
    const auto t = format_recognition_table({{"Frontalized", r}});
    EXPECT_NE(t.find("+-15"), std::string::npos);
    EXPECT_NE(t.find("+-90"), std::string::npos);
    EXPECT_NE(t.find("Avg"), std::string::npos);
    EXPECT_NE(t.find("12.50"), std::string::npos);
    EXPECT_NE(t.find("56.25"), std::string::npos);
    const auto j = nlohmann::json::parse(recognition_json(r));
    EXPECT_DOUBLE_EQ(j["rank1"]["90"].get<double>(), 12.5);
    EXPECT_EQ(j["probes"]["15"].get<int>(), 4);
}

TEST(FlowMetricsTest, UntrainedModelGivesFiniteError) {
    TempDir dir("flowm");
    const auto m = build_manifest(dir.path(), 3, {0, 45}, 2, 32, 1);
    Config cfg;
    cfg.resolution = 32;
    Models models(cfg);
    const auto fm = flow_metrics(models, m, true);
    EXPECT_TRUE(std::isfinite(fm.epe));
    EXPECT_GT(fm.epe, 0.0);
    EXPECT_EQ(fm.epe_by_pose.count(45), 1u);
}
