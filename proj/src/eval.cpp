#include "ffwm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ffwm/image_io.hpp"
#include "ffwm/rng.hpp"
#include "ffwm/train.hpp"
#include "ffwm/warp.hpp"

namespace ffwm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr size_t kChunk = 32;

torch::Tensor embed_pool(Embedder& embedder, const torch::Tensor& images) {
    torch::NoGradGuard guard;
    embedder->eval();
    return embedder->forward(images).pool;
}

// Runs `fn` over the samples of `records` in chunks.
template <typename Fn>
void for_each_chunk(const DatasetManifest& manifest, const std::vector<ManifestRecord>& records, Fn&& fn) {
    for (size_t i = 0; i < records.size(); i += kChunk) {
        std::vector<Sample> samples;
        for (size_t j = i; j < std::min(records.size(), i + kChunk); ++j) {
            samples.push_back(render_record(manifest, records[j]));
        }
        fn(collate(samples), i);
    }
}

torch::Tensor zero_flow_like(const torch::Tensor& images) {
    return torch::zeros({images.size(0), 2, images.size(2), images.size(3)});
}

}  // namespace

// ---------------------------------------------------------------------------

Frontalizer model_frontalizer(Models& models) {
    return [&models](const Batch& b) {
        torch::NoGradGuard guard;
        models.eval_mode();
        FrontalizerOutput out;
        out.forward_flow = models.flow->forward(b.profile);
        out.reverse_flow = models.reverse_flow->forward(b.profile);
        auto gen = models.generator->forward(b.profile, out.forward_flow);
        out.frontal = gen.image;
        out.attention = std::move(gen.attention);
        return out;
    };
}

Frontalizer raw_profile_frontalizer() {
    return [](const Batch& b) {
        FrontalizerOutput out;
        out.frontal = b.profile;
        out.forward_flow = zero_flow_like(b.profile);
        out.reverse_flow = zero_flow_like(b.profile);
        return out;
    };
}

Frontalizer oracle_frontalizer() {
    return [](const Batch& b) {
        if (!b.gt_forward.defined() || !b.gt_reverse.defined()) {
            throw InvalidArgument("oracle frontalizer needs ground-truth flows");
        }
        FrontalizerOutput out;
        out.frontal = b.frontal;
        out.forward_flow = b.gt_forward;
        out.reverse_flow = b.gt_reverse;
        return out;
    };
}

// ---------------------------------------------------------------------------

double RecognitionResult::average_from(int min_pose) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& [pose, rate] : rates) {
        if (pose >= min_pose) {
            sum += rate;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

RecognitionResult rank1_from_embeddings(const torch::Tensor& gallery, const std::vector<int>& gallery_ids,
                                        const torch::Tensor& probes, const std::vector<int>& probe_ids,
                                        const std::vector<int>& probe_poses) {
    if (gallery.size(0) != static_cast<int64_t>(gallery_ids.size()) ||
        probes.size(0) != static_cast<int64_t>(probe_ids.size()) || probe_ids.size() != probe_poses.size()) {
        throw InvalidArgument("rank1: embedding and label counts differ");
    }
    for (const int id : probe_ids) {
        if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end()) {
            throw ProtocolError("identity " + std::to_string(id) + " has no gallery image");
        }
    }
    namespace F = torch::nn::functional;
    const auto opts = F::NormalizeFuncOptions().dim(1);
    const auto sim = F::normalize(probes.to(torch::kFloat64), opts).matmul(
        F::normalize(gallery.to(torch::kFloat64), opts).t());
    const auto best = sim.argmax(1);
    auto acc = best.accessor<int64_t, 1>();

    std::map<int, int> hits;
    RecognitionResult r;
    r.gallery_size = static_cast<int>(gallery_ids.size());
    for (size_t i = 0; i < probe_ids.size(); ++i) {
        const int bin = std::abs(probe_poses[i]);
        r.probes[bin] += 1;
        hits[bin] += gallery_ids[static_cast<size_t>(acc[static_cast<int64_t>(i)])] == probe_ids[i] ? 1 : 0;
    }
    for (const auto& [bin, count] : r.probes) {
        r.rates[bin] = 100.0 * hits[bin] / count;
    }
    r.average = r.average_from(1);
    if (r.rates.size() == 1 && r.rates.count(0)) {
        r.average = r.rates[0];
    }
    return r;
}

RecognitionResult rank1_recognition(const Frontalizer& frontalize, const DatasetManifest& manifest,
                                    Embedder& embedder) {
    const auto gallery_records = manifest.gallery();
    std::vector<int> gallery_ids;
    std::vector<torch::Tensor> gallery_emb;
    for_each_chunk(manifest, gallery_records, [&](const Batch& b, size_t) {
        gallery_emb.push_back(embed_pool(embedder, b.frontal));
        gallery_ids.insert(gallery_ids.end(), b.identity_ids.begin(), b.identity_ids.end());
    });
    if (gallery_ids.empty()) {
        throw ProtocolError("manifest has no gallery records");
    }
    std::vector<int> ids, poses;
    std::vector<torch::Tensor> probe_emb;
    for_each_chunk(manifest, manifest.split_records(false), [&](const Batch& b, size_t) {
        probe_emb.push_back(embed_pool(embedder, frontalize(b).frontal));
        ids.insert(ids.end(), b.identity_ids.begin(), b.identity_ids.end());
        poses.insert(poses.end(), b.poses.begin(), b.poses.end());
    });
    if (ids.empty()) {
        throw ProtocolError("manifest has no test probes");
    }
    return rank1_from_embeddings(torch::cat(gallery_emb), gallery_ids, torch::cat(probe_emb), ids, poses);
}

// ---------------------------------------------------------------------------

VerificationResult verification_scores(const std::vector<double>& scores, const std::vector<bool>& same, int folds) {
    const size_t n = scores.size();
    if (n < 2) {
        throw InvalidArgument("verification needs at least 2 pairs");
    }
    if (same.size() != n) {
        throw InvalidArgument("verification: score and label counts differ");
    }
    const auto n_pos = static_cast<size_t>(std::count(same.begin(), same.end(), true));
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw InvalidArgument("verification needs both same and different pairs");
    }

    // AUC through average ranks (equivalent to the trapezoidal ROC area with ties).
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) {
            ++j;
        }
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    double pos_rank = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (same[i]) {
            pos_rank += rank[i];
        }
    }
    VerificationResult r;
    const double p = static_cast<double>(n_pos);
    r.auc = (pos_rank - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));

    // Threshold chosen on the other folds, accuracy measured on the held-out one.
    // Folds are contiguous blocks; pair lists interleave labels, so each block stays balanced.
    const size_t k = std::max<size_t>(2, std::min<size_t>(static_cast<size_t>(std::max(folds, 2)), n));
    auto fold_of = [&](size_t i) { return i * k / n; };
    auto accuracy = [&](double thr, size_t fold, bool held_out) {
        size_t correct = 0, total = 0;
        for (size_t i = 0; i < n; ++i) {
            if ((fold_of(i) == fold) != held_out) {
                continue;
            }
            ++total;
            correct += ((scores[i] > thr) == same[i]) ? 1 : 0;
        }
        return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    };
    double acc_sum = 0.0;
    for (size_t f = 0; f < k; ++f) {
        std::vector<double> train;
        for (size_t i = 0; i < n; ++i) {
            if (fold_of(i) != f) {
                train.push_back(scores[i]);
            }
        }
        std::sort(train.begin(), train.end());
        train.erase(std::unique(train.begin(), train.end()), train.end());
        std::vector<double> candidates{train.front() - 1.0, train.back() + 1.0};
        for (size_t i = 0; i + 1 < train.size(); ++i) {
            candidates.push_back(0.5 * (train[i] + train[i + 1]));
        }
        double best_thr = candidates.front(), best = -1.0;
        for (const double t : candidates) {
            const double a = accuracy(t, f, false);
            if (a > best) {
                best = a;
                best_thr = t;
            }
        }
        acc_sum += accuracy(best_thr, f, true);
    }
    r.accuracy = 100.0 * acc_sum / static_cast<double>(k);
    return r;
}

std::vector<VerificationPair> make_verification_pairs(const DatasetManifest& manifest, int count, uint64_t seed) {
    const auto records = manifest.split_records(false);
    if (records.size() < 2 || manifest.test_ids.size() < 2) {
        throw InvalidArgument("verification pairs need at least two test identities");
    }
    std::map<int, std::vector<ManifestRecord>> by_id;
    for (const auto& r : records) {
        by_id[r.identity_id].push_back(r);
    }
    std::vector<int> ids;
    for (const auto& [id, recs] : by_id) {
        ids.push_back(id);
    }
    Rng rng(derive_seed(seed, {0x9A125}));
    auto pick = [&](int id) {
        const auto& v = by_id[id];
        return v[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(v.size()) - 1))];
    };
    std::vector<VerificationPair> pairs;
    for (int i = 0; i < count; ++i) {
        const bool same = i % 2 == 0;
        const int a = ids[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(ids.size()) - 1))];
        int b = a;
        while (!same && b == a) {
            b = ids[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(ids.size()) - 1))];
        }
        pairs.push_back({pick(a), pick(b), same});
    }
    return pairs;
}

VerificationResult verification(const Frontalizer& frontalize, const DatasetManifest& manifest,
                                const std::vector<VerificationPair>& pairs, Embedder& embedder) {
    std::vector<ManifestRecord> first, second;
    std::vector<bool> same;
    for (const auto& p : pairs) {
        first.push_back(p.a);
        second.push_back(p.b);
        same.push_back(p.same);
    }
    std::vector<torch::Tensor> ea, eb;
    for_each_chunk(manifest, first, [&](const Batch& b, size_t) { ea.push_back(embed_pool(embedder, frontalize(b).frontal)); });
    for_each_chunk(manifest, second, [&](const Batch& b, size_t) { eb.push_back(embed_pool(embedder, frontalize(b).frontal)); });
    if (ea.empty()) {
        throw InvalidArgument("verification needs at least 2 pairs");
    }
    namespace F = torch::nn::functional;
    const auto opts = F::NormalizeFuncOptions().dim(1);
    const auto cos = (F::normalize(torch::cat(ea).to(torch::kFloat64), opts) *
                      F::normalize(torch::cat(eb).to(torch::kFloat64), opts))
                         .sum(1);
    std::vector<double> scores(cos.data_ptr<double>(), cos.data_ptr<double>() + cos.numel());
    return verification_scores(scores, same);
}

// ---------------------------------------------------------------------------

torch::Tensor masked_mean_l1(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) {
    const auto diff = (a - b).abs() * mask;
    return diff.sum({1, 2, 3}) / (static_cast<double>(a.size(1)) * mask.sum({1, 2, 3})).clamp_min(1e-12);
}

namespace {

struct IllumAccumulator {
    std::map<int, std::vector<double>> warped, synth;

    void add(const Batch& b, const FrontalizerOutput& out) {
        torch::NoGradGuard guard;
        const auto w = warp(out.frontal, out.reverse_flow);
        const auto lw = masked_mean_l1(w, b.profile, b.profile_mask);
        const auto ls = masked_mean_l1(out.frontal, b.frontal, b.frontal_mask);
        for (int64_t i = 0; i < b.size(); ++i) {
            const int bin = std::abs(b.poses[static_cast<size_t>(i)]);
            warped[bin].push_back(lw[i].item<double>());
            synth[bin].push_back(ls[i].item<double>());
        }
    }

    IllumReport report() const {
        IllumReport r;
        auto fill = [](const std::map<int, std::vector<double>>& src, std::map<int, double>& dst, double& mean) {
            double total = 0.0;
            for (const auto& [bin, v] : src) {
                dst[bin] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
                total += dst[bin];
            }
            mean = dst.empty() ? 0.0 : total / static_cast<double>(dst.size());
        };
        fill(warped, r.warped_vs_profile, r.mean_warped_vs_profile);
        fill(synth, r.synth_vs_frontal, r.mean_synth_vs_frontal);
        return r;
    }
};

}  // namespace

IllumReport illumination_metrics(const Frontalizer& frontalize, const std::vector<Sample>& samples) {
    IllumAccumulator acc;
    for (size_t i = 0; i < samples.size(); i += kChunk) {
        std::vector<Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(i),
                                  samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), i + kChunk)));
        const auto b = collate(chunk);
        acc.add(b, frontalize(b));
    }
    return acc.report();
}

IllumReport illumination_metrics(const Frontalizer& frontalize, const DatasetManifest& manifest) {
    IllumAccumulator acc;
    for_each_chunk(manifest, manifest.split_records(false), [&](const Batch& b, size_t) { acc.add(b, frontalize(b)); });
    return acc.report();
}

// ---------------------------------------------------------------------------

std::vector<fs::path> dump_qualitative(const Frontalizer& frontalize, const std::vector<Sample>& samples,
                                       const fs::path& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir)) {
        throw IoError("cannot create output directory " + out_dir.string());
    }
    std::vector<fs::path> files;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto b = collate({samples[i]});
        const auto out = frontalize(b);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "sample_%03zu", i);

        const auto tri = out_dir / (std::string(stem) + "_triptych.png");
        write_png(tri, make_grid({{b.profile[0], out.frontal[0].detach().clamp(0, 1), b.frontal[0]}}));
        files.push_back(tri);

        auto color = [](const torch::Tensor& f) {
            const FlowField field(f.detach());
            return flow_to_color_u8(field, default_flow_max_mag(field)).permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
        };
        const auto flow = out_dir / (std::string(stem) + "_flow.png");
        write_png(flow, make_grid({{color(out.forward_flow[0]), color(out.reverse_flow[0])}}));
        files.push_back(flow);

        std::vector<torch::Tensor> tiles;
        const int64_t res = b.profile.size(2);
        for (const auto& a : out.attention) {
            auto gate = a[0].detach().mean(0, true).unsqueeze(0);
            gate = torch::nn::functional::interpolate(
                gate, torch::nn::functional::InterpolateFuncOptions()
                          .size(std::vector<int64_t>{res, res})
                          .mode(torch::kNearest));
            tiles.push_back(gate[0].clamp(0, 1));
        }
        if (tiles.empty()) {
            tiles.push_back(torch::zeros({1, res, res}));
        }
        const auto att = out_dir / (std::string(stem) + "_attention.png");
        write_png(att, make_grid({tiles}));
        files.push_back(att);
    }
    return files;
}

// ---------------------------------------------------------------------------

FlowMetrics flow_metrics(Models& models, const DatasetManifest& manifest, bool train_split) {
    double err = 0.0, area = 0.0, rerr = 0.0, rarea = 0.0, mag0 = 0.0, area0 = 0.0;
    std::map<int, std::pair<double, double>> bins;
    for_each_chunk(manifest, manifest.split_records(train_split), [&](const Batch& b, size_t) {
        torch::NoGradGuard guard;
        models.eval_mode();
        const auto phi = models.flow->forward(b.profile);
        const auto phi_rev = models.reverse_flow->forward(b.profile);
        const auto e = (phi - b.gt_forward).pow(2).sum(1, true).sqrt() * b.frontal_mask;
        const auto er = (phi_rev - b.gt_reverse).pow(2).sum(1, true).sqrt() * b.profile_mask;
        const auto mag = phi.pow(2).sum(1, true).sqrt() * b.frontal_mask;
        for (int64_t i = 0; i < b.size(); ++i) {
            const double ei = e[i].sum().item<double>();
            const double ai = b.frontal_mask[i].sum().item<double>();
            err += ei;
            area += ai;
            rerr += er[i].sum().item<double>();
            rarea += b.profile_mask[i].sum().item<double>();
            auto& bin = bins[std::abs(b.poses[static_cast<size_t>(i)])];
            bin.first += ei;
            bin.second += ai;
            if (b.poses[static_cast<size_t>(i)] == 0) {
                mag0 += mag[i].sum().item<double>();
                area0 += ai;
            }
        }
    });
    FlowMetrics m;
    m.epe = area > 0 ? err / area : 0.0;
    m.reverse_epe = rarea > 0 ? rerr / rarea : 0.0;
    m.pose0_magnitude = area0 > 0 ? mag0 / area0 : 0.0;
    for (const auto& [pose, v] : bins) {
        m.epe_by_pose[pose] = v.second > 0 ? v.first / v.second : 0.0;
    }
    return m;
}

// ---------------------------------------------------------------------------

std::string format_recognition_table(const std::vector<std::pair<std::string, RecognitionResult>>& rows) {
    const std::vector<int> cols{15, 30, 45, 60, 75, 90};
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-24s", "Method");
    os << buf;
    for (const int c : cols) {
        std::snprintf(buf, sizeof(buf), "%9s", ("+-" + std::to_string(c)).c_str());
        os << buf;
    }
    os << "      Avg\n";
    for (const auto& [name, r] : rows) {
        std::snprintf(buf, sizeof(buf), "%-24s", name.c_str());
        os << buf;
        for (const int c : cols) {
            const auto it = r.rates.find(c);
            if (it == r.rates.end()) {
                std::snprintf(buf, sizeof(buf), "%9s", "-");
            } else {
                std::snprintf(buf, sizeof(buf), "%9.2f", it->second);
            }
            os << buf;
        }
        std::snprintf(buf, sizeof(buf), "%9.2f\n", r.average);
        os << buf;
    }
    return os.str();
}

std::string recognition_json(const RecognitionResult& r) {
    json j;
    json rates = json::object();
    json probes = json::object();
    for (const auto& [pose, rate] : r.rates) {
        rates[std::to_string(pose)] = rate;
        probes[std::to_string(pose)] = r.probes.at(pose);
    }
    j["rank1"] = rates;
    j["probes"] = probes;
    j["average"] = r.average;
    j["gallery_size"] = r.gallery_size;
    return j.dump();
}

std::string illum_json(const IllumReport& r) {
    json j;
    json w = json::object();
    json s = json::object();
    for (const auto& [pose, v] : r.warped_vs_profile) {
        w[std::to_string(pose)] = v;
    }
    for (const auto& [pose, v] : r.synth_vs_frontal) {
        s[std::to_string(pose)] = v;
    }
    j["warped_vs_profile"] = w;
    j["synth_vs_frontal"] = s;
    j["mean_warped_vs_profile"] = r.mean_warped_vs_profile;
    j["mean_synth_vs_frontal"] = r.mean_synth_vs_frontal;
    return j.dump();
}

}  // namespace ffwm
