#include "ffwm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ffwm/checkpoint.hpp"
#include "ffwm/image_io.hpp"
#include "ffwm/rng.hpp"
#include "ffwm/warp.hpp"

namespace ffwm {

namespace fs = std::filesystem;

namespace {

void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) {
        p.set_requires_grad(on);
    }
}

bool finite(double v) { return std::isfinite(v); }

std::vector<torch::Tensor> params_of(std::initializer_list<torch::nn::Module*> modules) {
    std::vector<torch::Tensor> out;
    for (auto* m : modules) {
        for (auto& p : m->parameters()) {
            out.push_back(p);
        }
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------

Models::Models(const Config& cfg) {
    torch::manual_seed(cfg.seed);
    flow = FlowEstimator(cfg.resolution);
    reverse_flow = FlowEstimator(cfg.resolution);
    generator = Generator(cfg.resolution);
    discriminator = Discriminator();
    embedder = Embedder();
    freeze(*embedder);  // train_embedder unfreezes it for its own loop
    backbone = PerceptualBackbone(derive_seed(cfg.seed, {0xBAC4B07E}));
}

void Models::train_mode() {
    flow->train();
    reverse_flow->train();
    generator->train();
    discriminator->train();
    embedder->eval();
    backbone->eval();
}

void Models::eval_mode() {
    flow->eval();
    reverse_flow->eval();
    generator->eval();
    discriminator->eval();
    embedder->eval();
    backbone->eval();
}

TrainState::TrainState(const Config& c) : cfg(c), models(c) {
    validate_config(cfg);
    const auto betas = std::make_tuple(cfg.adam_beta1, cfg.adam_beta2);
    opt_d = std::make_unique<torch::optim::Adam>(models.discriminator->parameters(),
                                                 torch::optim::AdamOptions(cfg.lr_main).betas(betas));
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(models.generator->parameters(),
                        std::make_unique<torch::optim::AdamOptions>(torch::optim::AdamOptions(cfg.lr_main).betas(betas)));
    groups.emplace_back(params_of({models.flow.ptr().get(), models.reverse_flow.ptr().get()}),
                        std::make_unique<torch::optim::AdamOptions>(torch::optim::AdamOptions(cfg.lr_flow).betas(betas)));
    opt_g = std::make_unique<torch::optim::Adam>(std::move(groups), torch::optim::AdamOptions(cfg.lr_main).betas(betas));
}

void TrainState::save(const fs::path& path) const {
    CheckpointWriter w;
    w.add_module("flow", *models.flow);
    w.add_module("reverse_flow", *models.reverse_flow);
    w.add_module("generator", *models.generator);
    w.add_module("discriminator", *models.discriminator);
    w.add_module("embedder", *models.embedder);
    w.add_module("backbone", *models.backbone);
    w.add_optimizer("d", *opt_d);
    w.add_optimizer("g", *opt_g);
    w.set_config(cfg);
    w.set_step(step);
    w.commit(path);
}

std::unique_ptr<TrainState> TrainState::load(const fs::path& path) {
    CheckpointReader r(path);
    auto state = std::make_unique<TrainState>(r.config());
    auto& m = state->models;
    r.load_module("flow", *m.flow);
    r.load_module("reverse_flow", *m.reverse_flow);
    r.load_module("generator", *m.generator);
    r.load_module("discriminator", *m.discriminator);
    r.load_module("embedder", *m.embedder);
    r.load_module("backbone", *m.backbone);
    r.load_optimizer("d", *state->opt_d);
    r.load_optimizer("g", *state->opt_g);
    freeze(*m.embedder);
    freeze(*m.backbone);
    state->step = r.step();
    return state;
}

void TrainState::load_pretrained(const fs::path& path) {
    CheckpointReader r(path);
    r.load_module("flow", *models.flow);
    r.load_module("reverse_flow", *models.reverse_flow);
    r.load_module("embedder", *models.embedder);
    freeze(*models.embedder);
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const DatasetManifest& manifest, std::vector<ManifestRecord> records, int batch_size,
                           uint64_t seed)
    : manifest_(manifest), records_(std::move(records)), batch_size_(batch_size), seed_(seed) {
    if (records_.empty()) {
        throw InvalidArgument("BatchSampler: no records to sample from");
    }
    if (batch_size_ < 1) {
        throw InvalidArgument("BatchSampler: batch size must be positive");
    }
}

int64_t BatchSampler::steps_per_epoch() const {
    const auto n = static_cast<int64_t>(records_.size());
    return (n + batch_size_ - 1) / batch_size_;
}

const std::vector<size_t>& BatchSampler::permutation(int64_t epoch) {
    if (epoch != cached_epoch_) {
        cached_perm_.resize(records_.size());
        for (size_t i = 0; i < cached_perm_.size(); ++i) {
            cached_perm_[i] = i;
        }
        Rng rng(derive_seed(seed_, {static_cast<uint64_t>(epoch)}));
        rng.shuffle(cached_perm_);
        cached_epoch_ = epoch;
    }
    return cached_perm_;
}

std::vector<ManifestRecord> BatchSampler::records_at(int64_t step) {
    const auto n = static_cast<int64_t>(records_.size());
    std::vector<ManifestRecord> out;
    for (int64_t i = 0; i < batch_size_; ++i) {
        const int64_t g = step * batch_size_ + i;
        const auto& perm = permutation(g / n);
        out.push_back(records_[perm[static_cast<size_t>(g % n)]]);
    }
    return out;
}

Batch BatchSampler::batch_at(int64_t step) {
    std::vector<Sample> samples;
    for (const auto& r : records_at(step)) {
        samples.push_back(render_record(manifest_, r));
    }
    return collate(samples);
}

// ---------------------------------------------------------------------------

EmbedderReport train_embedder(Embedder& embedder, const DatasetManifest& manifest, const Config& cfg) {
    // Class pool: auxiliary identities disjoint from the manifest plus the train split.
    std::vector<uint64_t> seeds;
    for (int j = 0; j < cfg.embedder_aux_identities; ++j) {
        seeds.push_back(derive_seed(manifest.seed, {0xA0C5, static_cast<uint64_t>(j)}));
    }
    for (const int id : manifest.train_ids) {
        seeds.push_back(manifest.identity_seed(id));
    }
    const int classes = static_cast<int>(seeds.size());
    const std::vector<int> poses{0, -15, 15};
    std::vector<torch::Tensor> pool;
    for (const auto s : seeds) {
        for (const int p : poses) {
            SyntheticFaceSpec spec;
            spec.identity_seed = s;
            spec.pose_deg = p;
            spec.resolution = manifest.resolution;
            spec.illumination = false;
            spec.dropout = false;
            pool.push_back(render_synthetic(spec).profile.image.tensor());
        }
    }
    const auto images = torch::stack(pool);
    const int64_t res = manifest.resolution;
    const auto ramp_x = torch::linspace(-1.0, 1.0, res).view({1, 1, 1, res});

    auto head = torch::randn({classes, EmbedderImpl::kFc2Dim}) * 0.1;
    head.set_requires_grad(true);
    std::vector<torch::Tensor> params = embedder->parameters();
    params.push_back(head);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.embedder_lr));
    set_requires_grad(*embedder, true);
    embedder->train();

    constexpr int kBatch = 32;
    constexpr double kScale = 16.0;
    EmbedderReport report;
    report.classes = classes;
    std::vector<double> tail_loss, tail_acc;
    for (int step = 0; step < cfg.embedder_steps; ++step) {
        Rng rng(derive_seed(cfg.seed, {0xE3B, static_cast<uint64_t>(step)}));
        std::vector<int64_t> idx, labels;
        std::vector<float> gains, ramps, casts;
        for (int i = 0; i < kBatch; ++i) {
            const int c = rng.uniform_int(0, classes - 1);
            const int p = rng.uniform_int(0, static_cast<int>(poses.size()) - 1);
            idx.push_back(c * static_cast<int64_t>(poses.size()) + p);
            labels.push_back(c);
            gains.push_back(static_cast<float>(1.0 + rng.uniform(-0.4, 0.4)));
            ramps.push_back(static_cast<float>(rng.uniform(-0.4, 0.4)));
            for (int ch = 0; ch < 3; ++ch) {
                casts.push_back(static_cast<float>(1.0 + rng.uniform(-0.08, 0.08)));
            }
        }
        auto x = images.index_select(0, torch::tensor(idx));
        const auto g = torch::tensor(gains).view({kBatch, 1, 1, 1});
        const auto r = torch::tensor(ramps).view({kBatch, 1, 1, 1});
        const auto c = torch::tensor(casts).view({kBatch, 3, 1, 1});
        x = (x * g * (1.0 + r * ramp_x) * c).clamp(0.0, 1.0);

        const auto fc2 = torch::nn::functional::normalize(embedder->raw_fc2(x),
                                                          torch::nn::functional::NormalizeFuncOptions().dim(1));
        const auto w = torch::nn::functional::normalize(head, torch::nn::functional::NormalizeFuncOptions().dim(1));
        const auto logits = kScale * fc2.matmul(w.t());
        const auto target = torch::tensor(labels);
        const auto loss = torch::nn::functional::cross_entropy(logits, target);
        opt.zero_grad();
        loss.backward();
        opt.step();
        if (step >= cfg.embedder_steps - 50) {
            tail_loss.push_back(loss.item<double>());
            tail_acc.push_back(logits.argmax(1).eq(target).to(torch::kFloat64).mean().item<double>());
        }
    }
    freeze(*embedder);
    report.final_loss = mean_of(tail_loss);
    report.train_accuracy = mean_of(tail_acc);
    return report;
}

// ---------------------------------------------------------------------------

PretrainReport pretrain_flows(TrainState& state, const DatasetManifest& manifest, int epochs) {
    const Config& cfg = state.cfg;
    auto& m = state.models;
    BatchSampler sampler(manifest, manifest.split_records(true), cfg.batch_size, derive_seed(cfg.seed, {0xF10E}));
    torch::optim::Adam opt(params_of({m.flow.ptr().get(), m.reverse_flow.ptr().get()}),
                           torch::optim::AdamOptions(cfg.pretrain_lr));
    m.flow->train();
    m.reverse_flow->train();

    PretrainReport report;
    const int64_t per_epoch = sampler.steps_per_epoch();
    for (int e = 0; e < epochs; ++e) {
        std::vector<double> lmk, tot;
        for (int64_t i = 0; i < per_epoch; ++i) {
            const auto b = sampler.batch_at(e * per_epoch + i);
            const auto phi = m.flow->forward(b.profile);
            const auto phi_rev = m.reverse_flow->forward(b.profile);
            const auto lf = landmark_flow_loss(phi, b.profile_landmarks, b.frontal_landmarks);
            const auto lr = landmark_flow_loss(phi_rev, b.frontal_landmarks, b.profile_landmarks);
            const auto sf =
                sampling_correctness_loss(m.backbone, b.profile, b.frontal, phi, b.frontal_mask, cfg.sampling_tap);
            const auto sr = sampling_correctness_loss(m.backbone, b.frontal, b.profile, phi_rev, b.profile_mask,
                                                      cfg.sampling_tap);
            const auto total = cfg.landmark_weight * (lf + lr) + cfg.sampling_weight * (sf + sr) +
                               cfg.flow_reg_weight * (flow_regularization(phi) + flow_regularization(phi_rev));
            const double tv = total.item<double>();
            if (!finite(tv)) {
                LossReport r;
                r.total = tv;
                throw TrainingDiverged("flow pretraining produced a non-finite loss", r);
            }
            opt.zero_grad();
            total.backward();
            opt.step();
            lmk.push_back(lf.item<double>());
            tot.push_back(tv);
            ++report.steps;
        }
        report.epoch_landmark.push_back(mean_of(lmk));
        report.epoch_total.push_back(mean_of(tot));
    }
    return report;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<Box>> batch_regions(const Batch& batch, int resolution) {
    std::vector<std::vector<Box>> out;
    const int side = std::max(1, resolution / 4);
    for (const auto& lm : batch.frontal_landmarks) {
        std::vector<Box> boxes;
        if (static_cast<int>(lm.size()) == kLandmarkCount) {
            for (const auto& group : LandmarkRegions::all()) {
                boxes.push_back(region_box(lm, group, side, resolution, resolution));
            }
        }
        out.push_back(std::move(boxes));
    }
    return out;
}

ForwardPass ffwm_forward(Models& m, const Batch& b, bool use_guided, const GuidedFilterParams& params) {
    ForwardPass p;
    p.phi = m.flow->forward(b.profile);
    p.phi_rev = m.reverse_flow->forward(b.profile);
    auto gen = m.generator->forward(b.profile, p.phi);
    p.synth = gen.image;
    p.attention = std::move(gen.attention);
    p.warped = warp(p.synth, p.phi_rev);
    p.guided = use_guided ? guided_filter(b.frontal, p.synth, params) : p.synth;
    return p;
}

LossComponents generator_losses(Models& m, const ForwardPass& p, const Batch& b, const Config& cfg,
                                LossReport& report) {
    LossComponents parts;
    const auto pix = masked_l1_per_scale(p.guided, b.frontal, b.frontal_mask, cfg.scales);
    const auto ip = masked_l1_per_scale(p.warped, b.profile, b.profile_mask, cfg.scales);
    parts.pixel = pix[0];
    parts.illum_preserve = ip[0];
    report.pixel_scales.clear();
    report.illum_scales.clear();
    for (size_t s = 0; s < pix.size(); ++s) {
        if (s > 0) {
            parts.pixel = parts.pixel + pix[s];
            parts.illum_preserve = parts.illum_preserve + ip[s];
        }
        report.pixel_scales.push_back(pix[s].item<double>());
        report.illum_scales.push_back(ip[s].item<double>());
    }
    auto perc = perceptual_loss(m.backbone, p.guided, b.frontal, b.frontal_mask, batch_regions(b, cfg.resolution),
                                cfg.vgg_layer_weights);
    parts.perceptual = perc.value;
    report.regions_skipped = perc.regions_skipped;
    parts.adversarial = generator_loss_from_logits(m.discriminator->forward(p.guided));
    parts.identity = identity_loss(m.embedder, p.synth, p.guided, b.frontal);
    return parts;
}

StepResult ffwm_step(TrainState& state, const Batch& batch) {
    auto& m = state.models;
    const Config& cfg = state.cfg;
    m.train_mode();
    const bool use_guided = state.step >= cfg.warmup_steps();
    const GuidedFilterParams gp{cfg.guided_radius(), cfg.gfilter_eps};
    auto pass = ffwm_forward(m, batch, use_guided, gp);

    StepResult res;
    set_requires_grad(*m.discriminator, true);
    const auto d_loss = discriminator_loss_from_logits(m.discriminator->forward(batch.frontal),
                                                       m.discriminator->forward(pass.guided.detach()));
    res.d_loss = d_loss.item<double>();
    if (!finite(res.d_loss)) {
        throw TrainingDiverged("discriminator loss is not finite at step " + std::to_string(state.step), res.report);
    }
    state.opt_d->zero_grad();
    d_loss.backward();
    state.opt_d->step();

    set_requires_grad(*m.discriminator, false);
    const auto parts = generator_losses(m, pass, batch, cfg, res.report);
    const auto total = total_loss(parts, cfg.lambdas, res.report);
    const auto& r = res.report;
    if (!(finite(r.pixel) && finite(r.perceptual) && finite(r.adversarial) && finite(r.illum_preserve) &&
          finite(r.identity) && finite(r.total))) {
        set_requires_grad(*m.discriminator, true);
        throw TrainingDiverged("non-finite loss at step " + std::to_string(state.step) + ": " + r.to_jsonl(state.step),
                               r);
    }
    state.opt_g->zero_grad();
    total.backward();
    state.opt_g->step();
    set_requires_grad(*m.discriminator, true);

    res.pass.phi = pass.phi.detach();
    res.pass.phi_rev = pass.phi_rev.detach();
    res.pass.synth = pass.synth.detach();
    res.pass.warped = pass.warped.detach();
    res.pass.guided = pass.guided.detach();
    for (const auto& a : pass.attention) {
        res.pass.attention.push_back(a.detach());
    }
    ++state.step;
    return res;
}

// ---------------------------------------------------------------------------

std::string checkpoint_name(int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%08lld.ckpt", static_cast<long long>(step));
    return buf;
}

namespace {

void write_sample_grid(const fs::path& path, const Batch& b, const ForwardPass& p) {
    std::vector<std::vector<torch::Tensor>> rows;
    const int64_t n = std::min<int64_t>(4, b.size());
    for (int64_t i = 0; i < n; ++i) {
        rows.push_back({b.profile[i], p.synth[i].clamp(0, 1), p.warped[i].clamp(0, 1), p.guided[i].clamp(0, 1),
                        b.frontal[i]});
    }
    write_png(path, make_grid(rows));
}

// Keeps the log lines of steps before `step` (used when resuming).
void truncate_log(const fs::path& path, int64_t step) {
    std::vector<std::string> keep;
    {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            try {
                if (nlohmann::json::parse(line).at("step").get<int64_t>() < step) {
                    keep.push_back(line);
                }
            } catch (const std::exception&) {
                break;  // torn final line from an interrupted run
            }
        }
    }
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) {
        out << l << '\n';
    }
}

void log_line(bool quiet, const std::string& text) {
    if (!quiet) {
        std::cerr << text << std::endl;
    }
}

}  // namespace

fs::path pretrain_full(const Config& cfg, const DatasetManifest& manifest, const fs::path& out_dir,
                       PretrainReport* report, bool quiet) {
    TrainState state(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto er = train_embedder(state.models.embedder, manifest, cfg);
    log_line(quiet, "embedder: " + std::to_string(er.classes) + " classes, train accuracy " +
                        std::to_string(er.train_accuracy));
    const auto pr = pretrain_flows(state, manifest, cfg.pretrain_epochs);
    for (size_t e = 0; e < pr.epoch_landmark.size(); ++e) {
        log_line(quiet, "pretrain epoch " + std::to_string(e + 1) + ": landmark " +
                            std::to_string(pr.epoch_landmark[e]) + ", objective " + std::to_string(pr.epoch_total[e]));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_line(quiet, "pretraining took " + std::to_string(secs) + " s");
    if (report) {
        *report = pr;
    }
    const auto path = out_dir / "checkpoints" / "pretrained.ckpt";
    state.save(path);
    return path;
}

fs::path train_full(const Config& cfg, const DatasetManifest& manifest, const fs::path& out_dir,
                    const TrainOptions& options) {
    const auto ckpt_dir = out_dir / "checkpoints";
    const auto log_path = out_dir / "logs" / "losses.jsonl";
    const auto sample_dir = out_dir / "samples";
    fs::create_directories(ckpt_dir);
    fs::create_directories(log_path.parent_path());
    fs::create_directories(sample_dir);

    std::unique_ptr<TrainState> state;
    fs::path last;
    if (options.resume_from) {
        state = TrainState::load(*options.resume_from);
        truncate_log(log_path, state->step);
        last = *options.resume_from;
    } else {
        state = std::make_unique<TrainState>(cfg);
        if (options.init_from) {
            state->load_pretrained(*options.init_from);
        } else {
            const auto er = train_embedder(state->models.embedder, manifest, cfg);
            log_line(options.quiet, "embedder train accuracy " + std::to_string(er.train_accuracy));
            const auto pr = pretrain_flows(*state, manifest, cfg.pretrain_epochs);
            if (!pr.epoch_landmark.empty()) {
                log_line(options.quiet, "flow pretraining: landmark loss " + std::to_string(pr.epoch_landmark.front()) +
                                            " -> " + std::to_string(pr.epoch_landmark.back()));
            }
        }
        last = ckpt_dir / checkpoint_name(0);
        state->save(last);
        std::ofstream(log_path, std::ios::trunc);
    }

    const Config& c = state->cfg;
    BatchSampler sampler(manifest, manifest.split_records(true), c.batch_size, derive_seed(c.seed, {0xDA7A}));
    std::ofstream log(log_path, std::ios::app);
    if (!log) {
        throw IoError("cannot write " + log_path.string());
    }
    const auto t0 = std::chrono::steady_clock::now();
    while (state->step < c.total_steps && (!options.stop_after || state->step < *options.stop_after)) {
        const int64_t s = state->step;
        const auto batch = sampler.batch_at(s);
        const auto res = ffwm_step(*state, batch);
        log << res.report.to_jsonl(s) << '\n';
        log.flush();
        const int64_t done = state->step;
        const bool stopping = done == c.total_steps || (options.stop_after && done == *options.stop_after);
        if ((c.checkpoint_every > 0 && done % c.checkpoint_every == 0) || stopping) {
            last = ckpt_dir / checkpoint_name(done);
            state->save(last);
        }
        if (c.sample_every > 0 && (s % c.sample_every == 0 || done == c.total_steps)) {
            char name[32];
            std::snprintf(name, sizeof(name), "step_%08lld.png", static_cast<long long>(s));
            write_sample_grid(sample_dir / name, batch, res.pass);
        }
        if (!options.quiet && (s % 50 == 0 || done == c.total_steps)) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::ostringstream os;
            os << "step " << s << " total " << res.report.total << " d " << res.d_loss << " (" << secs << " s)";
            log_line(false, os.str());
        }
    }
    return last;
}

}  // namespace ffwm
