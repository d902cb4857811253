// ffwm command-line entry point.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ffwm/config.hpp"
#include "ffwm/core.hpp"
#include "ffwm/data.hpp"
#include "ffwm/eval.hpp"
#include "ffwm/image_io.hpp"
#include "ffwm/train.hpp"
#include "ffwm/warp.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kUsage = 2;
constexpr int kFailure = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ffwm::Config config_from(const std::string& path) {
    if (path.empty()) {
        return ffwm::Config{};
    }
    if (!fs::exists(path)) {
        throw ffwm::IoError("config file not found: " + path);
    }
    return ffwm::load_config(path);
}

fs::path manifest_path(const std::string& data) {
    fs::path p(data);
    if (fs::is_directory(p)) {
        p /= "manifest.json";
    }
    if (!fs::exists(p)) {
        throw ffwm::IoError("manifest not found: " + p.string());
    }
    return p;
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) {
        throw ffwm::IoError("file not found: " + path);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw ffwm::IoError("cannot write " + path.string());
    }
    out << text;
}

// --- subcommands -----------------------------------------------------------

struct GenDataArgs {
    std::string out;
    int identities = 10;
    uint64_t seed = 1;
    int resolution = 64;
    bool export_images = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    if (a.identities < 2) {
        throw UsageError("--identities must be at least 2 (one train and one test identity)");
    }
    if (a.resolution < 16 || a.resolution % 16 != 0) {
        throw UsageError("--resolution must be a positive multiple of 16");
    }
    const auto m = ffwm::build_manifest(a.out, a.identities, ffwm::default_poses(), a.seed, a.resolution);
    const auto path = fs::path(a.out) / "manifest.json";
    ffwm::save_manifest(m, path);
    size_t images = 0;
    if (a.export_images) {
        images = ffwm::export_real_layout(m, fs::path(a.out) / "images").size();
    }
    std::cout << path.string() << '\n';
    std::cerr << m.records.size() << " records, " << m.train_ids.size() << " train / " << m.test_ids.size()
              << " test identities";
    if (a.export_images) {
        std::cerr << ", " << images << " images written";
    }
    std::cerr << '\n';
    return 0;
}

struct RunArgs {
    std::string config, data, ckpt, out, init;
    int steps = -1;
    int count = 3;
    std::string flo;
    bool quiet = false;
};

int cmd_pretrain(const RunArgs& a) {
    auto cfg = config_from(a.config);
    const auto manifest = ffwm::load_manifest(manifest_path(a.data));
    cfg.resolution = manifest.resolution;
    ffwm::validate_config(cfg);
    ffwm::PretrainReport report;
    const auto ckpt = ffwm::pretrain_full(cfg, manifest, a.out, &report, a.quiet);
    auto state = ffwm::TrainState::load(ckpt);
    const auto fm = ffwm::flow_metrics(state->models, manifest, false);
    json j;
    j["checkpoint"] = ckpt.string();
    j["epoch_landmark"] = report.epoch_landmark;
    j["epoch_objective"] = report.epoch_total;
    j["test_epe"] = fm.epe;
    j["test_reverse_epe"] = fm.reverse_epe;
    j["test_pose0_magnitude"] = fm.pose0_magnitude;
    json by_pose = json::object();
    for (const auto& [p, v] : fm.epe_by_pose) {
        by_pose[std::to_string(p)] = v;
    }
    j["test_epe_by_pose"] = by_pose;
    write_text(fs::path(a.out) / "pretrain_report.json", j.dump(2) + "\n");
    std::cout << ckpt.string() << '\n';
    std::cerr << "test EPE " << fm.epe << " px, reverse EPE " << fm.reverse_epe << " px, pose-0 magnitude "
              << fm.pose0_magnitude << " px\n";
    return 0;
}

int cmd_train(const RunArgs& a) {
    auto cfg = config_from(a.config);
    const auto manifest = ffwm::load_manifest(manifest_path(a.data));
    cfg.resolution = manifest.resolution;
    if (a.steps > 0) {
        cfg.total_steps = a.steps;
    }
    ffwm::validate_config(cfg);
    ffwm::TrainOptions opts;
    opts.quiet = a.quiet;
    if (!a.ckpt.empty()) {
        require_file(a.ckpt);
        opts.resume_from = a.ckpt;
    }
    if (!a.init.empty()) {
        require_file(a.init);
        opts.init_from = a.init;
    }
    const auto last = ffwm::train_full(cfg, manifest, a.out, opts);
    std::cout << last.string() << '\n';
    return 0;
}

int cmd_eval(const RunArgs& a) {
    require_file(a.ckpt);
    const auto manifest = ffwm::load_manifest(manifest_path(a.data));
    auto state = ffwm::TrainState::load(a.ckpt);
    auto& models = state->models;
    const auto model = ffwm::model_frontalizer(models);
    const auto raw = ffwm::raw_profile_frontalizer();

    const auto rec = ffwm::rank1_recognition(model, manifest, models.embedder);
    const auto base = ffwm::rank1_recognition(raw, manifest, models.embedder);
    const auto pairs = ffwm::make_verification_pairs(manifest, 200, manifest.seed);
    const auto ver = ffwm::verification(model, manifest, pairs, models.embedder);
    const auto ver_raw = ffwm::verification(raw, manifest, pairs, models.embedder);
    const auto illum = ffwm::illumination_metrics(model, manifest);
    const auto flows = ffwm::flow_metrics(models, manifest, false);

    json j;
    j["checkpoint"] = a.ckpt;
    j["step"] = state->step;
    j["recognition"] = json::parse(ffwm::recognition_json(rec));
    j["recognition_raw_profile"] = json::parse(ffwm::recognition_json(base));
    j["verification"] = {{"accuracy", ver.accuracy}, {"auc", ver.auc}};
    j["verification_raw_profile"] = {{"accuracy", ver_raw.accuracy}, {"auc", ver_raw.auc}};
    j["illumination"] = json::parse(ffwm::illum_json(illum));
    j["flow"] = {{"epe", flows.epe}, {"reverse_epe", flows.reverse_epe}, {"pose0_magnitude", flows.pose0_magnitude}};

    const auto table = ffwm::format_recognition_table({{"Raw profile", base}, {"Frontalized", rec}});
    write_text(fs::path(a.out) / "report.json", j.dump(2) + "\n");
    write_text(fs::path(a.out) / "rank1_table.txt", table);
    std::cout << table;
    std::cout << "verification ACC " << ver.accuracy << " AUC " << ver.auc << '\n';
    std::cout << "illumination: L1(warped, profile) " << illum.mean_warped_vs_profile << ", L1(synth, frontal) "
              << illum.mean_synth_vs_frontal << '\n';
    return 0;
}

int cmd_visualize(const RunArgs& a) {
    if (!a.flo.empty()) {
        require_file(a.flo);
        const auto flow = ffwm::read_flo(a.flo);
        const auto out = fs::path(a.out) / (fs::path(a.flo).stem().string() + "_flow.png");
        ffwm::write_png_u8(out, ffwm::flow_to_color_u8(flow, ffwm::default_flow_max_mag(flow)));
        std::cout << out.string() << '\n';
        return 0;
    }
    if (a.ckpt.empty() || a.data.empty()) {
        throw UsageError("visualize needs --ckpt and --data, or --flo");
    }
    require_file(a.ckpt);
    const auto manifest = ffwm::load_manifest(manifest_path(a.data));
    auto state = ffwm::TrainState::load(a.ckpt);
    const auto test = manifest.split_records(false);
    std::vector<ffwm::Sample> samples;
    // Spread the picks over the test records so several poses show up.
    const size_t n = std::min<size_t>(static_cast<size_t>(std::max(a.count, 0)), test.size());
    for (size_t i = 0; i < n; ++i) {
        samples.push_back(ffwm::render_record(manifest, test[i * test.size() / n]));
    }
    for (const auto& f : ffwm::dump_qualitative(ffwm::model_frontalizer(state->models), samples, a.out)) {
        std::cout << f.string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flow-based feature warping face frontalization (desk-scale)"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    GenDataArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset manifest");
    c_gen->add_option("--out", gen.out, "Output directory")->required();
    c_gen->add_option("--identities", gen.identities, "Number of identities (>= 2)")->capture_default_str();
    c_gen->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
    c_gen->add_option("--resolution", gen.resolution, "Image side in pixels")->capture_default_str();
    c_gen->add_flag("--export-images", gen.export_images, "Also write PNG/mask/landmark files")->capture_default_str();

    RunArgs run;
    auto add_common = [&](CLI::App* c, bool need_data) {
        c->add_option("--config", run.config, "Config file (key = value)")->capture_default_str();
        auto* d = c->add_option("--data", run.data, "Manifest file or dataset directory")->capture_default_str();
        if (need_data) {
            d->required();
        }
        c->add_option("--out", run.out, "Output directory")->required();
        c->add_flag("--quiet", run.quiet, "Suppress progress output")->capture_default_str();
    };
    auto* c_pre = app.add_subcommand("pretrain-flow", "Train the embedder and pretrain both flow networks");
    add_common(c_pre, true);
    auto* c_train = app.add_subcommand("train", "Full training (pretraining unless --init or --ckpt)");
    add_common(c_train, true);
    c_train->add_option("--ckpt", run.ckpt, "Checkpoint to resume from")->capture_default_str();
    c_train->add_option("--init", run.init, "Pretrained checkpoint (flows and embedder)")->capture_default_str();
    c_train->add_option("--steps", run.steps, "Override total_steps (-1 keeps the config value)")->capture_default_str();
    auto* c_eval = app.add_subcommand("eval", "Recognition, verification and illumination metrics");
    add_common(c_eval, true);
    c_eval->add_option("--ckpt", run.ckpt, "Checkpoint to evaluate")->required();
    auto* c_vis = app.add_subcommand("visualize", "Triptychs, flow panels and attention grids");
    add_common(c_vis, false);
    c_vis->add_option("--ckpt", run.ckpt, "Checkpoint to visualize")->capture_default_str();
    c_vis->add_option("--count", run.count, "Number of test samples")->capture_default_str();
    c_vis->add_option("--flo", run.flo, "Render a .flo file instead of model outputs")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (c_gen->parsed()) return cmd_gen_data(gen);
        if (c_pre->parsed()) return cmd_pretrain(run);
        if (c_train->parsed()) return cmd_train(run);
        if (c_eval->parsed()) return cmd_eval(run);
        if (c_vis->parsed()) return cmd_visualize(run);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kUsage;
}
