#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ffwm/config.hpp"
#include "ffwm/data.hpp"
#include "ffwm/gfilter.hpp"
#include "ffwm/losses.hpp"
#include "ffwm/nets.hpp"

namespace ffwm {

/// Every network of the model. Construction is seeded from cfg.seed, so two
/// Models built from equal configs hold identical weights.
struct Models {
    FlowEstimator flow{nullptr};          // F: profile -> forward flow (frontal grid)
    FlowEstimator reverse_flow{nullptr};  // F': profile -> reverse flow (profile grid)
    Generator generator{nullptr};         // R
    Discriminator discriminator{nullptr}; // D
    Embedder embedder{nullptr};           // psi, frozen once trained
    PerceptualBackbone backbone{nullptr}; // fixed feature pyramid

    explicit Models(const Config& cfg);

    void train_mode();
    void eval_mode();
};

/// Raised when a loss turns non-finite. `report` holds the offending values.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, LossReport report)
        : std::runtime_error(what), report(std::move(report)) {}
    LossReport report;
};

struct TrainState {
    Config cfg;
    int64_t step = 0;
    Models models;
    std::unique_ptr<torch::optim::Adam> opt_d;  // D, lr_main
    std::unique_ptr<torch::optim::Adam> opt_g;  // R at lr_main, F and F' at lr_flow

    explicit TrainState(const Config& cfg);

    void save(const std::filesystem::path& path) const;
    /// Restores a state written by save(); the stored config replaces `cfg`.
    static std::unique_ptr<TrainState> load(const std::filesystem::path& path);
    /// Copies F, F' and psi from a checkpoint, leaving everything else untouched.
    void load_pretrained(const std::filesystem::path& path);
};

/// Deterministic batch order: each epoch is a fresh shuffle seeded by
/// (seed, epoch), so any step's batch can be recomputed without sampler state.
class BatchSampler {
public:
    BatchSampler(const DatasetManifest& manifest, std::vector<ManifestRecord> records, int batch_size, uint64_t seed);

    std::vector<ManifestRecord> records_at(int64_t step);
    Batch batch_at(int64_t step);
    size_t epoch_size() const { return records_.size(); }
    int64_t steps_per_epoch() const;

private:
    const std::vector<size_t>& permutation(int64_t epoch);

    const DatasetManifest& manifest_;
    std::vector<ManifestRecord> records_;
    int batch_size_;
    uint64_t seed_;
    int64_t cached_epoch_ = -1;
    std::vector<size_t> cached_perm_;
};

struct EmbedderReport {
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    int classes = 0;
};

/// Trains psi as a cosine classifier over an auxiliary pool of synthetic
/// identities plus the train split (near-frontal views, lighting augmentation),
/// then freezes it.
EmbedderReport train_embedder(Embedder& embedder, const DatasetManifest& manifest, const Config& cfg);

struct PretrainReport {
    std::vector<double> epoch_landmark;  // mean landmark loss of F per epoch
    std::vector<double> epoch_total;     // mean pretraining objective (F + F') per epoch
    int64_t steps = 0;
};

/// Pretrains F on the profile->frontal direction and F' on frontal->profile
/// with landmark, sampling-correctness and smoothness terms.
PretrainReport pretrain_flows(TrainState& state, const DatasetManifest& manifest, int epochs);

/// Tensors of one forward pass through the model.
struct ForwardPass {
    torch::Tensor phi;      // forward flow F(I)
    torch::Tensor phi_rev;  // reverse flow F'(I)
    torch::Tensor synth;    // I-hat = R(I, phi)
    torch::Tensor warped;   // W(I-hat, phi_rev)
    torch::Tensor guided;   // guided_filter(I^gt, I-hat), or I-hat itself before warm-up
    std::vector<torch::Tensor> attention;
};

ForwardPass ffwm_forward(Models& models, const Batch& batch, bool use_guided, const GuidedFilterParams& params);

/// Generator-side loss terms of a forward pass (adversarial term uses the current D).
LossComponents generator_losses(Models& models, const ForwardPass& pass, const Batch& batch, const Config& cfg,
                                LossReport& report);

struct StepResult {
    LossReport report;
    double d_loss = 0.0;
    ForwardPass pass;  // detached
};

/// One training step: D update on (I^gt, guided), then R, F, F' update on the
/// lambda-weighted generator objective. Throws TrainingDiverged on a non-finite loss.
StepResult ffwm_step(TrainState& state, const Batch& batch);

struct TrainOptions {
    std::optional<std::filesystem::path> resume_from;  // full state checkpoint
    std::optional<std::filesystem::path> init_from;    // pretrained F, F' and psi
    std::optional<int64_t> stop_after;                 // stop once this many steps are done
    bool quiet = false;
};

/// Embedder training and flow pretraining (skipped when resuming or when
/// init_from is given), then the main loop. Writes checkpoints/step_%08d.ckpt,
/// logs/losses.jsonl and samples/step_%08d.png under `out_dir`; returns the
/// last checkpoint written.
std::filesystem::path train_full(const Config& cfg, const DatasetManifest& manifest,
                                 const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Embedder training plus flow pretraining only; writes one checkpoint usable
/// as TrainOptions::init_from and returns its path.
std::filesystem::path pretrain_full(const Config& cfg, const DatasetManifest& manifest,
                                    const std::filesystem::path& out_dir, PretrainReport* report = nullptr,
                                    bool quiet = false);

std::string checkpoint_name(int64_t step);

/// Regions of the perceptual loss for every element of a batch.
std::vector<std::vector<Box>> batch_regions(const Batch& batch, int resolution);

}  // namespace ffwm
