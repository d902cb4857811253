#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ffwm {

/// Loss trade-off weights, in the order pixel, perceptual, adversarial,
/// illumination-preserving, identity.
using LambdaWeights = std::array<double, 5>;

struct Config {
    LambdaWeights lambdas{5.0, 1.0, 0.1, 15.0, 1.0};
    double lr_main = 0.0004;
    double lr_flow = 0.00005;
    int batch_size = 8;
    int scales = 3;
    std::vector<double> vgg_layer_weights{1.0, 0.5, 0.25, 0.25, 0.125};

    // Guided filter. A negative warm-up means 10% of total_steps; a zero radius
    // means a quarter of the resolution.
    int gfilter_warmup_steps = -1;
    double gfilter_eps = 1e-2;
    int gfilter_radius = 0;

    uint64_t seed = 1;
    int resolution = 64;

    int total_steps = 2000;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;

    // Flow pretraining.
    int pretrain_epochs = 4;
    double pretrain_lr = 0.0004;
    double landmark_weight = 1.0;
    double sampling_weight = 1.0;
    double flow_reg_weight = 0.05;
    int sampling_tap = 2;

    // Identity embedder (LightCNN stand-in).
    int embedder_steps = 600;
    int embedder_aux_identities = 96;
    double embedder_lr = 0.001;

    int checkpoint_every = 500;
    int sample_every = 500;

    int warmup_steps() const;
    int guided_radius() const;

    /// Serializes to the same `key = value` format `parse_config` reads.
    std::string to_text() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys, malformed
/// values and invariant violations throw InvalidArgument.
Config parse_config(std::string_view text);
Config load_config(const std::filesystem::path& path);

void validate_config(const Config& cfg);

}  // namespace ffwm
