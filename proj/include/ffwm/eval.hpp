#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "ffwm/data.hpp"
#include "ffwm/nets.hpp"

namespace ffwm {

struct Models;

/// Raised when the evaluation protocol cannot be followed (e.g. a probe whose
/// identity has no gallery image).
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FrontalizerOutput {
    torch::Tensor frontal;       // [N,3,H,W]
    torch::Tensor forward_flow;  // [N,2,H,W]
    torch::Tensor reverse_flow;  // [N,2,H,W]
    std::vector<torch::Tensor> attention;
};

/// Maps a batch of profiles to frontal views (plus the flows that produced them).
using Frontalizer = std::function<FrontalizerOutput(const Batch&)>;

/// R(I, F(I)) with F'(I) as reverse flow, run in eval mode without gradients.
Frontalizer model_frontalizer(Models& models);
/// No frontalization: returns the profile itself with zero flows.
Frontalizer raw_profile_frontalizer();
/// Returns the ground-truth frontal image and flows of each sample.
Frontalizer oracle_frontalizer();

struct RecognitionResult {
    std::map<int, double> rates;   // |pose| -> rank-1 rate in percent
    std::map<int, int> probes;     // |pose| -> probe count
    double average = 0.0;          // unweighted mean over the non-zero pose bins
    int gallery_size = 0;

    /// Unweighted mean over bins with |pose| >= min_pose.
    double average_from(int min_pose) const;
};

/// Nearest gallery embedding by cosine similarity. Embeddings are [N,D].
RecognitionResult rank1_from_embeddings(const torch::Tensor& gallery, const std::vector<int>& gallery_ids,
                                        const torch::Tensor& probes, const std::vector<int>& probe_ids,
                                        const std::vector<int>& probe_poses);

/// Frontalizes every test-split probe, embeds it with psi_pool and matches it
/// against the frontal gallery of the test identities.
RecognitionResult rank1_recognition(const Frontalizer& frontalize, const DatasetManifest& manifest,
                                    Embedder& embedder);

struct VerificationResult {
    double accuracy = 0.0;  // percent, 10-fold
    double auc = 0.0;       // in [0,1]
};

/// ACC from 10-fold (contiguous blocks) threshold selection and trapezoidal ROC AUC (ties count half).
/// Throws InvalidArgument for fewer than 2 pairs.
VerificationResult verification_scores(const std::vector<double>& scores, const std::vector<bool>& same,
                                       int folds = 10);

struct VerificationPair {
    ManifestRecord a, b;
    bool same = false;
};

/// Balanced same/different pairs drawn from the test split.
std::vector<VerificationPair> make_verification_pairs(const DatasetManifest& manifest, int count, uint64_t seed);

VerificationResult verification(const Frontalizer& frontalize, const DatasetManifest& manifest,
                                const std::vector<VerificationPair>& pairs, Embedder& embedder);

struct IllumReport {
    std::map<int, double> warped_vs_profile;  // |pose| -> mean masked L1(W(I-hat, phi_rev), I)
    std::map<int, double> synth_vs_frontal;   // |pose| -> mean masked L1(I-hat, I^gt)
    double mean_warped_vs_profile = 0.0;
    double mean_synth_vs_frontal = 0.0;
};

/// Mean over channels and mask pixels of |a - b|, per batch element.
torch::Tensor masked_mean_l1(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask);

IllumReport illumination_metrics(const Frontalizer& frontalize, const std::vector<Sample>& samples);
/// Over the test split of a manifest.
IllumReport illumination_metrics(const Frontalizer& frontalize, const DatasetManifest& manifest);

/// Writes per sample a triptych (profile | frontalized | ground truth), a flow
/// panel (colour-coded forward | reverse flow) and an attention grid.
std::vector<std::filesystem::path> dump_qualitative(const Frontalizer& frontalize, const std::vector<Sample>& samples,
                                                    const std::filesystem::path& out_dir);

/// Plain-text table with one row per method: pose columns 15..90 and Avg.
std::string format_recognition_table(const std::vector<std::pair<std::string, RecognitionResult>>& rows);

struct FlowMetrics {
    double epe = 0.0;              // mean endpoint error of F inside the frontal mask, px
    double reverse_epe = 0.0;      // same for F' inside the profile mask
    double pose0_magnitude = 0.0;  // mean |F(I)| inside the mask for pose-0 inputs, px
    std::map<int, double> epe_by_pose;
};

/// Flow accuracy of the model against ground-truth flows on the given split.
FlowMetrics flow_metrics(Models& models, const DatasetManifest& manifest, bool train_split = false);

std::string recognition_json(const RecognitionResult& r);
std::string illum_json(const IllumReport& r);

}  // namespace ffwm
