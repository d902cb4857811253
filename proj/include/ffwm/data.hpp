#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ffwm/core.hpp"

namespace ffwm {

inline constexpr int kSyntheticLandmarks = 32;
inline constexpr int kContourLandmarks = 8;
inline constexpr int kLandmarkCount = kSyntheticLandmarks + kContourLandmarks;
inline constexpr int kIlluminations = 20;

/// Landmark index groups used for region terms of the perceptual loss.
struct LandmarkRegions {
    static const std::vector<int>& left_eye();
    static const std::vector<int>& right_eye();
    static const std::vector<int>& nose();
    static const std::vector<int>& mouth();
    static std::vector<std::vector<int>> all();
};

/// Soft-edged ellipse in normalized face coordinates (units of half the image width).
struct Ellipse {
    double cx = 0, cy = 0, ax = 0, ay = 0;
};

using Rgb = std::array<double, 3>;

/// Per-identity face geometry and colours. Drawn deterministically from the identity seed.
struct FaceGeometry {
    Ellipse oval, hair;
    Ellipse eye_l, eye_r, brow_l, brow_r, nose, mouth, marking;
    Rgb skin{}, hair_color{}, eye_color{}, lip_color{}, mark_color{};
    double texture_amp = 0, texture_fx = 0, texture_fy = 0, texture_phase = 0;

    static FaceGeometry from_seed(uint64_t identity_seed);
};

/// Profile lighting: global gain, horizontal ramp and colour cast, all scaled
/// by |pose|/90 so pose 0 is neutral.
struct IllumModel {
    double gain = 0.0;               // signed, applied as 1 + t*gain
    double ramp = 0.0;               // signed, applied as 1 + t*ramp*u
    std::array<double, 3> cast{};    // per channel, applied as 1 + t*cast[c]

    static IllumModel from_id(int illum_id);
};

struct SyntheticFaceSpec {
    int identity_id = 0;
    uint64_t identity_seed = 0;
    int pose_deg = 0;  // in [-90, 90]
    int illum_id = 0;
    int resolution = 64;
    bool illumination = true;  // apply the profile lighting model
    bool dropout = true;       // replace far-side features by plain skin on large poses
};

/// Horizontal pose squeeze in normalized coordinates u = (x - cx) / (W/2).
/// Maps a frontal abscissa to its profile abscissa; strictly increasing.
class PoseWarp {
public:
    explicit PoseWarp(int pose_deg);

    double forward(double u) const;  // frontal -> profile
    double inverse(double u) const;  // profile -> frontal

    double squeeze() const { return k_; }
    double sign() const { return sigma_; }
    double pose_fraction() const { return t_; }

private:
    double k_ = 1.0, h_ = 0.0, sigma_ = 0.0, t_ = 0.0;
};

struct SyntheticRender {
    Sample sample;
    Image clean_profile;  // profile geometry without lighting or dropout
};

/// Renders one frontal/profile pair with exact flows and landmarks.
/// Throws InvalidArgument for |pose| > 90 or a resolution that is not a positive multiple of 4.
SyntheticRender render_synthetic_full(const SyntheticFaceSpec& spec);
Sample render_synthetic(const SyntheticFaceSpec& spec);

struct ManifestRecord {
    int identity_id = 0;
    int pose_deg = 0;
    int illum_id = 0;
    bool gallery = false;
};

struct ManifestIdentity {
    int id = 0;
    uint64_t seed = 0;
};

struct DatasetManifest {
    std::filesystem::path root;  // not serialized; load_manifest sets it to the manifest directory
    uint64_t seed = 0;
    int resolution = 64;
    int landmark_count = kLandmarkCount;
    int illuminations = kIlluminations;
    std::vector<int> poses;
    std::vector<ManifestIdentity> identities;
    std::vector<int> train_ids;
    std::vector<int> test_ids;
    std::vector<ManifestRecord> records;

    uint64_t identity_seed(int identity_id) const;
    bool is_train(int identity_id) const;

    /// Non-gallery records whose identity is in the requested split.
    std::vector<ManifestRecord> split_records(bool train) const;
    std::vector<ManifestRecord> gallery() const;

    std::string to_json() const;
    static DatasetManifest from_json(const std::string& text);
};

std::vector<int> default_poses();

/// Deterministic synthetic manifest: 80/20 identity split, every pose with
/// all illuminations (pose 0 once), one frontal gallery record per test identity.
/// `root` is created if missing; a root that cannot be used throws IoError.
DatasetManifest build_manifest(const std::filesystem::path& root, int n_identities, const std::vector<int>& poses,
                               uint64_t seed, int resolution = 64, int illuminations = kIlluminations);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Spec of a manifest record (pose 0 and illumination 0 for gallery records).
SyntheticFaceSpec record_spec(const DatasetManifest& manifest, const ManifestRecord& record);
Sample render_record(const DatasetManifest& manifest, const ManifestRecord& record);

/// Loads `<dir>/<pose>_<illum>.png` as the profile and the pose-0 image with the
/// lowest illumination id as the frontal target, each with its `.mask.png` and
/// `.lmk.txt`, resized to `resolution`.
Sample load_real_pair(const std::filesystem::path& dir, int pose_deg, int illum_id, int resolution);

/// Loads one view (`<stem>.png`, `<stem>.mask.png`, `<stem>.lmk.txt`).
FaceView load_real_view(const std::filesystem::path& stem, int resolution);

/// Writes every record of the manifest in the real-data layout under `root`.
std::vector<std::filesystem::path> export_real_layout(const DatasetManifest& manifest,
                                                      const std::filesystem::path& root);

/// Stacked tensors for a list of samples.
struct Batch {
    torch::Tensor profile;        // [N,3,H,W]
    torch::Tensor frontal;        // [N,3,H,W]
    torch::Tensor profile_mask;   // [N,1,H,W]
    torch::Tensor frontal_mask;   // [N,1,H,W]
    torch::Tensor gt_forward;     // [N,2,H,W] or undefined
    torch::Tensor gt_reverse;     // [N,2,H,W] or undefined
    std::vector<LandmarkSet> profile_landmarks;
    std::vector<LandmarkSet> frontal_landmarks;
    std::vector<int> identity_ids, poses, illums;

    int64_t size() const { return profile.size(0); }
};

Batch collate(const std::vector<Sample>& samples);

}  // namespace ffwm
