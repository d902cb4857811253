#include <algorithm>
#include <cmath>
#include <numbers>

#include "ffwm/data.hpp"
#include "ffwm/rng.hpp"

namespace ffwm {

namespace {

// Landmark layout (indices into the 40-point set).
constexpr int kOval = 0;       // 12 points
constexpr int kEyeL = 12;      // 4
constexpr int kEyeR = 16;      // 4
constexpr int kBrows = 20;     // 4
constexpr int kNose = 24;      // 3
constexpr int kMouth = 27;     // 4
constexpr int kMarking = 31;   // 1
constexpr int kContour = 32;   // 8

constexpr double kContourScale = 1.1;
constexpr double kEdgePixels = 3.5;

double smoothstep01(double c) {
    c = std::clamp(c, 0.0, 1.0);
    return c * c * (3.0 - 2.0 * c);
}

// Coverage of a soft ellipse at (u,v); `edge` is the transition width.
double coverage(const Ellipse& e, double u, double v, double edge) {
    const double du = (u - e.cx) / e.ax;
    const double dv = (v - e.cy) / e.ay;
    const double sd = (std::sqrt(du * du + dv * dv) - 1.0) * std::min(e.ax, e.ay);
    return smoothstep01(0.5 - sd / edge);
}

Rgb lerp(const Rgb& a, const Rgb& b, double w) {
    return {a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w, a[2] + (b[2] - a[2]) * w};
}

const Rgb kBackground{0.18, 0.18, 0.20};

struct Shading {
    double edge;         // soft edge width in normalized units
    double drop_limit;   // features with sign*u below this are dropped
    double sign;
    bool dropout;
};

Rgb shade(const FaceGeometry& g, double u, double v, const Shading& s) {
    Rgb col = kBackground;
    col = lerp(col, g.hair_color, coverage(g.hair, u, v, s.edge));
    const double tex = 1.0 + g.texture_amp * std::sin(g.texture_fx * u + g.texture_fy * v + g.texture_phase);
    const Rgb skin{g.skin[0] * tex, g.skin[1] * tex, g.skin[2] * tex};
    col = lerp(col, skin, coverage(g.oval, u, v, s.edge));

    double keep = 1.0;
    if (s.dropout) {
        keep = smoothstep01(0.5 + (s.sign * (u - g.oval.cx) - s.drop_limit) / s.edge);
    }
    if (keep <= 0.0) {
        return col;
    }
    const Rgb nose_col{skin[0] * 0.82, skin[1] * 0.80, skin[2] * 0.80};
    col = lerp(col, nose_col, keep * coverage(g.nose, u, v, s.edge));
    for (const auto* e : {&g.brow_l, &g.brow_r}) {
        col = lerp(col, g.hair_color, keep * coverage(*e, u, v, s.edge));
    }
    for (const auto* e : {&g.eye_l, &g.eye_r}) {
        col = lerp(col, g.eye_color, keep * coverage(*e, u, v, s.edge));
    }
    col = lerp(col, g.lip_color, keep * coverage(g.mouth, u, v, s.edge));
    col = lerp(col, g.mark_color, keep * coverage(g.marking, u, v, s.edge));
    return col;
}

std::vector<std::pair<double, double>> frontal_landmarks(const FaceGeometry& g) {
    std::vector<std::pair<double, double>> p(kLandmarkCount);
    const double deg = std::numbers::pi / 180.0;
    for (int i = 0; i < 12; ++i) {
        const double a = 30.0 * i * deg;
        p[kOval + i] = {g.oval.cx + g.oval.ax * std::cos(a), g.oval.cy + g.oval.ay * std::sin(a)};
    }
    auto ellipse_points = [&](const Ellipse& e, int base) {
        p[base + 0] = {e.cx - e.ax, e.cy};
        p[base + 1] = {e.cx + e.ax, e.cy};
        p[base + 2] = {e.cx, e.cy - e.ay};
        p[base + 3] = {e.cx, e.cy + e.ay};
    };
    ellipse_points(g.eye_l, kEyeL);
    ellipse_points(g.eye_r, kEyeR);
    p[kBrows + 0] = {g.brow_l.cx - g.brow_l.ax, g.brow_l.cy};
    p[kBrows + 1] = {g.brow_l.cx + g.brow_l.ax, g.brow_l.cy};
    p[kBrows + 2] = {g.brow_r.cx - g.brow_r.ax, g.brow_r.cy};
    p[kBrows + 3] = {g.brow_r.cx + g.brow_r.ax, g.brow_r.cy};
    p[kNose + 0] = {g.nose.cx, g.nose.cy + 0.6 * g.nose.ay};
    p[kNose + 1] = {g.nose.cx - g.nose.ax, g.nose.cy + 0.5 * g.nose.ay};
    p[kNose + 2] = {g.nose.cx + g.nose.ax, g.nose.cy + 0.5 * g.nose.ay};
    ellipse_points(g.mouth, kMouth);
    p[kMarking] = {g.marking.cx, g.marking.cy};
    for (int i = 0; i < kContourLandmarks; ++i) {
        const double a = (22.5 + 45.0 * i) * deg;
        p[kContour + i] = {g.oval.cx + kContourScale * g.oval.ax * std::cos(a),
                           g.oval.cy + kContourScale * g.oval.ay * std::sin(a)};
    }
    return p;
}

}  // namespace

// ---------------------------------------------------------------------------

const std::vector<int>& LandmarkRegions::left_eye() {
    static const std::vector<int> v{kEyeL, kEyeL + 1, kEyeL + 2, kEyeL + 3};
    return v;
}
const std::vector<int>& LandmarkRegions::right_eye() {
    static const std::vector<int> v{kEyeR, kEyeR + 1, kEyeR + 2, kEyeR + 3};
    return v;
}
const std::vector<int>& LandmarkRegions::nose() {
    static const std::vector<int> v{kNose, kNose + 1, kNose + 2};
    return v;
}
const std::vector<int>& LandmarkRegions::mouth() {
    static const std::vector<int> v{kMouth, kMouth + 1, kMouth + 2, kMouth + 3};
    return v;
}
std::vector<std::vector<int>> LandmarkRegions::all() { return {left_eye(), right_eye(), nose(), mouth()}; }

// ---------------------------------------------------------------------------

FaceGeometry FaceGeometry::from_seed(uint64_t identity_seed) {
    Rng r(derive_seed(identity_seed, {0xFACE}));
    FaceGeometry g;
    g.oval = {0.0, r.uniform(0.0, 0.08), r.uniform(0.48, 0.60), r.uniform(0.66, 0.78)};
    g.hair = {0.0, g.oval.cy - r.uniform(0.12, 0.22), g.oval.ax * r.uniform(1.05, 1.18),
              g.oval.ay * r.uniform(0.85, 1.0)};

    const double ey = g.oval.cy + r.uniform(-0.24, -0.12);
    const double ex = r.uniform(0.17, 0.27);
    const double eax = r.uniform(0.07, 0.11);
    const double eay = r.uniform(0.035, 0.055);
    g.eye_l = {-ex, ey + r.uniform(-0.015, 0.015), eax, eay};
    g.eye_r = {ex, ey + r.uniform(-0.015, 0.015), eax, eay};
    const double by = r.uniform(0.09, 0.14);
    const double bax = eax * r.uniform(1.1, 1.4);
    g.brow_l = {-ex, g.eye_l.cy - by, bax, 0.022};
    g.brow_r = {ex, g.eye_r.cy - by, bax, 0.022};
    g.nose = {r.uniform(-0.02, 0.02), g.oval.cy + r.uniform(0.02, 0.12), r.uniform(0.05, 0.08), r.uniform(0.09, 0.15)};
    g.mouth = {0.0, g.oval.cy + r.uniform(0.28, 0.40), r.uniform(0.11, 0.19), r.uniform(0.03, 0.055)};
    const double side = r.sign();
    const double mr = r.uniform(0.045, 0.07);
    g.marking = {side * r.uniform(0.22, 0.36), g.oval.cy + r.uniform(0.0, 0.22), mr, mr};

    const double s = r.uniform(0.45, 0.85);
    g.skin = {s, s * r.uniform(0.72, 0.85), s * r.uniform(0.55, 0.72)};
    const double hv = r.uniform(0.05, 0.35);
    g.hair_color = {hv, hv * r.uniform(0.6, 0.9), hv * r.uniform(0.4, 0.8)};
    g.eye_color = {r.uniform(0.05, 0.3), r.uniform(0.05, 0.3), r.uniform(0.05, 0.3)};
    g.lip_color = {r.uniform(0.55, 0.8), r.uniform(0.2, 0.35), r.uniform(0.25, 0.4)};
    g.mark_color = {r.uniform(0.15, 0.45), r.uniform(0.05, 0.3), r.uniform(0.05, 0.3)};
    g.texture_amp = r.uniform(0.05, 0.09);
    g.texture_fx = r.sign() * r.uniform(3.0, 6.0);
    g.texture_fy = r.sign() * r.uniform(3.0, 6.0);
    g.texture_phase = r.uniform(0.0, 2.0 * std::numbers::pi);
    return g;
}

IllumModel IllumModel::from_id(int illum_id) {
    Rng r(derive_seed(0x11100111, {static_cast<uint64_t>(illum_id)}));
    IllumModel m;
    m.gain = r.sign() * r.uniform(0.3, 0.5);
    m.ramp = r.sign() * r.uniform(0.2, 0.45);
    for (auto& c : m.cast) {
        c = r.uniform(-0.08, 0.08);
    }
    return m;
}

// ---------------------------------------------------------------------------

PoseWarp::PoseWarp(int pose_deg) {
    if (std::abs(pose_deg) > 90) {
        throw InvalidArgument("pose must lie in [-90, 90] degrees, got " + std::to_string(pose_deg));
    }
    const double theta = std::abs(pose_deg) * std::numbers::pi / 180.0;
    t_ = std::abs(pose_deg) / 90.0;
    sigma_ = pose_deg > 0 ? 1.0 : (pose_deg < 0 ? -1.0 : 0.0);
    k_ = 1.0 - 0.5 * (1.0 - std::cos(theta));
    h_ = 0.15 * k_ * t_;
}

double PoseWarp::forward(double u) const {
    const double sh = sigma_ * h_;
    if (u > 1.0) {
        return k_ + (k_ + 2.0 * sh) * (u - 1.0);
    }
    if (u < -1.0) {
        return -k_ + (k_ - 2.0 * sh) * (u + 1.0);
    }
    return k_ * u + sh * (u * u - 1.0);
}

double PoseWarp::inverse(double m) const {
    const double sh = sigma_ * h_;
    if (m > k_) {
        return 1.0 + (m - k_) / (k_ + 2.0 * sh);
    }
    if (m < -k_) {
        return -1.0 + (m + k_) / (k_ - 2.0 * sh);
    }
    // Root of sh*u^2 + k*u - (sh + m) = 0 in rationalized form (valid for sh = 0).
    return 2.0 * (sh + m) / (k_ + std::sqrt(k_ * k_ + 4.0 * sh * (sh + m)));
}

// ---------------------------------------------------------------------------

SyntheticRender render_synthetic_full(const SyntheticFaceSpec& spec) {
    if (spec.resolution <= 0 || spec.resolution % 4 != 0) {
        throw InvalidArgument("synthetic resolution must be a positive multiple of 4");
    }
    const PoseWarp pw(spec.pose_deg);
    const FaceGeometry g = FaceGeometry::from_seed(spec.identity_seed);
    const IllumModel illum = IllumModel::from_id(spec.illum_id);

    const int n = spec.resolution;
    const double c = (n - 1) / 2.0;
    const double radius = n / 2.0;
    const double t = pw.pose_fraction();

    Shading plain{kEdgePixels / radius, 0.0, pw.sign(), false};
    Shading occluded = plain;
    const double band = 0.5 * g.oval.ax * std::max(0.0, t - 0.33) / 0.67;
    occluded.dropout = spec.dropout && band > 0.0;
    occluded.drop_limit = -g.oval.ax + band;

    const auto hw = static_cast<size_t>(n) * static_cast<size_t>(n);
    std::vector<float> frontal(3 * hw), profile(3 * hw), clean(3 * hw);
    std::vector<float> fmask(hw), pmask(hw), fwd(2 * hw, 0.f), rev(2 * hw, 0.f);

    for (int y = 0; y < n; ++y) {
        const double v = (y - c) / radius;
        for (int x = 0; x < n; ++x) {
            const auto i = static_cast<size_t>(y) * n + x;
            const double uf = (x - c) / radius;
            const Rgb fc = shade(g, uf, v, plain);
            fmask[i] = coverage(g.oval, uf, v, plain.edge) >= 0.5 ? 1.f : 0.f;
            fwd[i] = static_cast<float>(radius * (pw.forward(uf) - uf));

            const double up = uf;  // same grid, read as a profile abscissa
            const double src = pw.inverse(up);
            rev[i] = static_cast<float>(radius * (src - up));
            const Rgb pc_clean = shade(g, src, v, plain);
            Rgb pc = shade(g, src, v, occluded);
            pmask[i] = coverage(g.oval, src, v, plain.edge) >= 0.5 ? 1.f : 0.f;
            if (spec.illumination && t > 0.0) {
                const double base = (1.0 + t * illum.gain) * (1.0 + t * illum.ramp * up);
                for (int ch = 0; ch < 3; ++ch) {
                    pc[static_cast<size_t>(ch)] *= base * (1.0 + t * illum.cast[static_cast<size_t>(ch)]);
                }
            }
            for (int ch = 0; ch < 3; ++ch) {
                const auto k = static_cast<size_t>(ch);
                frontal[k * hw + i] = static_cast<float>(std::clamp(fc[k], 0.0, 1.0));
                profile[k * hw + i] = static_cast<float>(std::clamp(pc[k], 0.0, 1.0));
                clean[k * hw + i] = static_cast<float>(std::clamp(pc_clean[k], 0.0, 1.0));
            }
        }
    }

    auto tensor = [n](std::vector<float>& buf, int64_t ch) {
        return torch::from_blob(buf.data(), {ch, n, n}, torch::kFloat32).clone();
    };

    SyntheticRender out;
    Sample& s = out.sample;
    s.identity_id = spec.identity_id;
    s.pose_deg = spec.pose_deg;
    s.illum_id = spec.illum_id;
    s.frontal.image = Image(tensor(frontal, 3));
    s.frontal.mask = Mask(tensor(fmask, 1));
    s.profile.image = Image(tensor(profile, 3));
    s.profile.mask = Mask(tensor(pmask, 1));
    out.clean_profile = Image(tensor(clean, 3));
    s.gt_forward_flow = FlowField(tensor(fwd, 2));
    s.gt_reverse_flow = FlowField(tensor(rev, 2));

    for (const auto& [u, v] : frontal_landmarks(g)) {
        const auto y = static_cast<float>(c + radius * v);
        s.frontal.landmarks.push_back({static_cast<float>(c + radius * u), y});
        s.profile.landmarks.push_back({static_cast<float>(c + radius * pw.forward(u)), y});
    }
    return out;
}

Sample render_synthetic(const SyntheticFaceSpec& spec) { return render_synthetic_full(spec).sample; }

}  // namespace ffwm
