#include "ffwm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ffwm/image_io.hpp"
#include "ffwm/rng.hpp"

namespace ffwm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::vector<int> default_poses() { return {0, -15, 15, -30, 30, -45, 45, -60, 60, -75, 75, -90, 90}; }

uint64_t DatasetManifest::identity_seed(int identity_id) const {
    for (const auto& id : identities) {
        if (id.id == identity_id) {
            return id.seed;
        }
    }
    throw InvalidArgument("identity " + std::to_string(identity_id) + " is not in the manifest");
}

bool DatasetManifest::is_train(int identity_id) const {
    return std::find(train_ids.begin(), train_ids.end(), identity_id) != train_ids.end();
}

std::vector<ManifestRecord> DatasetManifest::split_records(bool train) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records) {
        if (!r.gallery && is_train(r.identity_id) == train) {
            out.push_back(r);
        }
    }
    return out;
}

std::vector<ManifestRecord> DatasetManifest::gallery() const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records) {
        if (r.gallery) {
            out.push_back(r);
        }
    }
    return out;
}

std::string DatasetManifest::to_json() const {
    json j;
    j["format"] = "ffwm-manifest";
    j["seed"] = seed;
    j["resolution"] = resolution;
    j["landmark_count"] = landmark_count;
    j["illuminations"] = illuminations;
    j["poses"] = poses;
    json ids = json::array();
    for (const auto& id : identities) {
        ids.push_back({{"id", id.id}, {"seed", id.seed}});
    }
    j["identities"] = ids;
    j["train_ids"] = train_ids;
    j["test_ids"] = test_ids;
    json recs = json::array();
    for (const auto& r : records) {
        recs.push_back({{"identity", r.identity_id}, {"pose", r.pose_deg}, {"illum", r.illum_id}, {"gallery", r.gallery}});
    }
    j["records"] = recs;
    return j.dump(1) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
    DatasetManifest m;
    try {
        const auto j = json::parse(text);
        if (j.value("format", "") != "ffwm-manifest") {
            throw InvalidArgument("not an ffwm manifest");
        }
        m.seed = j.at("seed").get<uint64_t>();
        m.resolution = j.at("resolution").get<int>();
        m.landmark_count = j.at("landmark_count").get<int>();
        m.illuminations = j.at("illuminations").get<int>();
        m.poses = j.at("poses").get<std::vector<int>>();
        for (const auto& id : j.at("identities")) {
            m.identities.push_back({id.at("id").get<int>(), id.at("seed").get<uint64_t>()});
        }
        m.train_ids = j.at("train_ids").get<std::vector<int>>();
        m.test_ids = j.at("test_ids").get<std::vector<int>>();
        for (const auto& r : j.at("records")) {
            m.records.push_back({r.at("identity").get<int>(), r.at("pose").get<int>(), r.at("illum").get<int>(),
                                 r.at("gallery").get<bool>()});
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

DatasetManifest build_manifest(const fs::path& root, int n_identities, const std::vector<int>& poses, uint64_t seed,
                               int resolution, int illuminations) {
    if (n_identities < 2) {
        throw InvalidArgument("build_manifest needs at least 2 identities for a train/test split");
    }
    if (illuminations < 1) {
        throw InvalidArgument("build_manifest needs at least one illumination");
    }
    if (resolution <= 0 || resolution % 4 != 0) {
        throw InvalidArgument("resolution must be a positive multiple of 4");
    }
    for (const int p : poses) {
        if (std::abs(p) > 90) {
            throw InvalidArgument("pose out of range: " + std::to_string(p));
        }
    }
    std::error_code ec;
    fs::create_directories(root, ec);
    if (!fs::is_directory(root, ec)) {
        throw IoError("cannot use dataset root " + root.string());
    }
    fs::directory_iterator it(root, ec);
    if (ec) {
        throw IoError("cannot read dataset root " + root.string() + ": " + ec.message());
    }

    DatasetManifest m;
    m.root = root;
    m.seed = seed;
    m.resolution = resolution;
    m.illuminations = illuminations;
    m.poses = poses;
    std::vector<int> order;
    for (int i = 0; i < n_identities; ++i) {
        m.identities.push_back({i, derive_seed(seed, {0x1D, static_cast<uint64_t>(i)})});
        order.push_back(i);
    }
    Rng rng(derive_seed(seed, {0x5D17}));
    rng.shuffle(order);
    const int n_test = std::max(1, static_cast<int>(std::lround(0.2 * n_identities)));
    m.test_ids.assign(order.begin(), order.begin() + n_test);
    m.train_ids.assign(order.begin() + n_test, order.end());
    std::sort(m.test_ids.begin(), m.test_ids.end());
    std::sort(m.train_ids.begin(), m.train_ids.end());

    for (const auto& id : m.identities) {
        if (!m.is_train(id.id)) {
            m.records.push_back({id.id, 0, 0, true});
        }
        for (const int p : poses) {
            const int n_illum = p == 0 ? 1 : illuminations;
            for (int l = 0; l < n_illum; ++l) {
                m.records.push_back({id.id, p, l, false});
            }
        }
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        out << manifest.to_json();
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
    }
    fs::rename(tmp, path);
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read manifest " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    auto m = DatasetManifest::from_json(ss.str());
    m.root = path.parent_path();
    return m;
}

SyntheticFaceSpec record_spec(const DatasetManifest& manifest, const ManifestRecord& record) {
    SyntheticFaceSpec s;
    s.identity_id = record.identity_id;
    s.identity_seed = manifest.identity_seed(record.identity_id);
    s.pose_deg = record.gallery ? 0 : record.pose_deg;
    s.illum_id = record.gallery ? 0 : record.illum_id;
    s.resolution = manifest.resolution;
    return s;
}

Sample render_record(const DatasetManifest& manifest, const ManifestRecord& record) {
    return render_synthetic(record_spec(manifest, record));
}

// ---------------------------------------------------------------------------
// Real-data layout

namespace {

std::string view_name(int pose, int illum) { return std::to_string(pose) + "_" + std::to_string(illum); }

LandmarkSet read_landmarks(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("missing landmark file: " + path.string());
    }
    LandmarkSet pts;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        std::istringstream ls(line);
        Point2 p;
        if (!(ls >> p.x >> p.y)) {
            throw IoError("malformed landmark line " + std::to_string(line_no) + " in " + path.string());
        }
        pts.push_back(p);
    }
    return pts;
}

void write_landmarks(const fs::path& path, const LandmarkSet& pts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    char buf[64];
    for (const auto& p : pts) {
        std::snprintf(buf, sizeof(buf), "%.4f %.4f\n", p.x, p.y);
        out << buf;
    }
}

void write_view(const fs::path& stem, const FaceView& v) {
    write_png(fs::path(stem.string() + ".png"), v.image.tensor());
    write_png(fs::path(stem.string() + ".mask.png"), v.mask.tensor());
    write_landmarks(fs::path(stem.string() + ".lmk.txt"), v.landmarks);
}

}  // namespace

FaceView load_real_view(const fs::path& stem, int resolution) {
    const fs::path img_path(stem.string() + ".png");
    const fs::path mask_path(stem.string() + ".mask.png");
    const fs::path lmk_path(stem.string() + ".lmk.txt");
    for (const auto& p : {img_path, mask_path, lmk_path}) {
        if (!fs::exists(p)) {
            throw IoError("missing file: " + p.string());
        }
    }
    auto img = read_png(img_path);
    if (img.size(0) == 1) {
        img = img.expand({3, img.size(1), img.size(2)}).contiguous();
    }
    auto mask = read_png(mask_path);
    if (mask.size(0) != 1) {
        mask = mask.mean(0, true);
    }
    if (mask.size(1) != img.size(1) || mask.size(2) != img.size(2)) {
        throw IoError("mask size differs from image size: " + mask_path.string());
    }
    const double sx = static_cast<double>(resolution) / static_cast<double>(img.size(2));
    const double sy = static_cast<double>(resolution) / static_cast<double>(img.size(1));
    FaceView v;
    v.image = Image(resize_image(img, resolution, resolution).clamp(0, 1));
    v.mask = Mask((resize_image(mask, resolution, resolution, true) >= 0.5).to(torch::kFloat32));
    for (auto p : read_landmarks(lmk_path)) {
        p.x = static_cast<float>((p.x + 0.5) * sx - 0.5);
        p.y = static_cast<float>((p.y + 0.5) * sy - 0.5);
        v.landmarks.push_back(p);
    }
    return v;
}

Sample load_real_pair(const fs::path& dir, int pose_deg, int illum_id, int resolution) {
    if (!fs::is_directory(dir)) {
        throw IoError("missing identity directory: " + dir.string());
    }
    // Frontal target: pose-0 view with the lowest illumination id.
    int frontal_illum = -1;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        int p = 0, l = 0;
        char tail[8] = {0};
        if (std::sscanf(name.c_str(), "%d_%d.pn%1s", &p, &l, tail) == 3 && name.find(".mask.") == std::string::npos &&
            p == 0 && (frontal_illum < 0 || l < frontal_illum)) {
            frontal_illum = l;
        }
    }
    if (frontal_illum < 0) {
        throw IoError("no frontal (pose 0) image in " + dir.string());
    }
    Sample s;
    s.profile = load_real_view(dir / view_name(pose_deg, illum_id), resolution);
    s.frontal = load_real_view(dir / view_name(0, frontal_illum), resolution);
    if (s.profile.landmarks.size() != s.frontal.landmarks.size()) {
        throw IoError("landmark count mismatch between " + (dir / view_name(pose_deg, illum_id)).string() +
                      ".lmk.txt and " + (dir / view_name(0, frontal_illum)).string() + ".lmk.txt");
    }
    s.pose_deg = pose_deg;
    s.illum_id = illum_id;
    try {
        s.identity_id = std::stoi(dir.filename().string());
    } catch (const std::exception&) {
        s.identity_id = 0;
    }
    const auto problems = validate_sample(s);
    if (!problems.empty()) {
        throw IoError("invalid sample in " + dir.string() + ": " + problems.front());
    }
    return s;
}

std::vector<fs::path> export_real_layout(const DatasetManifest& manifest, const fs::path& root) {
    std::vector<fs::path> written;
    for (const auto& r : manifest.records) {
        const auto dir = root / std::to_string(r.identity_id);
        std::error_code ec;
        fs::create_directories(dir, ec);
        const Sample s = render_record(manifest, r);
        const auto frontal_stem = dir / view_name(0, 0);
        if (!fs::exists(fs::path(frontal_stem.string() + ".png"))) {
            write_view(frontal_stem, s.frontal);
            written.push_back(fs::path(frontal_stem.string() + ".png"));
        }
        if (r.gallery || r.pose_deg == 0) {
            continue;
        }
        const auto stem = dir / view_name(r.pose_deg, r.illum_id);
        write_view(stem, s.profile);
        written.push_back(fs::path(stem.string() + ".png"));
    }
    return written;
}

// ---------------------------------------------------------------------------

Batch collate(const std::vector<Sample>& samples) {
    if (samples.empty()) {
        throw InvalidArgument("collate needs at least one sample");
    }
    std::vector<torch::Tensor> p, f, pm, fm, gf, gr;
    bool flows = true;
    Batch b;
    for (const auto& s : samples) {
        p.push_back(s.profile.image.tensor());
        f.push_back(s.frontal.image.tensor());
        pm.push_back(s.profile.mask.tensor());
        fm.push_back(s.frontal.mask.tensor());
        flows = flows && s.gt_forward_flow && s.gt_reverse_flow;
        if (flows) {
            gf.push_back(s.gt_forward_flow->tensor());
            gr.push_back(s.gt_reverse_flow->tensor());
        }
        b.profile_landmarks.push_back(s.profile.landmarks);
        b.frontal_landmarks.push_back(s.frontal.landmarks);
        b.identity_ids.push_back(s.identity_id);
        b.poses.push_back(s.pose_deg);
        b.illums.push_back(s.illum_id);
    }
    b.profile = torch::stack(p);
    b.frontal = torch::stack(f);
    b.profile_mask = torch::stack(pm);
    b.frontal_mask = torch::stack(fm);
    if (flows) {
        b.gt_forward = torch::stack(gf);
        b.gt_reverse = torch::stack(gr);
    }
    return b;
}

}  // namespace ffwm
