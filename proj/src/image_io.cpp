#include "ffwm/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ffwm/core.hpp"

namespace ffwm {

namespace {

cv::Mat to_mat_u8(const torch::Tensor& chw) {
    if (chw.dim() != 3 || (chw.size(0) != 1 && chw.size(0) != 3)) {
        throw InvalidArgument("write_png expects a [1,H,W] or [3,H,W] tensor");
    }
    auto hwc = (chw.detach().to(torch::kFloat32).clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0})
                   .contiguous();
    const int h = static_cast<int>(hwc.size(0));
    const int w = static_cast<int>(hwc.size(1));
    const int c = static_cast<int>(hwc.size(2));
    cv::Mat m(h, w, c == 3 ? CV_8UC3 : CV_8UC1, hwc.data_ptr<uint8_t>());
    cv::Mat out = m.clone();
    if (c == 3) {
        cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
    }
    return out;
}

void write_mat(const std::filesystem::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), m);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) {
        throw IoError("cannot write " + path.string());
    }
}

}  // namespace

torch::Tensor read_png(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("missing file: " + path.string());
    }
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) {
        throw IoError("cannot decode image: " + path.string());
    }
    double scale = 1.0;
    switch (m.depth()) {
        case CV_8U: scale = 1.0 / 255.0; break;
        case CV_16U: scale = 1.0 / 65535.0; break;
        default: throw IoError("unsupported pixel depth in " + path.string());
    }
    if (m.channels() == 4) {
        cv::cvtColor(m, m, cv::COLOR_BGRA2RGB);
    } else if (m.channels() == 3) {
        cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
    }
    cv::Mat f;
    m.convertTo(f, CV_32F, scale);
    const int c = f.channels();
    auto t = torch::from_blob(f.data, {f.rows, f.cols, c}, torch::kFloat32).clone();
    return t.permute({2, 0, 1}).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& chw) { write_mat(path, to_mat_u8(chw)); }

void write_png_u8(const std::filesystem::path& path, const torch::Tensor& hwc) {
    if (hwc.dim() != 3 || hwc.size(2) != 3 || hwc.scalar_type() != torch::kUInt8) {
        throw InvalidArgument("write_png_u8 expects an [H,W,3] uint8 tensor");
    }
    auto c = hwc.contiguous();
    cv::Mat m(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), CV_8UC3, c.data_ptr<uint8_t>());
    cv::Mat out;
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
    write_mat(path, out);
}

torch::Tensor resize_image(const torch::Tensor& chw, int64_t height, int64_t width, bool nearest) {
    if (chw.size(1) == height && chw.size(2) == width) {
        return chw.clone();
    }
    auto hwc = chw.to(torch::kFloat32).permute({1, 2, 0}).contiguous();
    const int c = static_cast<int>(hwc.size(2));
    cv::Mat m(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_32FC(c), hwc.data_ptr<float>());
    cv::Mat out;
    cv::resize(m, out, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
               nearest ? cv::INTER_NEAREST : cv::INTER_AREA);
    auto t = torch::from_blob(out.data, {height, width, c}, torch::kFloat32).clone();
    return t.permute({2, 0, 1}).contiguous();
}

torch::Tensor make_grid(const std::vector<std::vector<torch::Tensor>>& rows, int pad) {
    std::vector<torch::Tensor> row_imgs;
    for (const auto& row : rows) {
        std::vector<torch::Tensor> tiles;
        for (const auto& t : row) {
            auto tile = t.detach().to(torch::kFloat32);
            if (tile.size(0) == 1) {
                tile = tile.expand({3, tile.size(1), tile.size(2)});
            }
            if (!tiles.empty()) {
                tiles.push_back(torch::ones({3, tile.size(1), pad}));
            }
            tiles.push_back(tile);
        }
        if (!row_imgs.empty()) {
            row_imgs.push_back(torch::ones({3, pad, torch::cat(tiles, 2).size(2)}));
        }
        row_imgs.push_back(torch::cat(tiles, 2));
    }
    return torch::cat(row_imgs, 1);
}

}  // namespace ffwm
