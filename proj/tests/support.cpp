#include "support.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace ffwm::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("ffwm_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_command(const std::string& command, const fs::path& log) {
    std::string cmd = command;
    if (!log.empty()) {
        cmd += " > '" + log.string() + "' 2>&1";
    } else {
        cmd += " > /dev/null 2>&1";
    }
    const int status = std::system(cmd.c_str());
    if (status == -1) {
        return -1;
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

namespace {

double bilinear(const torch::TensorAccessor<double, 2>& plane, int64_t h, int64_t w, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<int64_t>(std::floor(x));
    const auto y0 = static_cast<int64_t>(std::floor(y));
    const auto x1 = std::min(x0 + 1, w - 1);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    return plane[y0][x0] * (1 - fx) * (1 - fy) + plane[y0][x1] * fx * (1 - fy) + plane[y1][x0] * (1 - fx) * fy +
           plane[y1][x1] * fx * fy;
}

}  // namespace

torch::Tensor warp_oracle(const torch::Tensor& src, const torch::Tensor& flow) {
    const auto s = src.to(torch::kFloat64).contiguous();
    const auto f = flow.to(torch::kFloat64).contiguous();
    const int64_t c = s.size(0), h = s.size(1), w = s.size(2);
    auto out = torch::zeros({c, h, w}, torch::kFloat64);
    auto sa = s.accessor<double, 3>();
    auto fa = f.accessor<double, 3>();
    auto oa = out.accessor<double, 3>();
    for (int64_t k = 0; k < c; ++k) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                oa[k][y][x] = bilinear(sa[k], h, w, static_cast<double>(x) + fa[0][y][x],
                                       static_cast<double>(y) + fa[1][y][x]);
            }
        }
    }
    return out;
}

torch::Tensor guided_filter_oracle(const torch::Tensor& input, const torch::Tensor& guide, int r, double eps) {
    const auto p = input.to(torch::kFloat64).contiguous();
    const auto g = guide.to(torch::kFloat64).contiguous();
    const int64_t c = p.size(0), h = p.size(1), w = p.size(2);
    auto out = torch::zeros({c, h, w}, torch::kFloat64);
    auto pa = p.accessor<double, 3>();
    auto ga = g.accessor<double, 3>();
    auto oa = out.accessor<double, 3>();
    auto window = [&](int64_t cy, int64_t cx, auto&& body) {
        for (int64_t y = std::max<int64_t>(0, cy - r); y <= std::min<int64_t>(h - 1, cy + r); ++y) {
            for (int64_t x = std::max<int64_t>(0, cx - r); x <= std::min<int64_t>(w - 1, cx + r); ++x) {
                body(y, x);
            }
        }
    };
    std::vector<double> a(static_cast<size_t>(h * w)), b(static_cast<size_t>(h * w));
    for (int64_t k = 0; k < c; ++k) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                double n = 0, sg = 0, sp = 0, sgp = 0, sgg = 0;
                window(y, x, [&](int64_t yy, int64_t xx) {
                    const double gv = ga[k][yy][xx];
                    const double pv = pa[k][yy][xx];
                    n += 1;
                    sg += gv;
                    sp += pv;
                    sgp += gv * pv;
                    sgg += gv * gv;
                });
                const double mg = sg / n, mp = sp / n;
                const double cov = sgp / n - mg * mp;
                const double var = sgg / n - mg * mg;
                const double ak = cov / (var + eps);
                a[static_cast<size_t>(y * w + x)] = ak;
                b[static_cast<size_t>(y * w + x)] = mp - ak * mg;
            }
        }
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                double n = 0, sa = 0, sb = 0;
                window(y, x, [&](int64_t yy, int64_t xx) {
                    n += 1;
                    sa += a[static_cast<size_t>(yy * w + xx)];
                    sb += b[static_cast<size_t>(yy * w + xx)];
                });
                oa[k][y][x] = sa / n * ga[k][y][x] + sb / n;
            }
        }
    }
    return out;
}

double masked_l1_oracle(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask, int scales) {
    const auto A = a.to(torch::kFloat64).contiguous();
    const auto B = b.to(torch::kFloat64).contiguous();
    const auto M = mask.to(torch::kFloat64).contiguous();
    auto aa = A.accessor<double, 4>();
    auto ba = B.accessor<double, 4>();
    auto ma = M.accessor<double, 4>();
    const int64_t n = A.size(0), c = A.size(1), h = A.size(2), w = A.size(3);
    double total = 0.0;
    for (int s = 0; s < scales; ++s) {
        const int64_t f = int64_t{1} << s;
        const int64_t hs = h / f, ws = w / f;
        double diff = 0.0, mass = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t y = 0; y < hs; ++y) {
                for (int64_t x = 0; x < ws; ++x) {
                    double pm = 0.0;
                    std::vector<double> pa(static_cast<size_t>(c), 0.0), pb(static_cast<size_t>(c), 0.0);
                    for (int64_t dy = 0; dy < f; ++dy) {
                        for (int64_t dx = 0; dx < f; ++dx) {
                            const double m = ma[i][0][y * f + dy][x * f + dx];
                            pm += m;
                            for (int64_t k = 0; k < c; ++k) {
                                pa[static_cast<size_t>(k)] += aa[i][k][y * f + dy][x * f + dx] * m;
                                pb[static_cast<size_t>(k)] += ba[i][k][y * f + dy][x * f + dx] * m;
                            }
                        }
                    }
                    const double area = static_cast<double>(f * f);
                    mass += pm / area;
                    for (int64_t k = 0; k < c; ++k) {
                        diff += std::abs(pa[static_cast<size_t>(k)] - pb[static_cast<size_t>(k)]) / area;
                    }
                }
            }
        }
        total += diff / (static_cast<double>(c) * mass);
    }
    return total;
}

double landmark_loss_oracle(const torch::Tensor& flow, const LandmarkSet& src, const LandmarkSet& dst) {
    const auto f = flow.to(torch::kFloat64).contiguous();
    auto fa = f.accessor<double, 3>();
    const int64_t h = f.size(1), w = f.size(2);
    double sum = 0.0;
    for (size_t k = 0; k < dst.size(); ++k) {
        const double fx = bilinear(fa[0], h, w, dst[k].x, dst[k].y);
        const double fy = bilinear(fa[1], h, w, dst[k].x, dst[k].y);
        sum += std::hypot(fx - (src[k].x - dst[k].x), fy - (src[k].y - dst[k].y));
    }
    return sum / static_cast<double>(dst.size());
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    auto f = [&](double n) {
        const double k = std::fmod(n + h / 60.0, 6.0);
        return v - v * s * std::max(0.0, std::min({k, 4.0 - k, 1.0}));
    };
    return {f(5.0), f(3.0), f(1.0)};
}

}  // namespace ffwm::testing
