#include "ffwm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ffwm/core.hpp"

namespace ffwm {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return d;
    } catch (const std::exception&) {
        throw InvalidArgument("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

long long to_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw InvalidArgument("config key '" + key + "': expected an integer, got '" + v + "'");
    }
    return out;
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(to_double(key, trim(item)));
    }
    return out;
}

std::string join(const std::vector<double>& v) {
    std::ostringstream os;
    os.precision(17);
    for (size_t i = 0; i < v.size(); ++i) {
        os << (i ? ", " : "") << v[i];
    }
    return os.str();
}

using Setter = std::function<void(Config&, const std::string&, const std::string&)>;

template <typename T>
Setter int_field(T Config::*member) {
    return [member](Config& c, const std::string& k, const std::string& v) {
        c.*member = static_cast<T>(to_int(k, v));
    };
}

Setter real_field(double Config::*member) {
    return [member](Config& c, const std::string& k, const std::string& v) { c.*member = to_double(k, v); };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"lambdas",
         [](Config& c, const std::string& k, const std::string& v) {
             const auto l = to_list(k, v);
             if (l.size() != 5) {
                 throw InvalidArgument("config key 'lambdas' needs exactly 5 values");
             }
             std::copy(l.begin(), l.end(), c.lambdas.begin());
         }},
        {"lr_main", real_field(&Config::lr_main)},
        {"lr_flow", real_field(&Config::lr_flow)},
        {"batch_size", int_field(&Config::batch_size)},
        {"scales", int_field(&Config::scales)},
        {"vgg_layer_weights",
         [](Config& c, const std::string& k, const std::string& v) { c.vgg_layer_weights = to_list(k, v); }},
        {"gfilter_warmup_steps", int_field(&Config::gfilter_warmup_steps)},
        {"gfilter_eps", real_field(&Config::gfilter_eps)},
        {"gfilter_radius", int_field(&Config::gfilter_radius)},
        {"seed", int_field(&Config::seed)},
        {"resolution", int_field(&Config::resolution)},
        {"total_steps", int_field(&Config::total_steps)},
        {"adam_beta1", real_field(&Config::adam_beta1)},
        {"adam_beta2", real_field(&Config::adam_beta2)},
        {"pretrain_epochs", int_field(&Config::pretrain_epochs)},
        {"pretrain_lr", real_field(&Config::pretrain_lr)},
        {"landmark_weight", real_field(&Config::landmark_weight)},
        {"sampling_weight", real_field(&Config::sampling_weight)},
        {"flow_reg_weight", real_field(&Config::flow_reg_weight)},
        {"sampling_tap", int_field(&Config::sampling_tap)},
        {"embedder_steps", int_field(&Config::embedder_steps)},
        {"embedder_aux_identities", int_field(&Config::embedder_aux_identities)},
        {"embedder_lr", real_field(&Config::embedder_lr)},
        {"checkpoint_every", int_field(&Config::checkpoint_every)},
        {"sample_every", int_field(&Config::sample_every)},
    };
    return table;
}

}  // namespace

int Config::warmup_steps() const {
    return gfilter_warmup_steps >= 0 ? gfilter_warmup_steps : total_steps / 10;
}

int Config::guided_radius() const { return gfilter_radius > 0 ? gfilter_radius : std::max(1, resolution / 4); }

std::string Config::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "lambdas = " << join({lambdas.begin(), lambdas.end()}) << '\n'
       << "lr_main = " << lr_main << '\n'
       << "lr_flow = " << lr_flow << '\n'
       << "batch_size = " << batch_size << '\n'
       << "scales = " << scales << '\n'
       << "vgg_layer_weights = " << join(vgg_layer_weights) << '\n'
       << "gfilter_warmup_steps = " << gfilter_warmup_steps << '\n'
       << "gfilter_eps = " << gfilter_eps << '\n'
       << "gfilter_radius = " << gfilter_radius << '\n'
       << "seed = " << seed << '\n'
       << "resolution = " << resolution << '\n'
       << "total_steps = " << total_steps << '\n'
       << "adam_beta1 = " << adam_beta1 << '\n'
       << "adam_beta2 = " << adam_beta2 << '\n'
       << "pretrain_epochs = " << pretrain_epochs << '\n'
       << "pretrain_lr = " << pretrain_lr << '\n'
       << "landmark_weight = " << landmark_weight << '\n'
       << "sampling_weight = " << sampling_weight << '\n'
       << "flow_reg_weight = " << flow_reg_weight << '\n'
       << "sampling_tap = " << sampling_tap << '\n'
       << "embedder_steps = " << embedder_steps << '\n'
       << "embedder_aux_identities = " << embedder_aux_identities << '\n'
       << "embedder_lr = " << embedder_lr << '\n'
       << "checkpoint_every = " << checkpoint_every << '\n'
       << "sample_every = " << sample_every << '\n';
    return os.str();
}

void validate_config(const Config& cfg) {
    auto require = [](bool ok, const char* what) {
        if (!ok) {
            throw InvalidArgument(std::string("invalid config: ") + what);
        }
    };
    require(cfg.resolution >= 16 && cfg.resolution % 16 == 0, "resolution must be a positive multiple of 16");
    require(cfg.batch_size >= 1, "batch_size must be >= 1");
    require(cfg.scales >= 1 && cfg.resolution % (1 << (cfg.scales - 1)) == 0, "scales incompatible with resolution");
    require(cfg.vgg_layer_weights.size() == 5, "vgg_layer_weights needs 5 entries");
    require(cfg.gfilter_eps > 0.0, "gfilter_eps must be > 0");
    require(cfg.gfilter_radius >= 0, "gfilter_radius must be >= 0");
    require(cfg.lr_main > 0.0 && cfg.lr_flow > 0.0 && cfg.pretrain_lr > 0.0, "learning rates must be > 0");
    require(cfg.total_steps >= 0 && cfg.pretrain_epochs >= 0, "step counts must be >= 0");
    require(cfg.sampling_tap >= 0 && cfg.sampling_tap < 5, "sampling_tap must be in [0,5)");
    require(cfg.checkpoint_every >= 1 && cfg.sample_every >= 1, "checkpoint/sample intervals must be >= 1");
}

Config parse_config(std::string_view text) {
    Config cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        const std::string body = trim(line);
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        const auto it = setters().find(key);
        if (it == setters().end()) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        it->second(cfg, key, value);
    }
    validate_config(cfg);
    return cfg;
}

Config load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config file: " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

}  // namespace ffwm
