#include "ffwm/checkpoint.hpp"

#include <sstream>

#include "ffwm/core.hpp"

namespace ffwm {

namespace {

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream os;
    for (int64_t d = 0; d < t.dim(); ++d) {
        os << (d ? "x" : "") << t.size(d);
    }
    return os.str();
}

std::map<std::string, std::string> parse_manifest(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto sep = line.find(' ');
        if (sep != std::string::npos) {
            out[line.substr(0, sep)] = line.substr(sep + 1);
        }
    }
    return out;
}

}  // namespace

void CheckpointWriter::add_module(const std::string& name, const torch::nn::Module& module) {
    torch::serialize::OutputArchive sub;
    module.save(sub);
    archive_.write("module." + name, sub);
    for (const auto& p : module.named_parameters()) {
        manifest_ += name + "/" + p.key() + " " + shape_string(p.value()) + "\n";
    }
    for (const auto& b : module.named_buffers()) {
        manifest_ += name + "/" + b.key() + " " + shape_string(b.value()) + "\n";
    }
}

void CheckpointWriter::add_optimizer(const std::string& name, const torch::optim::Optimizer& optimizer) {
    torch::serialize::OutputArchive sub;
    optimizer.save(sub);
    archive_.write("optim." + name, sub);
}

void CheckpointWriter::add_tensor(const std::string& name, const torch::Tensor& tensor) {
    archive_.write("tensor." + name, tensor);
}

void CheckpointWriter::commit(const std::filesystem::path& path) {
    archive_.write("format", c10::IValue(std::string("ffwm-checkpoint")));
    archive_.write("version", c10::IValue(kCheckpointVersion));
    archive_.write("step", c10::IValue(step_));
    archive_.write("config", c10::IValue(config_text_));
    archive_.write("manifest", c10::IValue(manifest_));
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    try {
        archive_.save_to(tmp.string());
        std::filesystem::rename(tmp, path);
    } catch (const std::exception& e) {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        throw IoError("failed to write checkpoint " + path.string() + ": " + e.what());
    }
}

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : path_(path) {
    if (!std::filesystem::is_regular_file(path)) {
        throw IoError("checkpoint not found: " + path.string());
    }
    try {
        archive_.load_from(path.string());
    } catch (const std::exception& e) {
        throw IoError("unreadable checkpoint " + path.string() + ": " + e.what());
    }
    c10::IValue v;
    if (!archive_.try_read("format", v) || !v.isString() || v.toStringRef() != "ffwm-checkpoint") {
        throw IoError("not an ffwm checkpoint: " + path.string());
    }
    archive_.read("version", v);
    if (v.toInt() != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(v.toInt()) + " in " + path.string());
    }
    archive_.read("step", v);
    step_ = v.toInt();
    archive_.read("config", v);
    config_ = parse_config(v.toStringRef());
    archive_.read("manifest", v);
    shapes_ = parse_manifest(v.toStringRef());
}

void CheckpointReader::load_module(const std::string& name, torch::nn::Module& module) {
    auto check = [&](const std::string& key, const torch::Tensor& t) {
        const auto it = shapes_.find(name + "/" + key);
        if (it == shapes_.end()) {
            throw InvalidArgument("checkpoint " + path_.string() + " lacks " + name + "/" + key);
        }
        if (it->second != shape_string(t)) {
            throw InvalidArgument("checkpoint shape mismatch for " + name + "/" + key + ": stored " + it->second +
                                  ", expected " + shape_string(t));
        }
    };
    for (const auto& p : module.named_parameters()) {
        check(p.key(), p.value());
    }
    for (const auto& b : module.named_buffers()) {
        check(b.key(), b.value());
    }
    torch::serialize::InputArchive sub;
    if (!archive_.try_read("module." + name, sub)) {
        throw InvalidArgument("checkpoint " + path_.string() + " has no module '" + name + "'");
    }
    module.load(sub);
}

void CheckpointReader::load_optimizer(const std::string& name, torch::optim::Optimizer& optimizer) {
    torch::serialize::InputArchive sub;
    if (!archive_.try_read("optim." + name, sub)) {
        throw InvalidArgument("checkpoint " + path_.string() + " has no optimizer '" + name + "'");
    }
    optimizer.load(sub);
}

torch::Tensor CheckpointReader::tensor(const std::string& name) {
    torch::Tensor t;
    if (!archive_.try_read("tensor." + name, t)) {
        throw InvalidArgument("checkpoint " + path_.string() + " has no tensor '" + name + "'");
    }
    return t;
}

bool CheckpointReader::has(const std::string& name) {
    torch::serialize::InputArchive sub;
    torch::Tensor t;
    return archive_.try_read("module." + name, sub) || archive_.try_read("optim." + name, sub) ||
           archive_.try_read("tensor." + name, t);
}

}  // namespace ffwm
