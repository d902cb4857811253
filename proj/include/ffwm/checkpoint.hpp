#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

#include "ffwm/config.hpp"

namespace ffwm {

inline constexpr int64_t kCheckpointVersion = 1;

/// Collects named modules, optimizers and raw tensors into one versioned
/// archive. `commit` writes to a temporary file and renames it into place, so
/// an interrupted write never replaces a valid checkpoint.
class CheckpointWriter {
public:
    void add_module(const std::string& name, const torch::nn::Module& module);
    void add_optimizer(const std::string& name, const torch::optim::Optimizer& optimizer);
    void add_tensor(const std::string& name, const torch::Tensor& tensor);
    void set_config(const Config& cfg) { config_text_ = cfg.to_text(); }
    void set_step(int64_t step) { step_ = step; }

    void commit(const std::filesystem::path& path);

private:
    torch::serialize::OutputArchive archive_;
    std::string manifest_;
    std::string config_text_;
    int64_t step_ = 0;
};

class CheckpointReader {
public:
    /// Throws IoError when the file is missing, unreadable or of another version.
    explicit CheckpointReader(const std::filesystem::path& path);

    /// Loads parameters and buffers after checking every name and shape
    /// against the stored manifest (InvalidArgument on mismatch).
    void load_module(const std::string& name, torch::nn::Module& module);
    void load_optimizer(const std::string& name, torch::optim::Optimizer& optimizer);
    torch::Tensor tensor(const std::string& name);
    /// True if a module, optimizer or tensor of that name was stored.
    bool has(const std::string& name);

    const Config& config() const { return config_; }
    int64_t step() const { return step_; }

private:
    std::filesystem::path path_;
    torch::serialize::InputArchive archive_;
    std::map<std::string, std::string> shapes_;  // "module/param" -> "d0xd1..."
    Config config_;
    int64_t step_ = 0;
};

}  // namespace ffwm
