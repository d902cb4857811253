#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

namespace ffwm {

/// Single-image flow estimator (3 input channels). Four stride-2 encoder levels,
/// then a decoder that predicts flow at 1/16 resolution and refines it at every
/// x2 upsampling step up to full resolution. Output is [N,2,H,W] in pixels.
class FlowEstimatorImpl : public torch::nn::Module {
public:
    explicit FlowEstimatorImpl(int resolution);

    torch::Tensor forward(const torch::Tensor& image);

    int resolution() const { return resolution_; }

private:
    int resolution_;
    torch::nn::Conv2d stem_{nullptr};
    std::vector<torch::nn::Sequential> enc_;
    torch::nn::Linear context_{nullptr};
    std::vector<torch::nn::Conv2d> up_;
    std::vector<torch::nn::Sequential> dec_;
    std::vector<torch::nn::Conv2d> predict_;
};
TORCH_MODULE(FlowEstimator);

/// conv - BN - ReLU - conv - BN, added to the input, then ReLU.
class ResidualBlockImpl : public torch::nn::Module {
public:
    explicit ResidualBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct WarpAttentionOutput {
    torch::Tensor features;   // A * (f_w ++ hflip(f_w)), 2C channels
    torch::Tensor attention;  // A, same shape as features
};

/// Warp attention on one skip connection: warps encoder features with the
/// forward flow, concatenates their horizontal flip, and gates the result with
/// a sigmoid attention map from Conv-BN-ReLU-ResidualBlock.
class WarpAttentionImpl : public torch::nn::Module {
public:
    explicit WarpAttentionImpl(int64_t channels);

    /// `flow` must already match f's spatial size (see resize_flow).
    WarpAttentionOutput forward(const torch::Tensor& features, const torch::Tensor& flow);

    /// Replaces the learned gate with a constant (diagnostics and tests).
    void set_attention_override(std::optional<double> value) { override_ = value; }

private:
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::BatchNorm2d bn_{nullptr};
    ResidualBlock res_{nullptr};
    std::optional<double> override_;
};
TORCH_MODULE(WarpAttention);

struct GeneratorOutput {
    torch::Tensor image;                   // [N,3,H,W] in [0,1]
    std::vector<torch::Tensor> attention;  // one map per WAM level, shallow to deep
};

/// U-Net generator. The three deepest skip connections pass through warp
/// attention driven by the forward flow; the shallowest one is a plain skip.
class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(int resolution);

    GeneratorOutput forward(const torch::Tensor& profile, const torch::Tensor& forward_flow);

    int resolution() const { return resolution_; }
    std::vector<WarpAttention>& attention_modules() { return wam_; }

private:
    int resolution_;
    std::vector<torch::nn::Sequential> enc_;
    std::vector<WarpAttention> wam_;
    std::vector<torch::nn::Conv2d> up_;
    std::vector<torch::nn::Sequential> dec_;
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Generator);

/// Two patch critics, on the input and on its 2x average-pooled copy.
/// Each returns a logit map (at 1/4 of its own input resolution).
class DiscriminatorImpl : public torch::nn::Module {
public:
    DiscriminatorImpl();

    std::vector<torch::Tensor> forward(const torch::Tensor& image);

private:
    torch::nn::Sequential full_{nullptr}, half_{nullptr};
};
TORCH_MODULE(Discriminator);

struct Embedding {
    torch::Tensor pool;  // [N, kPoolDim], L2 normalized
    torch::Tensor fc2;   // [N, kFc2Dim], L2 normalized
};

/// Identity embedding network (recognition-network stand-in).
class EmbedderImpl : public torch::nn::Module {
public:
    static constexpr int64_t kPoolDim = 96;
    static constexpr int64_t kFc2Dim = 64;

    EmbedderImpl();

    Embedding forward(const torch::Tensor& image);

    /// Unnormalized fc2 activations, for the classification head during training.
    torch::Tensor raw_fc2(const torch::Tensor& image);

private:
    std::pair<torch::Tensor, torch::Tensor> features(const torch::Tensor& image);

    torch::nn::Sequential body_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(Embedder);

int64_t count_parameters(const torch::nn::Module& module);

/// Freezes a module: eval mode and requires_grad(false) on every parameter.
void freeze(torch::nn::Module& module);

}  // namespace ffwm
