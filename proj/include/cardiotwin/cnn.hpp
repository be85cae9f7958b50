#pragma once

// Miniature compound-scaled convolutional classifier.
//
// Layout: stem conv 3x3 -> stages of depthwise-separable blocks
// (depthwise kxk + SiLU, pointwise 1x1 + SiLU, identity skip when the block
// keeps its shape) -> global average pool -> 2-way linear head.
// Depth, width and input resolution scale as alpha^phi, beta^phi, gamma^phi.

#include "cardiotwin/tensor.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cardiotwin::cnn {

inline constexpr std::size_t kMinResolution = 8;
inline constexpr std::size_t kClassCount = 2;

struct StageSpec {
    std::size_t repeats = 1;
    std::size_t width = 8;
    std::size_t kernel = 3;
    std::size_t stride = 1;

    bool operator==(const StageSpec&) const = default;
};

struct ScalingCoefficients {
    double alpha = 1.2;  // depth
    double beta = 1.1;   // width
    double gamma = 1.15; // resolution

    bool operator==(const ScalingCoefficients&) const = default;
};

struct BaseNetwork {
    std::size_t input_channels = 4;
    std::size_t resolution = 16;
    std::size_t stem_width = 8;
    std::vector<StageSpec> stages{{1, 8, 3, 1}, {2, 16, 3, 2}, {2, 24, 3, 2}};

    bool operator==(const BaseNetwork&) const = default;
};

struct ScalingConfig {
    double phi = 0.0;
    ScalingCoefficients coeffs;
    BaseNetwork base;

    // Resolved.
    double depth_multiplier = 1.0;
    double width_multiplier = 1.0;
    double resolution_multiplier = 1.0;
    double constraint = 0.0;  // alpha * beta^2 * gamma^2
    std::size_t stem_width = 0;
    std::vector<StageSpec> stages;
    std::size_t resolution = 0;
    std::vector<std::string> warnings;
};

// Errc::config for negative phi, non-positive coefficients, or a base whose
// widths are not multiples of 4 / resolution not even.
ScalingConfig compound_scale(double phi, const ScalingCoefficients& coeffs, const BaseNetwork& base = {});

std::size_t round_width(double width) noexcept;
std::size_t round_resolution(double resolution) noexcept;

nlohmann::json to_json(const ScalingConfig& config);
ScalingConfig scaling_from_json(const nlohmann::json& j);

class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string_view kind() const noexcept = 0;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual std::size_t param_count() const noexcept { return 0; }
    virtual std::uint64_t macs(const Shape& /*in*/) const noexcept { return 0; }
    virtual void init(std::span<double> /*params*/, std::mt19937_64& /*rng*/) const {}

    virtual Tensor forward(const Tensor& in, std::span<const double> params) const = 0;
    // Accumulates into grad_params and returns the gradient w.r.t. `in`.
    virtual Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                            std::span<double> grad_params) const = 0;
};

// Full convolution with "same" padding (k odd); weights [out][in][k][k], then bias[out].
class Conv2d final : public Layer {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride);

    std::string_view kind() const noexcept override { return "conv"; }
    Shape output_shape(const Shape& in) const override;
    std::size_t param_count() const noexcept override;
    std::uint64_t macs(const Shape& in) const noexcept override;
    void init(std::span<double> params, std::mt19937_64& rng) const override;
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;

private:
    std::size_t in_, out_, k_, stride_;
};

// Per-channel convolution; weights [c][k][k], then bias[c].
class DepthwiseConv2d final : public Layer {
public:
    DepthwiseConv2d(std::size_t channels, std::size_t kernel, std::size_t stride);

    std::string_view kind() const noexcept override { return "depthwise_conv"; }
    Shape output_shape(const Shape& in) const override;
    std::size_t param_count() const noexcept override;
    std::uint64_t macs(const Shape& in) const noexcept override;
    void init(std::span<double> params, std::mt19937_64& rng) const override;
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;

private:
    std::size_t c_, k_, stride_;
};

class SiLU final : public Layer {
public:
    std::string_view kind() const noexcept override { return "silu"; }
    Shape output_shape(const Shape& in) const override { return in; }
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;
};

class GlobalAvgPool final : public Layer {
public:
    std::string_view kind() const noexcept override { return "pool"; }
    Shape output_shape(const Shape& in) const override { return {in.channels, 1, 1}; }
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;
};

// Dense layer over the flattened input; weights [out][in], then bias[out].
class Linear final : public Layer {
public:
    Linear(std::size_t in_features, std::size_t out_features);

    std::string_view kind() const noexcept override { return "linear"; }
    Shape output_shape(const Shape& in) const override;
    std::size_t param_count() const noexcept override;
    std::uint64_t macs(const Shape& in) const noexcept override;
    void init(std::span<double> params, std::mt19937_64& rng) const override;
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;

private:
    std::size_t in_, out_;
};

// A sequence of layers with an optional identity skip around it.
class Block final : public Layer {
public:
    Block(std::vector<std::unique_ptr<Layer>> body, bool skip);

    std::string_view kind() const noexcept override { return "block"; }
    Shape output_shape(const Shape& in) const override;
    std::size_t param_count() const noexcept override;
    std::uint64_t macs(const Shape& in) const noexcept override;
    void init(std::span<double> params, std::mt19937_64& rng) const override;
    Tensor forward(const Tensor& in, std::span<const double> params) const override;
    Tensor backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                    std::span<double> grad_params) const override;

    bool has_skip() const noexcept { return skip_; }

private:
    std::vector<std::unique_ptr<Layer>> body_;
    std::vector<std::size_t> offsets_;
    bool skip_;
};

// Layer graph resolved from a ScalingConfig; immutable and shareable.
class Architecture {
public:
    explicit Architecture(const ScalingConfig& config);

    Shape input_shape() const noexcept { return input_; }
    std::size_t param_count() const noexcept { return param_count_; }
    std::uint64_t macs() const noexcept { return macs_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_.at(i); }

    void init(std::span<double> params, std::uint64_t seed) const;
    std::array<double, kClassCount> logits(const Tensor& image, std::span<const double> params) const;
    // Cross-entropy of one example; accumulates d(loss)/d(params) into grad.
    double loss_and_gradient(const Tensor& image, int label, std::span<const double> params,
                             std::span<double> grad) const;

private:
    void check_input(const Tensor& image) const;

    Shape input_;
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<std::size_t> offsets_;
    std::size_t param_count_ = 0;
    std::uint64_t macs_ = 0;
};

// Exact multiply-accumulate count of one forward pass.
std::uint64_t count_macs(const ScalingConfig& config);

struct NetParams {
    ScalingConfig config;
    std::shared_ptr<const Architecture> arch;
    std::vector<double> weights;  // flat, in layer order
    std::uint64_t seed = 0;
    std::uint64_t version = 0;

    std::size_t param_count() const noexcept { return weights.size(); }
    std::uint64_t checksum() const noexcept;
};

// Errc::config when the resolved resolution is below kMinResolution.
NetParams build_net(const ScalingConfig& config, std::uint64_t seed);

enum class PredictionSource { model, fused };

std::string_view to_string(PredictionSource source) noexcept;

struct RiskPrediction {
    std::string patient_id;
    std::int64_t t_ms = 0;
    double p_arrest = 0.5;
    bool decision = false;
    PredictionSource source = PredictionSource::model;
    std::uint64_t model_version = 0;
};

std::array<double, kClassCount> softmax(const std::array<double, kClassCount>& logits) noexcept;

// Probability of the arrest class (index 1). Errc::shape on a size mismatch,
// Errc::numeric when the logits overflow.
double predict_proba(const NetParams& params, const Tensor& image);

RiskPrediction forward(const NetParams& params, const Tensor& image, std::string patient_id = {},
                       std::int64_t t_ms = 0, double threshold = 0.5);

struct Example {
    Tensor image;
    int label = 0;
};

// Mean cross-entropy over the batch and its gradient.
double batch_gradient(const NetParams& params, std::span<const Example> batch, std::vector<double>& grad);
double batch_loss(const NetParams& params, std::span<const Example> batch);

struct FineTuneResult {
    NetParams params;
    double loss = 0.0;  // before the step
};

// One SGD step on mean cross-entropy, the gradient capped at clip_norm in
// global L2 norm (0 disables). Errc::numeric (params unchanged) on a
// non-finite loss or gradient; Errc::validation on an empty batch or non-binary label.
FineTuneResult fine_tune(const NetParams& params, std::span<const Example> batch, double lr, double clip_norm = 1.0);

struct TrainBudget {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    double lr = 0.05;
    double clip_norm = 1.0;  // global gradient-norm cap per step; 0 disables
    std::uint64_t seed = 0;
};

// Minibatch SGD over shuffled epochs. Returns the mean loss of the last epoch.
double train(NetParams& params, std::span<const Example> data, const TrainBudget& budget);

// Little-endian params file: "CTNN", u32 version, u32 header length, JSON
// header (scaling config, seed, param count, model version), then one f32
// per parameter in layer order.
void save_params(const NetParams& params, const std::filesystem::path& path);
NetParams load_params(const std::filesystem::path& path);
std::string serialize_params(const NetParams& params);
NetParams deserialize_params(std::string_view bytes);

// Versioned holder for the live model. Readers take snapshots; fine-tuning
// is exclusive and publishes a new version.
class ModelStore {
public:
    explicit ModelStore(NetParams params);

    std::shared_ptr<const NetParams> snapshot() const;
    std::uint64_t version() const;

    FineTuneResult tune(std::span<const Example> batch, double lr, double clip_norm = 1.0);
    void replace(NetParams params);

private:
    mutable std::mutex mutex_;
    std::mutex tune_mutex_;
    std::shared_ptr<const NetParams> current_;
};

}  // namespace cardiotwin::cnn
