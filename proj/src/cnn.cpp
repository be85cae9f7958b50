#include "cardiotwin/cnn.hpp"

#include "cardiotwin/error.hpp"
#include "cardiotwin/util.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace cardiotwin::cnn {

// ---------------------------------------------------------------------------
// Compound scaling

std::size_t round_width(double width) noexcept {
    const auto v = static_cast<std::size_t>(std::floor(width / 4.0 + 0.5)) * 4;
    return std::max<std::size_t>(4, v);
}

std::size_t round_resolution(double resolution) noexcept {
    auto v = static_cast<std::size_t>(std::floor(resolution + 0.5));
    if (v % 2 != 0) ++v;
    return v;
}

ScalingConfig compound_scale(double phi, const ScalingCoefficients& coeffs, const BaseNetwork& base) {
    if (!(phi >= 0.0) || !std::isfinite(phi)) fail(Errc::config, "phi must be a finite non-negative number");
    for (double c : {coeffs.alpha, coeffs.beta, coeffs.gamma}) {
        if (!(c > 0.0) || !std::isfinite(c)) fail(Errc::config, "scaling coefficients must be positive");
    }
    if (base.stages.empty()) fail(Errc::config, "base network has no stages");
    if (base.input_channels == 0) fail(Errc::config, "base network needs at least one input channel");
    if (base.resolution == 0 || base.resolution % 2 != 0) fail(Errc::config, "base resolution must be even");
    if (base.stem_width == 0 || base.stem_width % 4 != 0) fail(Errc::config, "base stem width must be a multiple of 4");
    for (const auto& s : base.stages) {
        if (s.repeats == 0) fail(Errc::config, "stage repeat count must be positive");
        if (s.width == 0 || s.width % 4 != 0) fail(Errc::config, "stage width must be a multiple of 4");
        if (s.kernel % 2 == 0) fail(Errc::config, "kernel size must be odd");
        if (s.stride == 0) fail(Errc::config, "stride must be positive");
    }

    ScalingConfig cfg;
    cfg.phi = phi;
    cfg.coeffs = coeffs;
    cfg.base = base;
    cfg.depth_multiplier = std::pow(coeffs.alpha, phi);
    cfg.width_multiplier = std::pow(coeffs.beta, phi);
    cfg.resolution_multiplier = std::pow(coeffs.gamma, phi);
    cfg.constraint = coeffs.alpha * coeffs.beta * coeffs.beta * coeffs.gamma * coeffs.gamma;

    cfg.stem_width = round_width(static_cast<double>(base.stem_width) * cfg.width_multiplier);
    for (const auto& s : base.stages) {
        StageSpec r = s;
        // The epsilon keeps exact products such as 2 * 1.0 from ceiling upward.
        r.repeats = static_cast<std::size_t>(std::ceil(static_cast<double>(s.repeats) * cfg.depth_multiplier - 1e-9));
        r.width = round_width(static_cast<double>(s.width) * cfg.width_multiplier);
        cfg.stages.push_back(r);
    }
    cfg.resolution = round_resolution(static_cast<double>(base.resolution) * cfg.resolution_multiplier);

    if (cfg.constraint < 1.8 || cfg.constraint > 2.2) {
        std::ostringstream msg;
        msg << "alpha*beta^2*gamma^2 = " << cfg.constraint << " is outside [1.8, 2.2]";
        cfg.warnings.push_back(msg.str());
    }
    for (double c : {coeffs.alpha, coeffs.beta, coeffs.gamma}) {
        if (c < 1.0) {
            cfg.warnings.push_back("scaling coefficient below 1 shrinks the network as phi grows");
            break;
        }
    }
    return cfg;
}

nlohmann::json to_json(const ScalingConfig& config) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : config.base.stages) stages.push_back({s.repeats, s.width, s.kernel, s.stride});
    nlohmann::json resolved_stages = nlohmann::json::array();
    for (const auto& s : config.stages) resolved_stages.push_back({s.repeats, s.width, s.kernel, s.stride});
    return {
        {"phi", config.phi},
        {"alpha", config.coeffs.alpha},
        {"beta", config.coeffs.beta},
        {"gamma", config.coeffs.gamma},
        {"base",
         {{"input_channels", config.base.input_channels},
          {"resolution", config.base.resolution},
          {"stem_width", config.base.stem_width},
          {"stages", stages}}},
        {"resolved",
         {{"depth_multiplier", config.depth_multiplier},
          {"width_multiplier", config.width_multiplier},
          {"resolution_multiplier", config.resolution_multiplier},
          {"constraint", config.constraint},
          {"stem_width", config.stem_width},
          {"resolution", config.resolution},
          {"stages", resolved_stages}}},
        {"warnings", config.warnings},
    };
}

ScalingConfig scaling_from_json(const nlohmann::json& j) {
    try {
        ScalingCoefficients coeffs;
        coeffs.alpha = j.value("alpha", coeffs.alpha);
        coeffs.beta = j.value("beta", coeffs.beta);
        coeffs.gamma = j.value("gamma", coeffs.gamma);
        BaseNetwork base;
        if (auto b = j.find("base"); b != j.end()) {
            base.input_channels = b->value("input_channels", base.input_channels);
            base.resolution = b->value("resolution", base.resolution);
            base.stem_width = b->value("stem_width", base.stem_width);
            if (auto st = b->find("stages"); st != b->end()) {
                base.stages.clear();
                for (const auto& s : *st) {
                    base.stages.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(),
                                           s.at(2).get<std::size_t>(), s.at(3).get<std::size_t>()});
                }
            }
        }
        return compound_scale(j.value("phi", 0.0), coeffs, base);
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::config, std::string("scaling config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Layers

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride) {
    const std::size_t pad = k / 2;
    return (in + 2 * pad - k) / stride + 1;
}

void fill_normal(std::span<double> w, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : w) v = dist(rng);
}

double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride)
    : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride) {}

Shape Conv2d::output_shape(const Shape& in) const {
    if (in.channels != in_) fail(Errc::shape, "conv expects " + std::to_string(in_) + " input channels");
    return {out_, conv_out(in.height, k_, stride_), conv_out(in.width, k_, stride_)};
}

std::size_t Conv2d::param_count() const noexcept { return out_ * in_ * k_ * k_ + out_; }

std::uint64_t Conv2d::macs(const Shape& in) const noexcept {
    return static_cast<std::uint64_t>(conv_out(in.height, k_, stride_)) * conv_out(in.width, k_, stride_) * out_ *
           in_ * k_ * k_;
}

void Conv2d::init(std::span<double> params, std::mt19937_64& rng) const {
    fill_normal(params.first(out_ * in_ * k_ * k_), std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_)), rng);
    std::ranges::fill(params.subspan(out_ * in_ * k_ * k_), 0.0);
}

Tensor Conv2d::forward(const Tensor& in, std::span<const double> params) const {
    const Shape os = output_shape(in.shape());
    const Shape is = in.shape();
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    const double* w = params.data();
    const double* b = params.data() + out_ * in_ * k_ * k_;
    Tensor out(os);
    for (std::size_t co = 0; co < out_; ++co) {
        for (std::size_t oy = 0; oy < os.height; ++oy) {
            for (std::size_t ox = 0; ox < os.width; ++ox) out.at(co, oy, ox) = b[co];
        }
        for (std::size_t ci = 0; ci < in_; ++ci) {
            for (std::size_t ky = 0; ky < k_; ++ky) {
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    const double wv = w[((co * in_ + ci) * k_ + ky) * k_ + kx];
                    for (std::size_t oy = 0; oy < os.height; ++oy) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                        for (std::size_t ox = 0; ox < os.width; ++ox) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                            out.at(co, oy, ox) += wv * in.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor Conv2d::backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                        std::span<double> grad_params) const {
    const Shape is = in.shape();
    const Shape os = grad_out.shape();
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    const double* w = params.data();
    double* gw = grad_params.data();
    double* gb = grad_params.data() + out_ * in_ * k_ * k_;
    Tensor grad_in(is);
    for (std::size_t co = 0; co < out_; ++co) {
        for (std::size_t oy = 0; oy < os.height; ++oy) {
            for (std::size_t ox = 0; ox < os.width; ++ox) gb[co] += grad_out.at(co, oy, ox);
        }
        for (std::size_t ci = 0; ci < in_; ++ci) {
            for (std::size_t ky = 0; ky < k_; ++ky) {
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    const std::size_t wi = ((co * in_ + ci) * k_ + ky) * k_ + kx;
                    const double wv = w[wi];
                    double acc = 0.0;
                    for (std::size_t oy = 0; oy < os.height; ++oy) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                        for (std::size_t ox = 0; ox < os.width; ++ox) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - pad;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                            const double g = grad_out.at(co, oy, ox);
                            const auto uy = static_cast<std::size_t>(iy);
                            const auto ux = static_cast<std::size_t>(ix);
                            acc += g * in.at(ci, uy, ux);
                            grad_in.at(ci, uy, ux) += g * wv;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    return grad_in;
}

DepthwiseConv2d::DepthwiseConv2d(std::size_t channels, std::size_t kernel, std::size_t stride)
    : c_(channels), k_(kernel), stride_(stride) {}

Shape DepthwiseConv2d::output_shape(const Shape& in) const {
    if (in.channels != c_) fail(Errc::shape, "depthwise conv expects " + std::to_string(c_) + " channels");
    return {c_, conv_out(in.height, k_, stride_), conv_out(in.width, k_, stride_)};
}

std::size_t DepthwiseConv2d::param_count() const noexcept { return c_ * k_ * k_ + c_; }

std::uint64_t DepthwiseConv2d::macs(const Shape& in) const noexcept {
    return static_cast<std::uint64_t>(conv_out(in.height, k_, stride_)) * conv_out(in.width, k_, stride_) * c_ * k_ *
           k_;
}

void DepthwiseConv2d::init(std::span<double> params, std::mt19937_64& rng) const {
    fill_normal(params.first(c_ * k_ * k_), std::sqrt(2.0 / static_cast<double>(k_ * k_)), rng);
    std::ranges::fill(params.subspan(c_ * k_ * k_), 0.0);
}

Tensor DepthwiseConv2d::forward(const Tensor& in, std::span<const double> params) const {
    const Shape os = output_shape(in.shape());
    const Shape is = in.shape();
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    Tensor out(os);
    for (std::size_t c = 0; c < c_; ++c) {
        const double* w = params.data() + c * k_ * k_;
        const double b = params[c_ * k_ * k_ + c];
        for (std::size_t oy = 0; oy < os.height; ++oy) {
            for (std::size_t ox = 0; ox < os.width; ++ox) {
                double acc = b;
                for (std::size_t ky = 0; ky < k_; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                    for (std::size_t kx = 0; kx < k_; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                        acc += w[ky * k_ + kx] * in.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                    }
                }
                out.at(c, oy, ox) = acc;
            }
        }
    }
    return out;
}

Tensor DepthwiseConv2d::backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                                 std::span<double> grad_params) const {
    const Shape is = in.shape();
    const Shape os = grad_out.shape();
    const auto pad = static_cast<std::ptrdiff_t>(k_ / 2);
    Tensor grad_in(is);
    for (std::size_t c = 0; c < c_; ++c) {
        const double* w = params.data() + c * k_ * k_;
        double* gw = grad_params.data() + c * k_ * k_;
        double& gb = grad_params[c_ * k_ * k_ + c];
        for (std::size_t oy = 0; oy < os.height; ++oy) {
            for (std::size_t ox = 0; ox < os.width; ++ox) {
                const double g = grad_out.at(c, oy, ox);
                gb += g;
                for (std::size_t ky = 0; ky < k_; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.height)) continue;
                    for (std::size_t kx = 0; kx < k_; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.width)) continue;
                        const auto uy = static_cast<std::size_t>(iy);
                        const auto ux = static_cast<std::size_t>(ix);
                        gw[ky * k_ + kx] += g * in.at(c, uy, ux);
                        grad_in.at(c, uy, ux) += g * w[ky * k_ + kx];
                    }
                }
            }
        }
    }
    return grad_in;
}

Tensor SiLU::forward(const Tensor& in, std::span<const double>) const {
    Tensor out(in.shape());
    auto src = in.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * sigmoid(src[i]);
    return out;
}

Tensor SiLU::backward(const Tensor& in, const Tensor& grad_out, std::span<const double>, std::span<double>) const {
    Tensor grad_in(in.shape());
    auto x = in.data();
    auto g = grad_out.data();
    auto dst = grad_in.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dst[i] = g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
    return grad_in;
}

Tensor GlobalAvgPool::forward(const Tensor& in, std::span<const double>) const {
    const Shape is = in.shape();
    Tensor out(output_shape(is));
    const double inv = 1.0 / static_cast<double>(is.height * is.width);
    for (std::size_t c = 0; c < is.channels; ++c) {
        double acc = 0.0;
        for (std::size_t y = 0; y < is.height; ++y) {
            for (std::size_t x = 0; x < is.width; ++x) acc += in.at(c, y, x);
        }
        out.at(c, 0, 0) = acc * inv;
    }
    return out;
}

Tensor GlobalAvgPool::backward(const Tensor& in, const Tensor& grad_out, std::span<const double>,
                               std::span<double>) const {
    const Shape is = in.shape();
    Tensor grad_in(is);
    const double inv = 1.0 / static_cast<double>(is.height * is.width);
    for (std::size_t c = 0; c < is.channels; ++c) {
        const double g = grad_out.at(c, 0, 0) * inv;
        for (std::size_t y = 0; y < is.height; ++y) {
            for (std::size_t x = 0; x < is.width; ++x) grad_in.at(c, y, x) = g;
        }
    }
    return grad_in;
}

Linear::Linear(std::size_t in_features, std::size_t out_features) : in_(in_features), out_(out_features) {}

Shape Linear::output_shape(const Shape& in) const {
    if (in.size() != in_) fail(Errc::shape, "linear expects " + std::to_string(in_) + " features");
    return {out_, 1, 1};
}

std::size_t Linear::param_count() const noexcept { return out_ * in_ + out_; }

std::uint64_t Linear::macs(const Shape&) const noexcept { return static_cast<std::uint64_t>(in_) * out_; }

void Linear::init(std::span<double> params, std::mt19937_64& rng) const {
    fill_normal(params.first(out_ * in_), std::sqrt(1.0 / static_cast<double>(in_)), rng);
    std::ranges::fill(params.subspan(out_ * in_), 0.0);
}

Tensor Linear::forward(const Tensor& in, std::span<const double> params) const {
    Tensor out(output_shape(in.shape()));
    auto x = in.data();
    for (std::size_t o = 0; o < out_; ++o) {
        double acc = params[out_ * in_ + o];
        const double* w = params.data() + o * in_;
        for (std::size_t i = 0; i < in_; ++i) acc += w[i] * x[i];
        out.data()[o] = acc;
    }
    return out;
}

Tensor Linear::backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                        std::span<double> grad_params) const {
    Tensor grad_in(in.shape());
    auto x = in.data();
    auto gx = grad_in.data();
    for (std::size_t o = 0; o < out_; ++o) {
        const double g = grad_out.data()[o];
        grad_params[out_ * in_ + o] += g;
        const double* w = params.data() + o * in_;
        double* gw = grad_params.data() + o * in_;
        for (std::size_t i = 0; i < in_; ++i) {
            gw[i] += g * x[i];
            gx[i] += g * w[i];
        }
    }
    return grad_in;
}

Block::Block(std::vector<std::unique_ptr<Layer>> body, bool skip) : body_(std::move(body)), skip_(skip) {
    std::size_t off = 0;
    for (const auto& l : body_) {
        offsets_.push_back(off);
        off += l->param_count();
    }
}

Shape Block::output_shape(const Shape& in) const {
    Shape s = in;
    for (const auto& l : body_) s = l->output_shape(s);
    if (skip_ && !(s == in)) fail(Errc::shape, "skip connection around a shape-changing block");
    return s;
}

std::size_t Block::param_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : body_) n += l->param_count();
    return n;
}

std::uint64_t Block::macs(const Shape& in) const noexcept {
    std::uint64_t n = 0;
    Shape s = in;
    for (const auto& l : body_) {
        n += l->macs(s);
        s = l->output_shape(s);
    }
    return n;
}

void Block::init(std::span<double> params, std::mt19937_64& rng) const {
    for (std::size_t i = 0; i < body_.size(); ++i) {
        body_[i]->init(params.subspan(offsets_[i], body_[i]->param_count()), rng);
    }
}

Tensor Block::forward(const Tensor& in, std::span<const double> params) const {
    Tensor x = in;
    for (std::size_t i = 0; i < body_.size(); ++i) {
        x = body_[i]->forward(x, params.subspan(offsets_[i], body_[i]->param_count()));
    }
    if (skip_) {
        auto dst = x.data();
        auto src = in.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    return x;
}

Tensor Block::backward(const Tensor& in, const Tensor& grad_out, std::span<const double> params,
                       std::span<double> grad_params) const {
    std::vector<Tensor> inputs;
    inputs.reserve(body_.size());
    Tensor x = in;
    for (std::size_t i = 0; i < body_.size(); ++i) {
        inputs.push_back(x);
        x = body_[i]->forward(x, params.subspan(offsets_[i], body_[i]->param_count()));
    }
    Tensor g = grad_out;
    for (std::size_t i = body_.size(); i-- > 0;) {
        const std::size_t n = body_[i]->param_count();
        g = body_[i]->backward(inputs[i], g, params.subspan(offsets_[i], n), grad_params.subspan(offsets_[i], n));
    }
    if (skip_) {
        auto dst = g.data();
        auto src = grad_out.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Architecture

Architecture::Architecture(const ScalingConfig& config)
    : input_{config.base.input_channels, config.resolution, config.resolution} {
    if (config.resolution < kMinResolution) {
        fail(Errc::config, "resolved resolution " + std::to_string(config.resolution) + " is below the minimum " +
                               std::to_string(kMinResolution));
    }
    if (config.stages.empty() || config.stem_width == 0) fail(Errc::config, "scaling config is not resolved");

    layers_.push_back(std::make_unique<Conv2d>(input_.channels, config.stem_width, 3, 1));
    layers_.push_back(std::make_unique<SiLU>());
    std::size_t channels = config.stem_width;
    for (const auto& stage : config.stages) {
        for (std::size_t r = 0; r < stage.repeats; ++r) {
            const std::size_t stride = r == 0 ? stage.stride : 1;
            std::vector<std::unique_ptr<Layer>> body;
            body.push_back(std::make_unique<DepthwiseConv2d>(channels, stage.kernel, stride));
            body.push_back(std::make_unique<SiLU>());
            body.push_back(std::make_unique<Conv2d>(channels, stage.width, 1, 1));
            body.push_back(std::make_unique<SiLU>());
            const bool skip = stride == 1 && channels == stage.width;
            layers_.push_back(std::make_unique<Block>(std::move(body), skip));
            channels = stage.width;
        }
    }
    layers_.push_back(std::make_unique<GlobalAvgPool>());
    layers_.push_back(std::make_unique<Linear>(channels, kClassCount));

    Shape s = input_;
    for (const auto& l : layers_) {
        offsets_.push_back(param_count_);
        param_count_ += l->param_count();
        macs_ += l->macs(s);
        s = l->output_shape(s);
    }
}

void Architecture::init(std::span<double> params, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i]->init(params.subspan(offsets_[i], layers_[i]->param_count()), rng);
    }
}

void Architecture::check_input(const Tensor& image) const {
    const Shape& s = image.shape();
    if (!(s == input_)) {
        std::ostringstream msg;
        msg << "input shape mismatch: expected (" << input_.channels << ", " << input_.height << ", " << input_.width
            << "), got (" << s.channels << ", " << s.height << ", " << s.width << ")";
        fail(Errc::shape, msg.str());
    }
}

std::array<double, kClassCount> Architecture::logits(const Tensor& image, std::span<const double> params) const {
    check_input(image);
    Tensor x = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i]->forward(x, params.subspan(offsets_[i], layers_[i]->param_count()));
    }
    return {x.data()[0], x.data()[1]};
}

double Architecture::loss_and_gradient(const Tensor& image, int label, std::span<const double> params,
                                       std::span<double> grad) const {
    check_input(image);
    std::vector<Tensor> inputs;
    inputs.reserve(layers_.size());
    Tensor x = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        inputs.push_back(x);
        x = layers_[i]->forward(x, params.subspan(offsets_[i], layers_[i]->param_count()));
    }
    const std::array<double, kClassCount> z{x.data()[0], x.data()[1]};
    const double m = std::max(z[0], z[1]);
    const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
    const double loss = lse - z[static_cast<std::size_t>(label)];

    Tensor g(x.shape());
    for (std::size_t c = 0; c < kClassCount; ++c) {
        g.data()[c] = std::exp(z[c] - lse) - (static_cast<int>(c) == label ? 1.0 : 0.0);
    }
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const std::size_t n = layers_[i]->param_count();
        g = layers_[i]->backward(inputs[i], g, params.subspan(offsets_[i], n), grad.subspan(offsets_[i], n));
    }
    return loss;
}

std::uint64_t count_macs(const ScalingConfig& config) { return Architecture(config).macs(); }

// ---------------------------------------------------------------------------
// Parameters, inference, training

std::uint64_t NetParams::checksum() const noexcept {
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(weights.data()), weights.size() * sizeof(double)));
}

NetParams build_net(const ScalingConfig& config, std::uint64_t seed) {
    NetParams p;
    p.config = config;
    p.arch = std::make_shared<const Architecture>(config);
    p.weights.assign(p.arch->param_count(), 0.0);
    p.arch->init(p.weights, seed);
    p.seed = seed;
    return p;
}

std::string_view to_string(PredictionSource source) noexcept {
    return source == PredictionSource::model ? "model" : "fused";
}

std::array<double, kClassCount> softmax(const std::array<double, kClassCount>& logits) noexcept {
    const double m = std::max(logits[0], logits[1]);
    const double e0 = std::exp(logits[0] - m);
    const double e1 = std::exp(logits[1] - m);
    const double s = e0 + e1;
    return {e0 / s, e1 / s};
}

double predict_proba(const NetParams& params, const Tensor& image) {
    const double p = softmax(params.arch->logits(image, params.weights))[1];
    if (!std::isfinite(p)) fail(Errc::numeric, "non-finite class probability");
    return p;
}

RiskPrediction forward(const NetParams& params, const Tensor& image, std::string patient_id, std::int64_t t_ms,
                       double threshold) {
    RiskPrediction pred;
    pred.patient_id = std::move(patient_id);
    pred.t_ms = t_ms;
    pred.p_arrest = predict_proba(params, image);
    pred.decision = pred.p_arrest >= threshold;
    pred.source = PredictionSource::model;
    pred.model_version = params.version;
    return pred;
}

double batch_gradient(const NetParams& params, std::span<const Example> batch, std::vector<double>& grad) {
    if (batch.empty()) fail(Errc::validation, "empty batch");
    grad.assign(params.weights.size(), 0.0);
    double loss = 0.0;
    for (const auto& ex : batch) {
        if (ex.label != 0 && ex.label != 1) fail(Errc::validation, "labels must be 0 or 1");
        loss += params.arch->loss_and_gradient(ex.image, ex.label, params.weights, grad);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& g : grad) g *= inv;
    return loss * inv;
}

double batch_loss(const NetParams& params, std::span<const Example> batch) {
    if (batch.empty()) fail(Errc::validation, "empty batch");
    double loss = 0.0;
    for (const auto& ex : batch) {
        const auto z = params.arch->logits(ex.image, params.weights);
        const double m = std::max(z[0], z[1]);
        loss += m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m)) - z[static_cast<std::size_t>(ex.label)];
    }
    return loss / static_cast<double>(batch.size());
}

FineTuneResult fine_tune(const NetParams& params, std::span<const Example> batch, double lr, double clip_norm) {
    if (!(lr >= 0.0)) fail(Errc::validation, "learning rate must be non-negative");
    if (!(clip_norm >= 0.0)) fail(Errc::validation, "clip norm must be non-negative");
    std::vector<double> grad;
    const double loss = batch_gradient(params, batch, grad);
    if (!std::isfinite(loss)) fail(Errc::numeric, "non-finite loss during fine-tuning");
    if (!std::ranges::all_of(grad, [](double g) { return std::isfinite(g); })) {
        fail(Errc::numeric, "non-finite gradient during fine-tuning");
    }
    FineTuneResult result{params, loss};
    if (lr > 0.0) {
        double scale = lr;
        if (clip_norm > 0.0) {
            const double norm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
            if (norm > clip_norm) scale *= clip_norm / norm;
        }
        for (std::size_t i = 0; i < grad.size(); ++i) result.params.weights[i] -= scale * grad[i];
    }
    return result;
}

double train(NetParams& params, std::span<const Example> data, const TrainBudget& budget) {
    if (data.empty()) fail(Errc::validation, "empty training set");
    if (budget.batch_size == 0) fail(Errc::config, "batch size must be positive");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<Example> batch;
    std::vector<double> grad;
    double epoch_loss = 0.0;
    for (std::size_t epoch = 0; epoch < budget.epochs; ++epoch) {
        std::mt19937_64 rng(hash_combine(budget.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += budget.batch_size) {
            const std::size_t end = std::min(order.size(), start + budget.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
            const double loss = batch_gradient(params, batch, grad);
            if (!std::isfinite(loss)) fail(Errc::numeric, "non-finite loss during training");
            double scale = budget.lr;
            if (budget.clip_norm > 0.0) {
                const double norm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
                if (norm > budget.clip_norm) scale *= budget.clip_norm / norm;
            }
            for (std::size_t i = 0; i < grad.size(); ++i) params.weights[i] -= scale * grad[i];
            total += loss * static_cast<double>(end - start);
        }
        epoch_loss = total / static_cast<double>(order.size());
    }
    return epoch_loss;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[4] = {'C', 'T', 'N', 'N'};
constexpr std::uint32_t kFileVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

}  // namespace

std::string serialize_params(const NetParams& params) {
    nlohmann::json header;
    header["scaling"] = to_json(params.config);
    header["seed"] = params.seed;
    header["param_count"] = params.weights.size();
    header["model_version"] = params.version;
    const std::string text = header.dump();

    std::string out(kMagic, 4);
    put_u32(out, kFileVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out.reserve(out.size() + params.weights.size() * 4);
    for (double w : params.weights) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(w)));
    return out;
}

NetParams deserialize_params(std::string_view bytes) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != std::string_view(kMagic, 4)) {
        fail(Errc::parse, "not a CTNN params file");
    }
    if (get_u32(bytes, 4) != kFileVersion) fail(Errc::version, "unsupported params file version");
    const std::size_t header_len = get_u32(bytes, 8);
    if (bytes.size() < 12 + header_len) fail(Errc::parse, "truncated params header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(12, header_len));
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, std::string("params header: ") + e.what());
    }
    NetParams p = build_net(scaling_from_json(header.at("scaling")), header.value("seed", std::uint64_t{0}));
    p.version = header.value("model_version", std::uint64_t{0});
    const std::size_t count = header.value("param_count", std::size_t{0});
    if (count != p.weights.size()) fail(Errc::shape, "params file does not match its scaling config");
    const std::size_t body = 12 + header_len;
    if (bytes.size() != body + count * 4) fail(Errc::parse, "params body has the wrong length");
    for (std::size_t i = 0; i < count; ++i) {
        p.weights[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, body + 4 * i)));
    }
    return p;
}

void save_params(const NetParams& params, const std::filesystem::path& path) {
    write_file(path, serialize_params(params));
}

NetParams load_params(const std::filesystem::path& path) { return deserialize_params(read_file(path)); }

// ---------------------------------------------------------------------------
// ModelStore

ModelStore::ModelStore(NetParams params) : current_(std::make_shared<const NetParams>(std::move(params))) {}

std::shared_ptr<const NetParams> ModelStore::snapshot() const {
    std::lock_guard lock(mutex_);
    return current_;
}

std::uint64_t ModelStore::version() const {
    std::lock_guard lock(mutex_);
    return current_->version;
}

FineTuneResult ModelStore::tune(std::span<const Example> batch, double lr, double clip_norm) {
    std::lock_guard tune_lock(tune_mutex_);
    auto base = snapshot();
    FineTuneResult result = fine_tune(*base, batch, lr, clip_norm);
    result.params.version = base->version + 1;
    {
        std::lock_guard lock(mutex_);
        current_ = std::make_shared<const NetParams>(result.params);
    }
    return result;
}

void ModelStore::replace(NetParams params) {
    std::lock_guard tune_lock(tune_mutex_);
    std::lock_guard lock(mutex_);
    params.version = current_->version + 1;
    current_ = std::make_shared<const NetParams>(std::move(params));
}

}  // namespace cardiotwin::cnn
