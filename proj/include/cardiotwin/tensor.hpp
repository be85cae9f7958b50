#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cardiotwin {

struct Shape {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const noexcept { return channels * height * width; }
    bool operator==(const Shape&) const = default;
};

// Dense channel-major (C, H, W) tensor of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& at(std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[(c * shape_.height + y) * shape_.width + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[(c * shape_.height + y) * shape_.width + x];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace cardiotwin
