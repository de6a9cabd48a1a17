#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace ssfda {

/// Binary h×w mask, row-major. 1 = road.
struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * width + c]; }
    std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * width + c]; }
    std::size_t size() const { return data.size(); }

    bool is_binary() const {
        for (auto v : data)
            if (v > 1) return false;
        return true;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : data) n += v;
        return n;
    }

    double fraction() const { return data.empty() ? 0.0 : static_cast<double>(count()) / data.size(); }

    /// Constant 1×h×w tensor of 0/1 values.
    Tensor to_tensor() const {
        std::vector<double> v(data.begin(), data.end());
        return Tensor({1, height, width}, std::move(v));
    }

    friend bool operator==(const Mask&, const Mask&) = default;
};

inline std::string mask_shape_str(const Mask& m) {
    return "[" + std::to_string(m.height) + ", " + std::to_string(m.width) + "]";
}

} // namespace ssfda
