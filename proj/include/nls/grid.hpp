#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nls/errors.hpp"

namespace nls {

/// Row-major 2D array. The tag keeps images, masks, distance maps and
/// generic scalar fields from being mixed up silently; converting between
/// tags is explicit.
template <class T, class Tag>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
        if (height < 0 || width < 0) throw InvalidInput("negative grid size");
        values_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
    }
    Grid(int height, int width, std::vector<T> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (height < 0 || width < 0 ||
            values_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
            throw InvalidInput("grid values do not match " + std::to_string(height) + "x" +
                               std::to_string(width));
    }

    template <class OtherTag>
    explicit Grid(const Grid<T, OtherTag>& other)
        : Grid(other.height(), other.width(), std::vector<T>(other.values().begin(), other.values().end())) {}

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    T& operator()(int row, int col) noexcept {
        return values_[static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(col)];
    }
    const T& operator()(int row, int col) const noexcept {
        return values_[static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(col)];
    }
    T& operator[](std::size_t i) noexcept { return values_[i]; }
    const T& operator[](std::size_t i) const noexcept { return values_[i]; }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    std::vector<T>& storage() noexcept { return values_; }
    const std::vector<T>& storage() const noexcept { return values_; }

    bool same_shape(int h, int w) const noexcept { return h == height_ && w == width_; }
    template <class U, class OtherTag>
    bool same_shape(const Grid<U, OtherTag>& o) const noexcept {
        return o.height() == height_ && o.width() == width_;
    }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.height_ == b.height_ && a.width_ == b.width_ && a.values_ == b.values_;
    }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> values_;
};

struct ImageTag {};
struct MaskTag {};
struct DistanceTag {};
struct FieldTag {};

/// Intensities in [0, 1].
using ImageGrid = Grid<double, ImageTag>;
/// 1 = foreground, 0 = background.
using BinaryMask = Grid<std::uint8_t, MaskTag>;
/// Signed distance in pixel widths, negative inside the object.
using DistanceMap = Grid<double, DistanceTag>;
using ScalarField = Grid<double, FieldTag>;

template <class To, class From>
To retag(const From& from) {
    return To(from);
}

template <class A, class B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (!a.same_shape(b))
        throw InvalidInput(std::string(what) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                           std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                           std::to_string(b.width()));
}

}  // namespace nls
