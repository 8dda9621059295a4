#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "xseg/errors.hpp"

namespace xseg {

/// (batch, channels, height, width)
struct Shape4 {
    std::size_t n = 1;
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;

    std::size_t size() const { return n * c * h * w; }
    std::size_t plane() const { return h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

/// Dense rank-4 array, row-major over (n, c, h, w).
template <typename T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(checked_size(shape), fill) {}
    Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
        : Tensor4(Shape4{n, c, h, w}, fill) {}
    Tensor4(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
        if (data_.size() != checked_size(shape))
            throw DimensionError("Tensor4: value count " + std::to_string(data_.size()) +
                                 " does not match shape " + shape.str());
    }

    const Shape4& shape() const { return shape_; }
    std::size_t n() const { return shape_.n; }
    std::size_t c() const { return shape_.c; }
    std::size_t h() const { return shape_.h; }
    std::size_t w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
        return ((b * shape_.c + ch) * shape_.h + y) * shape_.w + x;
    }
    T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) { return data_[index(b, ch, y, x)]; }
    const T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
        return data_[index(b, ch, y, x)];
    }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Pointer to the (b, ch) image plane.
    T* plane(std::size_t b, std::size_t ch) { return data_.data() + (b * shape_.c + ch) * shape_.plane(); }
    const T* plane(std::size_t b, std::size_t ch) const {
        return data_.data() + (b * shape_.c + ch) * shape_.plane();
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor4& other) const = default;

    template <typename U>
    Tensor4<U> cast() const {
        Tensor4<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

private:
    static std::size_t checked_size(const Shape4& s) {
        if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0)
            throw DimensionError("Tensor4: every dimension must be >= 1, got " + s.str());
        return s.size();
    }

    Shape4 shape_{};
    std::vector<T> data_;
};

/// Debug-mode check that a primitive produced only finite values.
template <typename T>
inline void debug_assert_finite([[maybe_unused]] const Tensor4<T>& t) {
#ifndef NDEBUG
    assert(t.all_finite() && "non-finite value after primitive op");
#endif
}

/// Throws DimensionError unless both shapes are identical.
void require_same_shape(const Shape4& a, const Shape4& b, const char* what);

/// Concatenate tensors along the channel axis. All parts share (n, h, w).
template <typename T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>* const> parts);

/// Inverse of concat_channels: split grad into consecutive channel blocks.
template <typename T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& t, std::span<const std::size_t> channel_counts);

/// Stack single-sample tensors along the batch axis.
template <typename T>
Tensor4<T> stack_batch(std::span<const Tensor4<T>* const> samples);

/// Copy out sample b as a (1, c, h, w) tensor.
template <typename T>
Tensor4<T> take_sample(const Tensor4<T>& t, std::size_t b);

}  // namespace xseg
