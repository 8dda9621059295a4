#include "xseg/tensor.hpp"

#include <cstring>

namespace xseg {

std::string Shape4::str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
           std::to_string(w) + ")";
}

void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
    if (!(a == b)) throw DimensionError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename T>
Tensor4<T> concat_channels(std::span<const Tensor4<T>* const> parts) {
    if (parts.empty()) throw DimensionError("concat_channels: no inputs");
    const Shape4 first = parts.front()->shape();
    std::size_t channels = 0;
    for (const auto* p : parts) {
        const Shape4& s = p->shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w)
            throw DimensionError("concat_channels: shape mismatch " + first.str() + " vs " + s.str());
        channels += s.c;
    }
    Tensor4<T> out(Shape4{first.n, channels, first.h, first.w});
    const std::size_t plane = first.plane();
    for (std::size_t b = 0; b < first.n; ++b) {
        std::size_t offset = 0;
        for (const auto* p : parts) {
            std::memcpy(out.plane(b, offset), p->plane(b, 0), sizeof(T) * plane * p->c());
            offset += p->c();
        }
    }
    return out;
}

template <typename T>
std::vector<Tensor4<T>> split_channels(const Tensor4<T>& t, std::span<const std::size_t> channel_counts) {
    std::size_t total = 0;
    for (auto c : channel_counts) total += c;
    if (total != t.c())
        throw DimensionError("split_channels: counts sum to " + std::to_string(total) + " but tensor " +
                             t.shape().str());
    std::vector<Tensor4<T>> out;
    out.reserve(channel_counts.size());
    const std::size_t plane = t.shape().plane();
    std::size_t offset = 0;
    for (auto c : channel_counts) {
        Tensor4<T> part(Shape4{t.n(), c, t.h(), t.w()});
        for (std::size_t b = 0; b < t.n(); ++b)
            std::memcpy(part.plane(b, 0), t.plane(b, offset), sizeof(T) * plane * c);
        offset += c;
        out.push_back(std::move(part));
    }
    return out;
}

template <typename T>
Tensor4<T> stack_batch(std::span<const Tensor4<T>* const> samples) {
    if (samples.empty()) throw DimensionError("stack_batch: no samples");
    const Shape4 s0 = samples.front()->shape();
    std::size_t total = 0;
    for (const auto* s : samples) {
        const Shape4& s1 = s->shape();
        if (s1.c != s0.c || s1.h != s0.h || s1.w != s0.w)
            throw DimensionError("stack_batch: shape mismatch " + s0.str() + " vs " + s1.str());
        total += s1.n;
    }
    Tensor4<T> out(Shape4{total, s0.c, s0.h, s0.w});
    T* dst = out.data();
    for (const auto* s : samples) {
        std::memcpy(dst, s->data(), sizeof(T) * s->size());
        dst += s->size();
    }
    return out;
}

template <typename T>
Tensor4<T> take_sample(const Tensor4<T>& t, std::size_t b) {
    if (b >= t.n()) throw DimensionError("take_sample: index " + std::to_string(b) + " out of " + t.shape().str());
    Tensor4<T> out(Shape4{1, t.c(), t.h(), t.w()});
    std::memcpy(out.data(), t.plane(b, 0), sizeof(T) * out.size());
    return out;
}

#define XSEG_INSTANTIATE(T)                                                                            \
    template Tensor4<T> concat_channels<T>(std::span<const Tensor4<T>* const>);                       \
    template std::vector<Tensor4<T>> split_channels<T>(const Tensor4<T>&, std::span<const std::size_t>); \
    template Tensor4<T> stack_batch<T>(std::span<const Tensor4<T>* const>);                           \
    template Tensor4<T> take_sample<T>(const Tensor4<T>&, std::size_t);

XSEG_INSTANTIATE(float)
XSEG_INSTANTIATE(double)
#undef XSEG_INSTANTIATE

}  // namespace xseg
