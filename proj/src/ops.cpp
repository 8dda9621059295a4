#include "xseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xseg/parallel.hpp"

namespace xseg {

namespace {

struct ConvGeometry {
    std::size_t kh, kw, pad_h, pad_w, stride;
    std::size_t h_in, w_in, h_out, w_out;
};

ConvGeometry conv_geometry(const Shape4& input, const Shape4& weights, const ConvOptions& opt) {
    if (opt.stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (weights.c != input.c)
        throw DimensionError("conv2d: kernel expects " + std::to_string(weights.c) + " input channels, input " +
                             input.str() + " vs kernel " + weights.str());
    ConvGeometry g{};
    g.kh = weights.h;
    g.kw = weights.w;
    g.stride = opt.stride;
    g.h_in = input.h;
    g.w_in = input.w;
    if (opt.padding == Padding::Same) {
        if (g.kh % 2 == 0 || g.kw % 2 == 0)
            throw ConfigError("conv2d: same padding needs odd kernel sizes, kernel " + weights.str());
        g.pad_h = (g.kh - 1) / 2;
        g.pad_w = (g.kw - 1) / 2;
    }
    if (input.h + 2 * g.pad_h < g.kh || input.w + 2 * g.pad_w < g.kw)
        throw DimensionError("conv2d: kernel " + weights.str() + " larger than padded input " + input.str());
    g.h_out = (input.h + 2 * g.pad_h - g.kh) / g.stride + 1;
    g.w_out = (input.w + 2 * g.pad_w - g.kw) / g.stride + 1;
    return g;
}

// Output columns [lo, hi) whose input column ox + kx - pad is in range (stride 1).
inline void valid_columns(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
    lo = g.pad_w > kx ? g.pad_w - kx : 0;
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(g.w_in + g.pad_w) - static_cast<std::ptrdiff_t>(kx);
    hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(h, 0, static_cast<std::ptrdiff_t>(g.w_out)));
    if (hi < lo) hi = lo;
}

inline bool input_row(const ConvGeometry& g, std::size_t oy, std::size_t ky, std::size_t& iy) {
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_h);
    if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.h_in)) return false;
    iy = static_cast<std::size_t>(r);
    return true;
}

inline bool input_col(const ConvGeometry& g, std::size_t ox, std::size_t kx, std::size_t& ix) {
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_w);
    if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.w_in)) return false;
    ix = static_cast<std::size_t>(r);
    return true;
}

}  // namespace

Shape4 conv2d_output_shape(const Shape4& input, const Shape4& weights, const ConvOptions& opt) {
    const auto g = conv_geometry(input, weights, opt);
    return Shape4{input.n, weights.n, g.h_out, g.w_out};
}

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& input, const Tensor4<T>& weights, std::span<const T> bias,
                  const ConvOptions& opt) {
    const auto g = conv_geometry(input.shape(), weights.shape(), opt);
    const std::size_t c_out = weights.n();
    const std::size_t c_in = weights.c();
    if (!bias.empty() && bias.size() != c_out)
        throw DimensionError("conv2d: bias length " + std::to_string(bias.size()) + " vs C_out " +
                             std::to_string(c_out));
    Tensor4<T> out(Shape4{input.n(), c_out, g.h_out, g.w_out});
    const std::size_t ksize = g.kh * g.kw;

    parallel_for(input.n() * c_out, [&](std::size_t job) {
        const std::size_t b = job / c_out;
        const std::size_t co = job % c_out;
        T* o = out.plane(b, co);
        std::fill(o, o + g.h_out * g.w_out, bias.empty() ? T(0) : bias[co]);
        for (std::size_t ci = 0; ci < c_in; ++ci) {
            const T* in = input.plane(b, ci);
            const T* wk = weights.data() + (co * c_in + ci) * ksize;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const T wv = wk[ky * g.kw + kx];
                    std::size_t lo = 0, hi = 0;
                    if (g.stride == 1) valid_columns(g, kx, lo, hi);
                    for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                        std::size_t iy;
                        if (!input_row(g, oy, ky, iy)) continue;
                        const T* irow = in + iy * g.w_in;
                        T* orow = o + oy * g.w_out;
                        if (g.stride == 1) {
                            const T* src = irow + (lo + kx - g.pad_w);
                            T* dst = orow + lo;
                            for (std::size_t i = 0; i < hi - lo; ++i) dst[i] += wv * src[i];
                        } else {
                            for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                                std::size_t ix;
                                if (input_col(g, ox, kx, ix)) orow[ox] += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    debug_assert_finite(out);
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& input, const Tensor4<T>& weights, bool has_bias,
                             const Tensor4<T>& grad_out, const ConvOptions& opt) {
    const auto g = conv_geometry(input.shape(), weights.shape(), opt);
    const std::size_t c_out = weights.n();
    const std::size_t c_in = weights.c();
    const std::size_t batch = input.n();
    require_same_shape(grad_out.shape(), Shape4{batch, c_out, g.h_out, g.w_out}, "conv2d_backward grad_out");
    const std::size_t ksize = g.kh * g.kw;
    const std::size_t out_plane = g.h_out * g.w_out;

    ConvGrads<T> grads{Tensor4<T>(input.shape()), Tensor4<T>(weights.shape()), {}};

    if (has_bias) {
        grads.bias.assign(c_out, T(0));
        for (std::size_t co = 0; co < c_out; ++co) {
            T acc = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* go = grad_out.plane(b, co);
                for (std::size_t i = 0; i < out_plane; ++i) acc += go[i];
            }
            grads.bias[co] = acc;
        }
    }

    // Weight gradients: one job per output channel.
    parallel_for(c_out, [&](std::size_t co) {
        T* gw = grads.weights.data() + co * c_in * ksize;
        for (std::size_t b = 0; b < batch; ++b) {
            const T* go = grad_out.plane(b, co);
            for (std::size_t ci = 0; ci < c_in; ++ci) {
                const T* in = input.plane(b, ci);
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    for (std::size_t kx = 0; kx < g.kw; ++kx) {
                        std::size_t lo = 0, hi = 0;
                        if (g.stride == 1) valid_columns(g, kx, lo, hi);
                        // Eight fixed partial sums: vectorisable, and the order never changes.
                        T lanes[8] = {};
                        T acc = 0;
                        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                            std::size_t iy;
                            if (!input_row(g, oy, ky, iy)) continue;
                            const T* irow = in + iy * g.w_in;
                            const T* grow = go + oy * g.w_out;
                            if (g.stride == 1) {
                                const T* src = irow + (lo + kx - g.pad_w);
                                const T* gsrc = grow + lo;
                                const std::size_t n = hi - lo, n8 = n - n % 8;
                                for (std::size_t i = 0; i < n8; i += 8)
                                    for (std::size_t j = 0; j < 8; ++j) lanes[j] += gsrc[i + j] * src[i + j];
                                for (std::size_t i = n8; i < n; ++i) acc += gsrc[i] * src[i];
                            } else {
                                for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                                    std::size_t ix;
                                    if (input_col(g, ox, kx, ix)) acc += grow[ox] * irow[ix];
                                }
                            }
                        }
                        for (T l : lanes) acc += l;
                        gw[ci * ksize + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    });

    // Input gradients: one job per (sample, input channel).
    parallel_for(batch * c_in, [&](std::size_t job) {
        const std::size_t b = job / c_in;
        const std::size_t ci = job % c_in;
        T* gi = grads.input.plane(b, ci);
        for (std::size_t co = 0; co < c_out; ++co) {
            const T* go = grad_out.plane(b, co);
            const T* wk = weights.data() + (co * c_in + ci) * ksize;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const T wv = wk[ky * g.kw + kx];
                    std::size_t lo = 0, hi = 0;
                    if (g.stride == 1) valid_columns(g, kx, lo, hi);
                    for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                        std::size_t iy;
                        if (!input_row(g, oy, ky, iy)) continue;
                        T* irow = gi + iy * g.w_in;
                        const T* grow = go + oy * g.w_out;
                        if (g.stride == 1) {
                            T* dst = irow + (lo + kx - g.pad_w);
                            const T* gsrc = grow + lo;
                            for (std::size_t i = 0; i < hi - lo; ++i) dst[i] += wv * gsrc[i];
                        } else {
                            for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                                std::size_t ix;
                                if (input_col(g, ox, kx, ix)) irow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    return grads;
}

template <typename T>
PoolResult<T> maxpool2x2(const Tensor4<T>& input) {
    if (input.h() % 2 != 0 || input.w() % 2 != 0)
        throw DimensionError("maxpool2x2: H and W must be even, got " + input.shape().str());
    const std::size_t ho = input.h() / 2, wo = input.w() / 2;
    PoolResult<T> r{Tensor4<T>(Shape4{input.n(), input.c(), ho, wo}), {}};
    r.argmax.resize(r.output.size());
    std::size_t k = 0;
    for (std::size_t b = 0; b < input.n(); ++b) {
        for (std::size_t c = 0; c < input.c(); ++c) {
            for (std::size_t y = 0; y < ho; ++y) {
                for (std::size_t x = 0; x < wo; ++x, ++k) {
                    std::size_t best = input.index(b, c, 2 * y, 2 * x);
                    const std::size_t cands[3] = {input.index(b, c, 2 * y, 2 * x + 1),
                                                  input.index(b, c, 2 * y + 1, 2 * x),
                                                  input.index(b, c, 2 * y + 1, 2 * x + 1)};
                    for (std::size_t idx : cands)
                        if (input[idx] > input[best]) best = idx;
                    r.output[k] = input[best];
                    r.argmax[k] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    return r;
}

template <typename T>
Tensor4<T> maxpool2x2_backward(const Shape4& input_shape, std::span<const std::uint32_t> argmax,
                               const Tensor4<T>& grad_out) {
    if (argmax.size() != grad_out.size())
        throw DimensionError("maxpool2x2_backward: " + std::to_string(argmax.size()) + " indices for grad " +
                             grad_out.shape().str());
    require_same_shape(grad_out.shape(), Shape4{input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2},
                       "maxpool2x2_backward grad_out");
    Tensor4<T> gi(input_shape);
    for (std::size_t k = 0; k < argmax.size(); ++k) gi[argmax[k]] += grad_out[k];
    return gi;
}

template <typename T>
Tensor4<T> upsample2x2(const Tensor4<T>& input) {
    const std::size_t h = input.h(), w = input.w();
    Tensor4<T> out(Shape4{input.n(), input.c(), 2 * h, 2 * w});
    for (std::size_t b = 0; b < input.n(); ++b) {
        for (std::size_t c = 0; c < input.c(); ++c) {
            const T* src = input.plane(b, c);
            T* dst = out.plane(b, c);
            for (std::size_t y = 0; y < 2 * h; ++y) {
                const T* srow = src + (y / 2) * w;
                T* drow = dst + y * 2 * w;
                for (std::size_t x = 0; x < 2 * w; ++x) drow[x] = srow[x / 2];
            }
        }
    }
    return out;
}

template <typename T>
Tensor4<T> upsample2x2_backward(const Tensor4<T>& grad_out) {
    if (grad_out.h() % 2 != 0 || grad_out.w() % 2 != 0)
        throw DimensionError("upsample2x2_backward: grad must have even H, W, got " + grad_out.shape().str());
    const std::size_t h = grad_out.h() / 2, w = grad_out.w() / 2;
    Tensor4<T> gi(Shape4{grad_out.n(), grad_out.c(), h, w});
    for (std::size_t b = 0; b < grad_out.n(); ++b) {
        for (std::size_t c = 0; c < grad_out.c(); ++c) {
            const T* src = grad_out.plane(b, c);
            T* dst = gi.plane(b, c);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const T* r0 = src + (2 * y) * 2 * w + 2 * x;
                    const T* r1 = r0 + 2 * w;
                    dst[y * w + x] = (r0[0] + r0[1]) + (r1[0] + r1[1]);
                }
            }
        }
    }
    return gi;
}

template <typename T>
Tensor4<T> batchnorm(const Tensor4<T>& input, std::span<const T> gamma, std::span<const T> beta, Mode mode,
                     BatchNormStats<T>& stats, BatchNormCache<T>* cache, double eps, double momentum) {
    const std::size_t channels = input.c();
    if (gamma.size() != channels || beta.size() != channels)
        throw DimensionError("batchnorm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                             std::to_string(beta.size()) + " vs input " + input.shape().str());
    if (stats.running_mean.size() != channels || stats.running_var.size() != channels)
        throw DimensionError("batchnorm: running stats sized for " + std::to_string(stats.running_mean.size()) +
                             " channels, input " + input.shape().str());
    if (!(eps > 0)) throw ConfigError("batchnorm: eps must be positive");

    const std::size_t plane = input.shape().plane();
    const std::size_t count = input.n() * plane;
    Tensor4<T> out(input.shape());
    if (cache != nullptr && mode == Mode::Train) {
        cache->x_hat = Tensor4<T>(input.shape());
        cache->inv_std.assign(channels, T(0));
    }

    for (std::size_t c = 0; c < channels; ++c) {
        T mean, var;
        if (mode == Mode::Train) {
            double sum = 0;
            for (std::size_t b = 0; b < input.n(); ++b) {
                const T* p = input.plane(b, c);
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            const double m = sum / static_cast<double>(count);
            double sq = 0;
            for (std::size_t b = 0; b < input.n(); ++b) {
                const T* p = input.plane(b, c);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - m;
                    sq += d * d;
                }
            }
            const double v = sq / static_cast<double>(count);
            mean = static_cast<T>(m);
            var = static_cast<T>(v);
            const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
            stats.running_mean[c] = static_cast<T>((1 - momentum) * stats.running_mean[c] + momentum * m);
            stats.running_var[c] = static_cast<T>((1 - momentum) * stats.running_var[c] + momentum * unbiased);
        } else {
            mean = stats.running_mean[c];
            var = stats.running_var[c];
        }
        const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        for (std::size_t b = 0; b < input.n(); ++b) {
            const T* p = input.plane(b, c);
            T* o = out.plane(b, c);
            T* xh = (cache != nullptr && mode == Mode::Train) ? cache->x_hat.plane(b, c) : nullptr;
            for (std::size_t i = 0; i < plane; ++i) {
                const T normalized = (p[i] - mean) * inv_std;
                if (xh != nullptr) xh[i] = normalized;
                o[i] = gamma[c] * normalized + beta[c];
            }
        }
        if (cache != nullptr && mode == Mode::Train) cache->inv_std[c] = inv_std;
    }
    debug_assert_finite(out);
    return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                     const Tensor4<T>& grad_out) {
    require_same_shape(cache.x_hat.shape(), grad_out.shape(), "batchnorm_backward");
    const std::size_t channels = grad_out.c();
    if (gamma.size() != channels || cache.inv_std.size() != channels)
        throw DimensionError("batchnorm_backward: parameter length mismatch for " + grad_out.shape().str());
    const std::size_t plane = grad_out.shape().plane();
    const T count = static_cast<T>(grad_out.n() * plane);

    BatchNormGrads<T> g{Tensor4<T>(grad_out.shape()), std::vector<T>(channels, T(0)),
                        std::vector<T>(channels, T(0))};
    for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t b = 0; b < grad_out.n(); ++b) {
            const T* go = grad_out.plane(b, c);
            const T* xh = cache.x_hat.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
        }
        g.beta[c] = sum_g;
        g.gamma[c] = sum_gx;
        // dx = gamma * inv_std / N * (N * dy - sum(dy) - x_hat * sum(dy * x_hat))
        const T factor = gamma[c] * cache.inv_std[c] / count;
        for (std::size_t b = 0; b < grad_out.n(); ++b) {
            const T* go = grad_out.plane(b, c);
            const T* xh = cache.x_hat.plane(b, c);
            T* gi = g.input.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) gi[i] = factor * (count * go[i] - sum_g - xh[i] * sum_gx);
        }
    }
    return g;
}

template <typename T>
Tensor4<T> relu(const Tensor4<T>& input) {
    Tensor4<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
    return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
    require_same_shape(input.shape(), grad_out.shape(), "relu_backward");
    Tensor4<T> gi(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) gi[i] = input[i] > T(0) ? grad_out[i] : T(0);
    return gi;
}

template <typename T>
Tensor4<T> sigmoid(const Tensor4<T>& input) {
    Tensor4<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        const T v = input[i];
        // Split by sign so exp never overflows.
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    return out;
}

template <typename T>
Tensor4<T> sigmoid_backward(const Tensor4<T>& output, const Tensor4<T>& grad_out) {
    require_same_shape(output.shape(), grad_out.shape(), "sigmoid_backward");
    Tensor4<T> gi(output.shape());
    for (std::size_t i = 0; i < output.size(); ++i) gi[i] = grad_out[i] * output[i] * (T(1) - output[i]);
    return gi;
}

template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& input) {
    Tensor4<T> out(input.shape());
    const std::size_t plane = input.shape().plane();
    const std::size_t channels = input.c();
    for (std::size_t b = 0; b < input.n(); ++b) {
        const T* in = input.plane(b, 0);
        T* o = out.plane(b, 0);
        for (std::size_t i = 0; i < plane; ++i) {
            T mx = in[i];
            for (std::size_t c = 1; c < channels; ++c) mx = std::max(mx, in[c * plane + i]);
            T sum = 0;
            for (std::size_t c = 0; c < channels; ++c) {
                const T e = std::exp(in[c * plane + i] - mx);
                o[c * plane + i] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t c = 0; c < channels; ++c) o[c * plane + i] *= inv;
        }
    }
    debug_assert_finite(out);
    return out;
}

template <typename T>
Tensor4<T> softmax_channels_backward(const Tensor4<T>& output, const Tensor4<T>& grad_out) {
    require_same_shape(output.shape(), grad_out.shape(), "softmax_channels_backward");
    Tensor4<T> gi(output.shape());
    const std::size_t plane = output.shape().plane();
    const std::size_t channels = output.c();
    for (std::size_t b = 0; b < output.n(); ++b) {
        const T* y = output.plane(b, 0);
        const T* g = grad_out.plane(b, 0);
        T* d = gi.plane(b, 0);
        for (std::size_t i = 0; i < plane; ++i) {
            T dot = 0;
            for (std::size_t c = 0; c < channels; ++c) dot += y[c * plane + i] * g[c * plane + i];
            for (std::size_t c = 0; c < channels; ++c) d[c * plane + i] = y[c * plane + i] * (g[c * plane + i] - dot);
        }
    }
    return gi;
}

namespace {

// Cross-correlation taps, indexed [dy + 1][dx + 1].
constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

inline std::size_t clamp_index(std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
}

void require_single_channel(const Shape4& s, const char* what) {
    if (s.c != 1) throw DimensionError(std::string(what) + ": expects a single channel, got " + s.str());
}

}  // namespace

template <typename T>
void sobel_components(const Tensor4<T>& input, Tensor4<T>& gx, Tensor4<T>& gy) {
    require_single_channel(input.shape(), "sobel");
    gx = Tensor4<T>(input.shape());
    gy = Tensor4<T>(input.shape());
    const std::size_t h = input.h(), w = input.w();
    for (std::size_t b = 0; b < input.n(); ++b) {
        const T* in = input.plane(b, 0);
        T* px = gx.plane(b, 0);
        T* py = gy.plane(b, 0);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                T sx = 0, sy = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const std::size_t yy = clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h);
                    for (int dx = -1; dx <= 1; ++dx) {
                        const std::size_t xx = clamp_index(static_cast<std::ptrdiff_t>(x) + dx, w);
                        const T v = in[yy * w + xx];
                        sx += static_cast<T>(kSobelX[dy + 1][dx + 1]) * v;
                        sy += static_cast<T>(kSobelY[dy + 1][dx + 1]) * v;
                    }
                }
                px[y * w + x] = sx;
                py[y * w + x] = sy;
            }
        }
    }
}

template <typename T>
Tensor4<T> sobel_gradient_magnitude(const Tensor4<T>& input) {
    Tensor4<T> gx, gy;
    sobel_components(input, gx, gy);
    Tensor4<T> mag(input.shape());
    for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
    return mag;
}

template <typename T>
Tensor4<T> sobel_gradient_magnitude_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
    require_same_shape(input.shape(), grad_out.shape(), "sobel_gradient_magnitude_backward");
    Tensor4<T> gx, gy;
    sobel_components(input, gx, gy);
    const std::size_t h = input.h(), w = input.w();
    Tensor4<T> gi(input.shape());
    for (std::size_t b = 0; b < input.n(); ++b) {
        T* d = gi.plane(b, 0);
        const T* g = grad_out.plane(b, 0);
        const T* px = gx.plane(b, 0);
        const T* py = gy.plane(b, 0);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t i = y * w + x;
                const T mag = std::sqrt(px[i] * px[i] + py[i] * py[i]);
                const T denom = mag + static_cast<T>(kSobelEps);
                const T dgx = g[i] * px[i] / denom;
                const T dgy = g[i] * py[i] / denom;
                if (dgx == T(0) && dgy == T(0)) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                    const std::size_t yy = clamp_index(static_cast<std::ptrdiff_t>(y) + dy, h);
                    for (int dx = -1; dx <= 1; ++dx) {
                        const std::size_t xx = clamp_index(static_cast<std::ptrdiff_t>(x) + dx, w);
                        d[yy * w + xx] += static_cast<T>(kSobelX[dy + 1][dx + 1]) * dgx +
                                          static_cast<T>(kSobelY[dy + 1][dx + 1]) * dgy;
                    }
                }
            }
        }
    }
    return gi;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor4<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor4<T> multiply(const Tensor4<T>& a, const Tensor4<T>& b) {
    require_same_shape(a.shape(), b.shape(), "multiply");
    Tensor4<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
Tensor4<T> scale(const Tensor4<T>& a, T factor) {
    Tensor4<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
    return out;
}

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& b) {
    require_same_shape(acc.shape(), b.shape(), "add_inplace");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

#define XSEG_INSTANTIATE(T)                                                                                     \
    template Tensor4<T> conv2d<T>(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>, const ConvOptions&); \
    template ConvGrads<T> conv2d_backward<T>(const Tensor4<T>&, const Tensor4<T>&, bool, const Tensor4<T>&,      \
                                             const ConvOptions&);                                              \
    template PoolResult<T> maxpool2x2<T>(const Tensor4<T>&);                                                   \
    template Tensor4<T> maxpool2x2_backward<T>(const Shape4&, std::span<const std::uint32_t>, const Tensor4<T>&); \
    template Tensor4<T> upsample2x2<T>(const Tensor4<T>&);                                                     \
    template Tensor4<T> upsample2x2_backward<T>(const Tensor4<T>&);                                            \
    template Tensor4<T> batchnorm<T>(const Tensor4<T>&, std::span<const T>, std::span<const T>, Mode,          \
                                     BatchNormStats<T>&, BatchNormCache<T>*, double, double);                  \
    template BatchNormGrads<T> batchnorm_backward<T>(const BatchNormCache<T>&, std::span<const T>,             \
                                                     const Tensor4<T>&);                                       \
    template Tensor4<T> relu<T>(const Tensor4<T>&);                                                            \
    template Tensor4<T> relu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                                \
    template Tensor4<T> sigmoid<T>(const Tensor4<T>&);                                                         \
    template Tensor4<T> sigmoid_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                             \
    template Tensor4<T> softmax_channels<T>(const Tensor4<T>&);                                                \
    template Tensor4<T> softmax_channels_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                    \
    template void sobel_components<T>(const Tensor4<T>&, Tensor4<T>&, Tensor4<T>&);                            \
    template Tensor4<T> sobel_gradient_magnitude<T>(const Tensor4<T>&);                                        \
    template Tensor4<T> sobel_gradient_magnitude_backward<T>(const Tensor4<T>&, const Tensor4<T>&);            \
    template Tensor4<T> add<T>(const Tensor4<T>&, const Tensor4<T>&);                                          \
    template Tensor4<T> multiply<T>(const Tensor4<T>&, const Tensor4<T>&);                                     \
    template Tensor4<T> scale<T>(const Tensor4<T>&, T);                                                        \
    template void add_inplace<T>(Tensor4<T>&, const Tensor4<T>&);

XSEG_INSTANTIATE(float)
XSEG_INSTANTIATE(double)
#undef XSEG_INSTANTIATE

}  // namespace xseg
