#include "xseg/attention.hpp"

namespace xseg {

namespace {

void check_csa_projection(const Shape4& x, const Shape4& w, std::size_t bias_len) {
    if (w.h != 1 || w.w != 1) throw DimensionError("csa: projection must be 1x1, got " + w.str());
    if (w.n != x.c || w.c != x.c)
        throw DimensionError("csa: projection " + w.str() + " does not match input channels of " + x.str());
    if (bias_len != 0 && bias_len != x.c)
        throw DimensionError("csa: bias length " + std::to_string(bias_len) + " vs channels of " + x.str());
}

void check_ag_shapes(const Shape4& x, const Shape4& g, const Shape4& theta, const Shape4& phi,
                     std::size_t bias_len) {
    if (x.n != g.n || x.h != g.h || x.w != g.w)
        throw DimensionError("ag: encoder features " + x.str() + " and gating signal " + g.str() +
                             " differ spatially");
    if (theta.h != 1 || theta.w != 1 || phi.h != 1 || phi.w != 1)
        throw DimensionError("ag: theta/phi must be 1x1, got " + theta.str() + " / " + phi.str());
    if (theta.n != x.c || theta.c != x.c)
        throw DimensionError("ag: theta " + theta.str() + " does not map " + x.str() + " to its own channels");
    if (phi.n != x.c || phi.c != g.c)
        throw DimensionError("ag: phi " + phi.str() + " does not map " + g.str() + " to " + std::to_string(x.c) +
                             " channels");
    if (bias_len != x.c) throw DimensionError("ag: bias length " + std::to_string(bias_len) + " vs " + x.str());
}

template <typename T>
Tensor4<T> gate_logits(const Tensor4<T>& x, const Tensor4<T>& g, const Tensor4<T>& theta, const Tensor4<T>& phi,
                       std::span<const T> bias) {
    const ConvOptions one_by_one{Padding::Valid, 1};
    Tensor4<T> z = conv2d(x, theta, std::span<const T>{}, one_by_one);
    add_inplace(z, conv2d(g, phi, std::span<const T>{}, one_by_one));
    const std::size_t plane = z.shape().plane();
    for (std::size_t b = 0; b < z.n(); ++b)
        for (std::size_t c = 0; c < z.c(); ++c) {
            T* p = z.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
        }
    return z;
}

}  // namespace

template <typename T>
Tensor4<T> csa_attention(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias) {
    check_csa_projection(x.shape(), weights.shape(), bias.size());
    return softmax_channels(conv2d(x, weights, bias, ConvOptions{Padding::Valid, 1}));
}

template <typename T>
Tensor4<T> csa_forward(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias, CsaCache<T>* cache) {
    Tensor4<T> attention = csa_attention(x, weights, bias);
    Tensor4<T> out(x.shape());
    // x + x * a, factored so zero projections give exactly (1 + 1/C) x.
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * (T(1) + attention[i]);
    if (cache != nullptr) {
        cache->input = x;
        cache->attention = std::move(attention);
    }
    return out;
}

template <typename T>
CsaGrads<T> csa_backward(const CsaCache<T>& cache, const Tensor4<T>& weights, std::span<const T> bias,
                         const Tensor4<T>& grad_out) {
    const Tensor4<T>& x = cache.input;
    const Tensor4<T>& a = cache.attention;
    require_same_shape(x.shape(), grad_out.shape(), "csa_backward");
    check_csa_projection(x.shape(), weights.shape(), bias.size());

    Tensor4<T> grad_attention(x.shape());
    Tensor4<T> grad_x(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        grad_x[i] = grad_out[i] * (T(1) + a[i]);
        grad_attention[i] = grad_out[i] * x[i];
    }
    const Tensor4<T> grad_logits = softmax_channels_backward(a, grad_attention);
    ConvGrads<T> conv = conv2d_backward(x, weights, !bias.empty(), grad_logits, ConvOptions{Padding::Valid, 1});
    add_inplace(grad_x, conv.input);
    return CsaGrads<T>{std::move(grad_x), std::move(conv.weights), std::move(conv.bias)};
}

template <typename T>
Tensor4<T> ag_coefficients(const Tensor4<T>& x, const Tensor4<T>& g, const Tensor4<T>& theta,
                           const Tensor4<T>& phi, std::span<const T> bias) {
    check_ag_shapes(x.shape(), g.shape(), theta.shape(), phi.shape(), bias.size());
    return sigmoid(gate_logits(x, g, theta, phi, bias));
}

template <typename T>
Tensor4<T> ag_forward(const Tensor4<T>& x, const Tensor4<T>& g, const Tensor4<T>& theta, const Tensor4<T>& phi,
                      std::span<const T> bias, AgCache<T>* cache) {
    Tensor4<T> alpha = ag_coefficients(x, g, theta, phi, bias);
    Tensor4<T> out = multiply(alpha, x);
    if (cache != nullptr) {
        cache->x = x;
        cache->g = g;
        cache->alpha = std::move(alpha);
    }
    return out;
}

template <typename T>
AgGrads<T> ag_backward(const AgCache<T>& cache, const Tensor4<T>& theta, const Tensor4<T>& phi,
                       const Tensor4<T>& grad_out) {
    const Tensor4<T>& x = cache.x;
    const Tensor4<T>& alpha = cache.alpha;
    require_same_shape(x.shape(), grad_out.shape(), "ag_backward");
    check_ag_shapes(x.shape(), cache.g.shape(), theta.shape(), phi.shape(), x.c());

    Tensor4<T> grad_x(x.shape());
    Tensor4<T> grad_logits(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        grad_x[i] = grad_out[i] * alpha[i];
        grad_logits[i] = grad_out[i] * x[i] * alpha[i] * (T(1) - alpha[i]);
    }
    const ConvOptions one_by_one{Padding::Valid, 1};
    ConvGrads<T> through_theta = conv2d_backward(x, theta, false, grad_logits, one_by_one);
    ConvGrads<T> through_phi = conv2d_backward(cache.g, phi, false, grad_logits, one_by_one);
    add_inplace(grad_x, through_theta.input);

    std::vector<T> grad_bias(x.c(), T(0));
    const std::size_t plane = x.shape().plane();
    for (std::size_t c = 0; c < x.c(); ++c) {
        T acc = 0;
        for (std::size_t b = 0; b < x.n(); ++b) {
            const T* p = grad_logits.plane(b, c);
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        }
        grad_bias[c] = acc;
    }
    return AgGrads<T>{std::move(grad_x), std::move(through_phi.input), std::move(through_theta.weights),
                      std::move(through_phi.weights), std::move(grad_bias)};
}

#define XSEG_INSTANTIATE(T)                                                                                    \
    template Tensor4<T> csa_attention<T>(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>);            \
    template Tensor4<T> csa_forward<T>(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>, CsaCache<T>*); \
    template CsaGrads<T> csa_backward<T>(const CsaCache<T>&, const Tensor4<T>&, std::span<const T>,            \
                                         const Tensor4<T>&);                                                   \
    template Tensor4<T> ag_coefficients<T>(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&,            \
                                           const Tensor4<T>&, std::span<const T>);                             \
    template Tensor4<T> ag_forward<T>(const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&, \
                                      std::span<const T>, AgCache<T>*);                                        \
    template AgGrads<T> ag_backward<T>(const AgCache<T>&, const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&);

XSEG_INSTANTIATE(float)
XSEG_INSTANTIATE(double)
#undef XSEG_INSTANTIATE

}  // namespace xseg
