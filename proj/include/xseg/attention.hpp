#pragma once

// Pixel-wise cross-slice attention (CSA) and the additive attention gate (AG).
//
//   CSA(x)   = x + x * softmax_c(W x + b)          (softmax over channels per pixel)
//   AG(x, g) = sigmoid(W_theta x + W_phi g + b) * x
//
// W, W_theta and W_phi are 1x1 convolutions. In skip connections the softmax runs
// over feature channels; at the input it runs over the stacked slices.

#include <span>
#include <vector>

#include "xseg/ops.hpp"

namespace xseg {

template <typename T>
struct CsaModule {
    ConvKernel<T> projection;  // 1x1, C -> C

    /// Zero weights and bias: the module starts as x -> (1 + 1/C) x.
    static CsaModule zeros(std::size_t channels) {
        CsaModule m;
        m.projection.weights = Tensor4<T>(Shape4{channels, channels, 1, 1});
        m.projection.bias.assign(channels, T(0));
        return m;
    }
};

template <typename T>
struct CsaCache {
    Tensor4<T> input;
    Tensor4<T> attention;  // softmax output, same shape as input
};

template <typename T>
struct CsaGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    std::vector<T> bias;
};

/// Throws DimensionError unless `weights` is a square 1x1 kernel over x's channels.
template <typename T>
Tensor4<T> csa_forward(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias,
                       CsaCache<T>* cache = nullptr);

template <typename T>
Tensor4<T> csa_forward(const Tensor4<T>& x, const CsaModule<T>& module, CsaCache<T>* cache = nullptr) {
    return csa_forward(x, module.projection.weights, std::span<const T>(module.projection.bias), cache);
}

/// The per-pixel channel distribution softmax(W x + b).
template <typename T>
Tensor4<T> csa_attention(const Tensor4<T>& x, const Tensor4<T>& weights, std::span<const T> bias);

template <typename T>
CsaGrads<T> csa_backward(const CsaCache<T>& cache, const Tensor4<T>& weights, std::span<const T> bias,
                         const Tensor4<T>& grad_out);

template <typename T>
struct AgBlock {
    Tensor4<T> theta;    // (C_x, C_x, 1, 1), encoder features
    Tensor4<T> phi;      // (C_x, C_g, 1, 1), gating signal
    std::vector<T> bias; // shared, length C_x

    static AgBlock zeros(std::size_t x_channels, std::size_t g_channels) {
        return AgBlock{Tensor4<T>(Shape4{x_channels, x_channels, 1, 1}),
                       Tensor4<T>(Shape4{x_channels, g_channels, 1, 1}), std::vector<T>(x_channels, T(0))};
    }
};

template <typename T>
struct AgCache {
    Tensor4<T> x;
    Tensor4<T> g;
    Tensor4<T> alpha;
};

template <typename T>
struct AgGrads {
    Tensor4<T> x;
    Tensor4<T> g;
    Tensor4<T> theta;
    Tensor4<T> phi;
    std::vector<T> bias;
};

/// x and g must agree in (n, h, w); this block does not resample.
template <typename T>
Tensor4<T> ag_forward(const Tensor4<T>& x, const Tensor4<T>& g, const Tensor4<T>& theta, const Tensor4<T>& phi,
                      std::span<const T> bias, AgCache<T>* cache = nullptr);

template <typename T>
Tensor4<T> ag_forward(const Tensor4<T>& x, const Tensor4<T>& g, const AgBlock<T>& block,
                      AgCache<T>* cache = nullptr) {
    return ag_forward(x, g, block.theta, block.phi, std::span<const T>(block.bias), cache);
}

/// The gate coefficients sigmoid(W_theta x + W_phi g + b).
template <typename T>
Tensor4<T> ag_coefficients(const Tensor4<T>& x, const Tensor4<T>& g, const Tensor4<T>& theta,
                           const Tensor4<T>& phi, std::span<const T> bias);

template <typename T>
AgGrads<T> ag_backward(const AgCache<T>& cache, const Tensor4<T>& theta, const Tensor4<T>& phi,
                       const Tensor4<T>& grad_out);

}  // namespace xseg
