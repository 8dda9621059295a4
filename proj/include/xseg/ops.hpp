#pragma once

// Differentiable primitives over Tensor4. Every forward has a hand-written
// backward; convolutions use the cross-correlation convention (no kernel flip).

#include <cstdint>
#include <span>
#include <vector>

#include "xseg/tensor.hpp"

namespace xseg {

enum class Mode { Train, Eval };

enum class Padding { Same, Valid };

struct ConvOptions {
    Padding padding = Padding::Same;
    std::size_t stride = 1;
};

/// Owning convolution kernel: weights (C_out, C_in, k_h, k_w), bias (C_out) or empty.
template <typename T>
struct ConvKernel {
    Tensor4<T> weights;
    std::vector<T> bias;
    ConvOptions options{};

    std::size_t c_out() const { return weights.n(); }
    std::size_t c_in() const { return weights.c(); }
};

/// Output spatial shape for a convolution; throws DimensionError if the kernel does not fit.
Shape4 conv2d_output_shape(const Shape4& input, const Shape4& weights, const ConvOptions& opt);

/// `bias` may be empty (no bias term).
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& input, const Tensor4<T>& weights, std::span<const T> bias,
                  const ConvOptions& opt = {});

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& input, const ConvKernel<T>& kernel) {
    return conv2d(input, kernel.weights, std::span<const T>(kernel.bias), kernel.options);
}

template <typename T>
struct ConvGrads {
    Tensor4<T> input;
    Tensor4<T> weights;
    std::vector<T> bias;  // empty when the forward had no bias
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& input, const Tensor4<T>& weights, bool has_bias,
                             const Tensor4<T>& grad_out, const ConvOptions& opt = {});

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& input, const ConvKernel<T>& kernel, const Tensor4<T>& grad_out) {
    return conv2d_backward(input, kernel.weights, !kernel.bias.empty(), grad_out, kernel.options);
}

template <typename T>
struct PoolResult {
    Tensor4<T> output;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling, stride 2. Ties go to the first element in row-major window order.
template <typename T>
PoolResult<T> maxpool2x2(const Tensor4<T>& input);

template <typename T>
Tensor4<T> maxpool2x2_backward(const Shape4& input_shape, std::span<const std::uint32_t> argmax,
                               const Tensor4<T>& grad_out);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor4<T> upsample2x2(const Tensor4<T>& input);

template <typename T>
Tensor4<T> upsample2x2_backward(const Tensor4<T>& grad_out);

template <typename T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormStats(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

template <typename T>
struct BatchNormCache {
    Tensor4<T> x_hat;
    std::vector<T> inv_std;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalisation over (n, h, w). Train mode uses batch statistics and
/// updates `stats` by exponential moving average (unbiased variance); eval mode reads
/// `stats` only. `cache` is filled in train mode when non-null.
template <typename T>
Tensor4<T> batchnorm(const Tensor4<T>& input, std::span<const T> gamma, std::span<const T> beta, Mode mode,
                     BatchNormStats<T>& stats, BatchNormCache<T>* cache = nullptr, double eps = kBatchNormEps,
                     double momentum = kBatchNormMomentum);

template <typename T>
struct BatchNormGrads {
    Tensor4<T> input;
    std::vector<T> gamma;
    std::vector<T> beta;
};

/// Backward of a train-mode batchnorm.
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                     const Tensor4<T>& grad_out);

template <typename T>
Tensor4<T> relu(const Tensor4<T>& input);

/// Subgradient 0 at exactly 0.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out);

template <typename T>
Tensor4<T> sigmoid(const Tensor4<T>& input);

/// Takes the forward *output*.
template <typename T>
Tensor4<T> sigmoid_backward(const Tensor4<T>& output, const Tensor4<T>& grad_out);

/// Softmax over channels at every (n, h, w), max-subtracted.
template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& input);

/// Takes the forward *output*.
template <typename T>
Tensor4<T> softmax_channels_backward(const Tensor4<T>& output, const Tensor4<T>& grad_out);

inline constexpr double kSobelEps = 1e-12;

/// sqrt(Gx^2 + Gy^2) with the 3x3 Sobel pair; borders by edge replication. Requires C == 1.
template <typename T>
Tensor4<T> sobel_gradient_magnitude(const Tensor4<T>& input);

/// Raw Sobel responses, for inspection and tests.
template <typename T>
void sobel_components(const Tensor4<T>& input, Tensor4<T>& gx, Tensor4<T>& gy);

template <typename T>
Tensor4<T> sobel_gradient_magnitude_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out);

// Elementwise helpers used by the attention blocks and the network.
template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b);

template <typename T>
Tensor4<T> multiply(const Tensor4<T>& a, const Tensor4<T>& b);

template <typename T>
Tensor4<T> scale(const Tensor4<T>& a, T factor);

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& b);

}  // namespace xseg
