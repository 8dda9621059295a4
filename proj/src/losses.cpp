#include "xseg/losses.hpp"

#include <cmath>

#include "xseg/ops.hpp"

namespace xseg {

namespace {

struct DiceSums {
    double intersection = 0;
    double total = 0;
};

template <typename T>
DiceSums dice_sums(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    require_same_shape(y_true.shape(), y_pred.shape(), "dice");
    DiceSums s;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        s.intersection += static_cast<double>(y_true[i]) * static_cast<double>(y_pred[i]);
        s.total += static_cast<double>(y_true[i]) + static_cast<double>(y_pred[i]);
    }
    return s;
}

template <typename T>
void require_mask_shape(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    require_same_shape(y_true.shape(), y_pred.shape(), "boundary_loss");
    if (y_true.c() != 1) throw DimensionError("boundary_loss: expects single-channel masks, got " + y_true.shape().str());
}

}  // namespace

template <typename T>
double dice_score(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    const DiceSums s = dice_sums(y_true, y_pred);
    return (2.0 * s.intersection + kDiceSmoothing) / (s.total + kDiceSmoothing);
}

template <typename T>
double dice_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    return 1.0 - dice_score(y_true, y_pred);
}

template <typename T>
LossWithGrad<T> dice_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    const DiceSums s = dice_sums(y_true, y_pred);
    const double num = 2.0 * s.intersection + kDiceSmoothing;
    const double den = s.total + kDiceSmoothing;
    LossWithGrad<T> r{1.0 - num / den, Tensor4<T>(y_pred.shape())};
    // d/dp_i of -(num/den) = -(2 t_i den - num) / den^2
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < y_pred.size(); ++i)
        r.grad[i] = static_cast<T>(-(2.0 * static_cast<double>(y_true[i]) * den - num) * inv_den2);
    return r;
}

template <typename T>
double boundary_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    require_mask_shape(y_true, y_pred);
    const Tensor4<T> gt = sobel_gradient_magnitude(y_true);
    const Tensor4<T> gp = sobel_gradient_magnitude(y_pred);
    double sum = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) sum += std::abs(static_cast<double>(gt[i]) - static_cast<double>(gp[i]));
    return sum / static_cast<double>(gt.size());
}

template <typename T>
LossWithGrad<T> boundary_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred) {
    require_mask_shape(y_true, y_pred);
    const Tensor4<T> gt = sobel_gradient_magnitude(y_true);
    const Tensor4<T> gp = sobel_gradient_magnitude(y_pred);
    const double inv_n = 1.0 / static_cast<double>(gt.size());
    double sum = 0;
    Tensor4<T> grad_mag(gp.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const double d = static_cast<double>(gp[i]) - static_cast<double>(gt[i]);
        sum += std::abs(d);
        // sign(0) = 0
        grad_mag[i] = static_cast<T>(d > 0 ? inv_n : (d < 0 ? -inv_n : 0.0));
    }
    return LossWithGrad<T>{sum * inv_n, sobel_gradient_magnitude_backward(y_pred, grad_mag)};
}

template <typename T>
double combined_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred, const LossWeights& weights) {
    return weights.dice * dice_loss(y_true, y_pred) + weights.boundary * boundary_loss(y_true, y_pred);
}

template <typename T>
LossWithGrad<T> combined_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred,
                                        const LossWeights& weights) {
    LossWithGrad<T> d = dice_loss_with_grad(y_true, y_pred);
    LossWithGrad<T> b = boundary_loss_with_grad(y_true, y_pred);
    LossWithGrad<T> r{weights.dice * d.value + weights.boundary * b.value, Tensor4<T>(y_pred.shape())};
    for (std::size_t i = 0; i < r.grad.size(); ++i)
        r.grad[i] = static_cast<T>(weights.dice * static_cast<double>(d.grad[i]) +
                                   weights.boundary * static_cast<double>(b.grad[i]));
    return r;
}

#define XSEG_INSTANTIATE(T)                                                                              \
    template double dice_score<T>(const Tensor4<T>&, const Tensor4<T>&);                                 \
    template double dice_loss<T>(const Tensor4<T>&, const Tensor4<T>&);                                  \
    template LossWithGrad<T> dice_loss_with_grad<T>(const Tensor4<T>&, const Tensor4<T>&);               \
    template double boundary_loss<T>(const Tensor4<T>&, const Tensor4<T>&);                              \
    template LossWithGrad<T> boundary_loss_with_grad<T>(const Tensor4<T>&, const Tensor4<T>&);           \
    template double combined_loss<T>(const Tensor4<T>&, const Tensor4<T>&, const LossWeights&);          \
    template LossWithGrad<T> combined_loss_with_grad<T>(const Tensor4<T>&, const Tensor4<T>&, const LossWeights&);

XSEG_INSTANTIATE(float)
XSEG_INSTANTIATE(double)
#undef XSEG_INSTANTIATE

}  // namespace xseg
