#pragma once

// Training losses. All sums run over every element of the batch tensor, so a batch
// is scored as one volume of pixels.
//
//   Dice(t, p)      = (2 sum(t p) + 1) / (sum(t) + sum(p) + 1)
//   L_dice          = 1 - Dice
//   L_boundary      = mean |sobel(t) - sobel(p)|      (sobel = gradient magnitude)
//   L_combined      = w_dice L_dice + w_boundary L_boundary,  default (0.9, 0.1)

#include "xseg/tensor.hpp"

namespace xseg {

inline constexpr double kDiceSmoothing = 1.0;

struct LossWeights {
    double dice = 0.9;
    double boundary = 0.1;
};

template <typename T>
struct LossWithGrad {
    double value = 0;
    Tensor4<T> grad;  // d loss / d y_pred
};

template <typename T>
double dice_score(const Tensor4<T>& y_true, const Tensor4<T>& y_pred);

template <typename T>
double dice_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred);

template <typename T>
LossWithGrad<T> dice_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred);

/// Requires single-channel inputs.
template <typename T>
double boundary_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred);

template <typename T>
LossWithGrad<T> boundary_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred);

template <typename T>
double combined_loss(const Tensor4<T>& y_true, const Tensor4<T>& y_pred, const LossWeights& weights = {});

template <typename T>
LossWithGrad<T> combined_loss_with_grad(const Tensor4<T>& y_true, const Tensor4<T>& y_pred,
                                        const LossWeights& weights = {});

}  // namespace xseg
