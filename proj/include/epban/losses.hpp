#pragma once

// Quality regression loss and the normalized distortion + perceptual mixture
// used for closed-loop SR optimization.

#include <cmath>
#include <span>

#include "epban/pban.hpp"
#include "epban/ssim.hpp"

namespace epban {

inline constexpr double kDenominatorEps = 1e-6;

struct LossWeights {
    double alpha = 0.5;  // distortion (SSIM) term
    double beta = 0.5;   // perceptual (metric) term

    void validate() const {
        if (!(alpha >= 0.0 && beta >= 0.0 && std::isfinite(alpha) && std::isfinite(beta)))
            throw ValidationError("loss weights must be finite and nonnegative");
        if (!(alpha + beta > 0.0)) throw ValidationError("loss weights must not both be zero");
    }
};

// Mean over the batch of (q_hat - q)^2. q_hat has one value per item.
template <class T>
Tensor<T> quality_regression_loss(const Tensor<T>& q_hat, std::span<const double> mos) {
    if (q_hat.numel() != mos.size())
        throw ShapeError("quality_regression_loss: " + std::to_string(q_hat.numel()) + " predictions for " +
                         std::to_string(mos.size()) + " scores");
    std::vector<T> target(mos.size());
    for (std::size_t i = 0; i < mos.size(); ++i) {
        if (!std::isfinite(mos[i])) throw ValidationError("quality_regression_loss: non-finite target score");
        target[i] = static_cast<T>(mos[i]);
    }
    auto q = reshape(q_hat, {q_hat.numel()});
    return mean(square(sub(q, Tensor<T>::from({mos.size()}, std::move(target)))));
}

template <class T>
Tensor<T> quality_regression_loss(const Tensor<T>& q_hat, double mos) {
    return quality_regression_loss(q_hat, std::span<const double>(&mos, 1));
}

enum class Denominator {
    stop_gradient,  // (a L_D + b L_P) / const(|L_D + L_P| + eps)
    literal,        // a L_D/(L_D+L_P) + b L_P/(L_D+L_P), differentiated as written
};

template <class T>
struct CombinedLoss {
    Tensor<T> loss;
    Tensor<T> distortion;  // L_D = -ssim
    Tensor<T> perceptual;  // L_P = -mean q_hat
    double denominator = 0.0;
};

// L_P term alone: negative mean predicted quality in eval mode.
template <class T>
Tensor<T> perceptual_loss(const Tensor<T>& x_sr, const Tensor<T>& x_hr, const PbanModel<T>& metric) {
    if (!metric.is_frozen())
        throw ContractError("perceptual loss needs a frozen metric; call freeze() before closed-loop optimization");
    return neg(mean(pban_forward(metric, x_sr, x_hr, Mode::eval)));
}

template <class T>
Tensor<T> distortion_loss(const Tensor<T>& x_sr, const Tensor<T>& x_hr, const SsimConfig& cfg) {
    return neg(ssim(x_sr, x_hr, cfg));
}

template <class T>
CombinedLoss<T> combined_loss(const Tensor<T>& x_sr, const Tensor<T>& x_hr, const PbanModel<T>& metric,
                              const SsimConfig& cfg, const LossWeights& w,
                              Denominator mode = Denominator::stop_gradient) {
    w.validate();
    CombinedLoss<T> out;
    out.perceptual = perceptual_loss(x_sr, x_hr, metric);
    out.distortion = distortion_loss(x_sr, x_hr, cfg);
    const T a = static_cast<T>(w.alpha), b = static_cast<T>(w.beta);
    if (mode == Denominator::stop_gradient) {
        const double total = static_cast<double>(out.distortion.item()) + static_cast<double>(out.perceptual.item());
        out.denominator = std::abs(total) + kDenominatorEps;
        auto mix = add(scale(out.distortion, a), scale(out.perceptual, b));
        out.loss = scale(mix, static_cast<T>(1.0 / out.denominator));
    } else {
        auto total = add(out.distortion, out.perceptual);
        out.denominator = static_cast<double>(total.item());
        out.loss = add(scale(div(out.distortion, total), a), scale(div(out.perceptual, total), b));
    }
    return out;
}

}  // namespace epban
