#pragma once

// Differentiable SSIM on BT.601 luma with valid-mode Gaussian windows.

#include <cmath>

#include "epban/image.hpp"
#include "epban/ops.hpp"

namespace epban {

struct SsimConfig {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;

    void validate() const {
        if (window == 0 || window % 2 == 0) throw ValidationError("ssim window must be odd and positive");
        if (!(sigma > 0.0)) throw ValidationError("ssim sigma must be positive");
        if (!(k1 > 0.0 && k2 > 0.0)) throw ValidationError("ssim K1 and K2 must be positive");
        if (!(dynamic_range > 0.0)) throw ValidationError("ssim dynamic range must be positive");
    }

    // Normalized 2-D window, row-major window x window.
    std::vector<double> gaussian_window() const {
        std::vector<double> g(window);
        const double c = static_cast<double>(window / 2);
        double total = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
            const double d = static_cast<double>(i) - c;
            total += g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        }
        for (auto& v : g) v /= total;
        std::vector<double> w(window * window);
        for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j) w[i * window + j] = g[i] * g[j];
        return w;
    }
};

inline constexpr double kLumaWeights[3] = {0.299, 0.587, 0.114};

template <class T>
Tensor<T> luma(const Tensor<T>& rgb) {
    if (rgb.rank() != 4 || rgb.dim(1) != 3) throw ShapeError("luma: expected [B,3,H,W], got " + shape_str(rgb.shape()));
    auto w = Tensor<T>::from({1, 3, 1, 1}, {T(kLumaWeights[0]), T(kLumaWeights[1]), T(kLumaWeights[2])});
    return conv2d(rgb, w, Tensor<T>{});
}

// Mean local SSIM over every valid window position and batch item.
template <class T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimConfig& cfg = {}) {
    cfg.validate();
    if (a.shape() != b.shape())
        throw ShapeError("ssim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.rank() != 4 || a.dim(1) != 3) throw ShapeError("ssim: expected [B,3,H,W], got " + shape_str(a.shape()));
    if (a.dim(2) < cfg.window || a.dim(3) < cfg.window)
        throw ShapeError("ssim: image " + std::to_string(a.dim(2)) + "x" + std::to_string(a.dim(3)) +
                         " smaller than the " + std::to_string(cfg.window) + "x" + std::to_string(cfg.window) +
                         " window");
    const auto wd = cfg.gaussian_window();
    auto win = Tensor<T>::from({1, 1, cfg.window, cfg.window}, std::vector<T>(wd.begin(), wd.end()));
    const Tensor<T> none;
    auto x = luma(a);
    auto y = luma(b);
    auto mu_x = conv2d(x, win, none);
    auto mu_y = conv2d(y, win, none);
    auto mu_xx = mul(mu_x, mu_x);
    auto mu_yy = mul(mu_y, mu_y);
    auto mu_xy = mul(mu_x, mu_y);
    auto var_x = sub(conv2d(mul(x, x), win, none), mu_xx);
    auto var_y = sub(conv2d(mul(y, y), win, none), mu_yy);
    auto cov = sub(conv2d(mul(x, y), win, none), mu_xy);
    const T c1 = static_cast<T>(std::pow(cfg.k1 * cfg.dynamic_range, 2));
    const T c2 = static_cast<T>(std::pow(cfg.k2 * cfg.dynamic_range, 2));
    auto num = mul(add_scalar(scale(mu_xy, T(2)), c1), add_scalar(scale(cov, T(2)), c2));
    auto den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
    return mean(div(num, den));
}

// Non-differentiable convenience on images, evaluated in f64.
inline double ssim(const Image& a, const Image& b, const SsimConfig& cfg = {}) {
    NoGradGuard ng;
    return ssim(to_tensor<double>(a), to_tensor<double>(b), cfg).item();
}

}  // namespace epban
