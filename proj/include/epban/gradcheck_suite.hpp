#pragma once

// Finite-difference suite over every differentiable op, the metric's blocks,
// SSIM, the combined loss and the full x_sr -> q_hat network in eval mode.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "epban/gradcheck.hpp"
#include "epban/losses.hpp"
#include "epban/ops.hpp"
#include "epban/pban.hpp"
#include "epban/seed.hpp"
#include "epban/ssim.hpp"

namespace epban {

template <class T>
struct GradcheckDefaults;
template <>
struct GradcheckDefaults<double> {
    static constexpr double step = 1e-5, tolerance = 1e-4;
};
template <>
struct GradcheckDefaults<float> {
    static constexpr double step = 3e-3, tolerance = 5e-2;
};

namespace detail {

template <class T>
Tensor<T> suite_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(u(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), grad);
}

}  // namespace detail

template <class T>
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 7, double step = GradcheckDefaults<T>::step) {
    using Tn = Tensor<T>;
    std::mt19937_64 rng(seed);
    auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0, bool grad = true) {
        return detail::suite_tensor<T>(std::move(s), rng, lo, hi, grad);
    };
    GradcheckOptions opt;
    opt.step = step;
    opt.seed = seed;
    std::vector<GradcheckResult> out;
    auto check = [&](const std::string& name, std::function<Tn()> fn, std::vector<Tn> inputs) {
        out.push_back(gradcheck(name, [&](auto&) { return fn(); }, std::move(inputs), opt));
    };

    auto a = rnd({2, 4, 4, 4}), b = rnd({2, 4, 4, 4}), c = rnd({1, 4, 1, 1});
    auto pos = rnd({2, 4, 4, 4}, 0.5, 2.0);
    auto w = rnd({3, 8}), bias = rnd({3}), v = rnd({2, 8});
    check("add", [&] { return add(a, c); }, {a, c});
    check("sub", [&] { return sub(a, c); }, {a, c});
    check("mul", [&] { return mul(a, b); }, {a, b});
    check("div", [&] { return div(a, pos); }, {a, pos});
    check("scale", [&] { return scale(a, T(-1.5)); }, {a});
    check("add_scalar", [&] { return add_scalar(a, T(0.25)); }, {a});
    check("square", [&] { return square(a); }, {a});
    check("relu", [&] { return relu(a); }, {a});
    check("sigmoid", [&] { return sigmoid(a); }, {a});
    check("sum", [&] { return sum(a); }, {a});
    check("mean", [&] { return mean(a); }, {a});
    check("reshape", [&] { return reshape(a, {2, 64}); }, {a});
    check("permute", [&] { return permute(a, {0, 3, 1, 2}); }, {a});
    check("concat", [&] { return concat<T>({a, b}, 1); }, {a, b});
    check("flatten", [&] { return flatten(a); }, {a});
    check("linear", [&] { return linear(v, w, bias); }, {v, w, bias});
    check("dropout_eval", [&] { return dropout(a, 0.2, Mode::eval, nullptr); }, {a});
    check("mean_pool2d_global", [&] { return mean_pool2d_global(a); }, {a});
    check("avg_pool2d", [&] { return avg_pool2d(a, 2); }, {a});
    check("pixel_shuffle", [&] { return pixel_shuffle(a, 2); }, {a});
    check("pixel_unshuffle", [&] { return pixel_unshuffle(a, 2); }, {a});
    check("channel_shuffle", [&] { return channel_shuffle(a, 2); }, {a});

    auto ma = rnd({2, 3, 4}), mb = rnd({4, 5});
    check("matmul", [&] { return matmul(ma, mb); }, {ma, mb});
    auto sx = rnd({5, 3, 4}, -2.0, 2.0);
    check("softmax", [&] { return softmax(sx, 0); }, {sx});
    check("stddev_all", [&] { return stddev_all(sx, {0}); }, {sx});

    auto cx = rnd({2, 3, 6, 6}), cw = rnd({4, 3, 3, 3}), cb = rnd({4}), cw1 = rnd({4, 3, 1, 1});
    check("conv2d", [&] { return conv2d(cx, cw, cb, {1, 1}); }, {cx, cw, cb});
    check("conv2d_stride2", [&] { return conv2d(cx, cw, cb, {2, 1}); }, {cx, cw, cb});
    check("conv2d_valid", [&] { return conv2d(cx, cw, cb, {1, 0}); }, {cx, cw, cb});
    check("conv2d_1x1", [&] { return conv2d(cx, cw1, cb); }, {cx, cw1, cb});

    auto ia = rnd({1, 3, 16, 16}, 0.0, 1.0), ib = rnd({1, 3, 16, 16}, 0.0, 1.0);
    check("ssim", [&] { return ssim(ia, ib); }, {ia, ib});

    auto m = PbanModel<T>::initialized({8, 1e-8, 0.2}, derive_seed(seed, "gradcheck.model"));
    auto f = rnd({1, 8, 4, 4}), g = rnd({1, 8, 4, 4});
    check("qkv_project", [&] {
        auto t = qkv_project(m, f, Branch::sr, Axis::width);
        return concat<T>({t.q, t.k, t.v}, 1);
    }, {f, m.attn_sr.width.q.weight, m.attn_sr.width.k.bias});
    auto q = rnd({1, 8, 4, 4}), k = rnd({1, 8, 4, 4}), vv = rnd({1, 8, 4, 4});
    check("attention_map_height", [&] { return attention_map(q, k, Axis::height, 1e-8); }, {q, k});
    check("attention_map_width", [&] { return attention_map(q, k, Axis::width, 1e-8); }, {q, k});
    check("axial_cross_attention", [&] { return axial_cross_attention(q, k, vv, Axis::height, 1e-8); }, {q, k, vv});
    check("pba_plus", [&] {
        auto o = pba_plus_forward(m, f, g);
        return concat<T>({o.o_hr_to_sr, o.o_sr_to_hr}, 1);
    }, {f, g, m.attn_hr.height.v.weight});
    AxialAttentionOutput<T> att{rnd({1, 8, 4, 4}), rnd({1, 8, 4, 4})};
    check("subec", [&] {
        auto [x, y] = subec_fuse(m, att, f, g);
        return concat<T>({x, y}, 1);
    }, {f, g, att.o_hr_to_sr, att.o_sr_to_hr, m.subec_hr_to_sr.spatial.weight});
    check("quality_head", [&] { return quality_head_forward(m, att.o_hr_to_sr, att.o_sr_to_hr, Mode::eval); },
          {att.o_hr_to_sr, att.o_sr_to_hr, m.fuse1.weight});

    auto xs = rnd({1, 3, 16, 16}, 0.0, 1.0), xh = rnd({1, 3, 16, 16}, 0.0, 1.0, false);
    check("pban_full_eval", [&] { return pban_forward(m, xs, xh, Mode::eval); }, {xs});

    // The stop-gradient denominator is checked by denominator_diagnostic; here
    // the literal form is differentiated end to end.
    auto frozen = m.clone();
    frozen.freeze();
    check("combined_loss_literal", [&] {
        return combined_loss(xs, xh, frozen, SsimConfig{}, LossWeights{0.7, 0.3}, Denominator::literal).loss;
    }, {xs});
    return out;
}

// Gradient of the combined loss with respect to x_sr, and the separately
// computed branch gradients, for the degeneracy and two-pass diagnostics.
struct DenominatorDiagnostic {
    double max_abs_gradient = 0.0;   // combined loss as configured
    double max_abs_oracle_diff = 0.0;  // vs (a grad L_D + b grad L_P) / den, stop-gradient only
    double denominator = 0.0;
};

inline DenominatorDiagnostic denominator_diagnostic(const LossWeights& w, Denominator mode, std::uint64_t seed = 7) {
    using Tn = Tensor<double>;
    std::mt19937_64 rng(seed);
    auto m = PbanModel<double>::initialized({8, 1e-8, 0.2}, derive_seed(seed, "gradcheck.model"));
    m.freeze();
    Tn xs = detail::suite_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tn xh = detail::suite_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0, false);
    auto grad_of = [&](const Tn& loss) {
        xs.zero_grad();
        loss.backward();
        return std::vector<double>(xs.grad().begin(), xs.grad().end());
    };
    DenominatorDiagnostic d;
    auto cl = combined_loss(xs, xh, m, SsimConfig{}, w, mode);
    d.denominator = cl.denominator;
    const auto g = grad_of(cl.loss);
    for (double v : g) d.max_abs_gradient = std::max(d.max_abs_gradient, std::abs(v));
    if (mode == Denominator::stop_gradient) {
        const auto gd = grad_of(distortion_loss(xs, xh, SsimConfig{}));
        const auto gp = grad_of(perceptual_loss(xs, xh, m));
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double oracle = (w.alpha * gd[i] + w.beta * gp[i]) / d.denominator;
            d.max_abs_oracle_diff = std::max(d.max_abs_oracle_diff, std::abs(g[i] - oracle));
        }
    }
    return d;
}

}  // namespace epban
