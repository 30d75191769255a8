#pragma once

// Central finite-difference checks against the autodiff tape.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "epban/tensor.hpp"

namespace epban {

struct GradcheckOptions {
    double step = 1e-5;
    // 0 checks every element; otherwise a seeded sample of this many per tensor.
    std::size_t max_per_tensor = 0;
    std::uint64_t seed = 0x5eed;
};

struct GradcheckResult {
    std::string name;
    // max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf), worst input tensor
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;

    bool passed(double tol) const { return max_rel_error < tol; }
};

// f evaluates the op on `inputs` (handles are shared, so f may also close over
// them directly). Non-scalar outputs are reduced with a fixed random
// projection so every output element contributes.
template <class F, class T = double>
GradcheckResult gradcheck(std::string name, F&& f, std::vector<Tensor<T>> inputs, GradcheckOptions opt = {}) {
    GradcheckResult res;
    res.name = std::move(name);
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);

    Tensor<T> probe;
    auto objective = [&]() {
        Tensor<T> out = f(inputs);
        if (out.numel() == 1) return reshape(out, {});
        if (!probe.defined() || probe.shape() != out.shape()) {
            std::vector<T> w(out.numel());
            for (auto& v : w) v = static_cast<T>(u(rng));
            probe = Tensor<T>::from(out.shape(), std::move(w));
        }
        return sum(mul(out, probe));
    };

    for (auto& t : inputs) t.zero_grad();
    objective().backward();

    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad())
            for (std::size_t i = 0; i < analytic.size(); ++i) analytic[i] = static_cast<double>(t.grad()[i]);

        std::vector<std::size_t> idx(t.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opt.max_per_tensor && idx.size() > opt.max_per_tensor) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opt.max_per_tensor);
        }

        double amax = 0.0, nmax = 0.0, dmax = 0.0;
        auto data = t.data();
        for (auto i : idx) {
            const T keep = data[i];
            const T hi = static_cast<T>(keep + opt.step), lo = static_cast<T>(keep - opt.step);
            double plus, minus;
            {
                NoGradGuard ng;
                data[i] = hi;
                plus = static_cast<double>(objective().item());
                data[i] = lo;
                minus = static_cast<double>(objective().item());
            }
            data[i] = keep;
            // Divide by the step actually taken after rounding to T.
            const double numeric = (plus - minus) / (static_cast<double>(hi) - static_cast<double>(lo));
            amax = std::max(amax, std::abs(analytic[i]));
            nmax = std::max(nmax, std::abs(numeric));
            dmax = std::max(dmax, std::abs(analytic[i] - numeric));
            ++res.checked;
        }
        const double scale = std::max({amax, nmax, 1e-12});
        res.max_abs_error = std::max(res.max_abs_error, dmax);
        res.max_rel_error = std::max(res.max_rel_error, dmax / scale);
    }
    return res;
}

}  // namespace epban
