#pragma once

// Efficient-PBAN: a full-reference quality predictor built from a shared
// convolutional stem, separated SR/HR branches, bi-directional axial
// cross-attention, SubEC gated fusion and a pooled MLP head.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "epban/ops.hpp"

namespace epban {

enum class Branch { sr, hr };
enum class Axis { height, width };

template <class T>
struct ConvParam {
    Tensor<T> weight;  // [O,C,K,K]
    Tensor<T> bias;    // [O]
};

template <class T>
struct LinearParam {
    Tensor<T> weight;  // [O,I]
    Tensor<T> bias;    // [O]
};

template <class T>
struct ResidualBlock {
    ConvParam<T> conv1, conv2;
};

template <class T>
struct AxisProjection {
    ConvParam<T> q, k, v;
};

template <class T>
struct BranchAttention {
    AxisProjection<T> height, width;
    AxisProjection<T>& axis(Axis a) { return a == Axis::height ? height : width; }
    const AxisProjection<T>& axis(Axis a) const { return a == Axis::height ? height : width; }
};

template <class T>
struct SubEcParams {
    LinearParam<T> channel;   // C -> C, channel gate
    ConvParam<T> subpixel;    // 1x1, 4C -> 4C at half resolution
    ConvParam<T> spatial;     // 1x1, C -> 1, spatial gate
};

template <class T>
struct DirectionHead {
    LinearParam<T> fc1;  // C -> C/2
    LinearParam<T> fc2;  // C/2 -> C/4
};

struct PbanConfig {
    std::size_t channels = 16;
    double eps = 1e-8;
    double dropout = 0.2;

    void validate() const {
        // The quality head additionally needs C >= 8; blocks below it work from C = 4.
        if (channels < 4 || channels % 4) throw ValidationError("PBAN channel count must be a positive multiple of 4");
        if (!(eps > 0.0)) throw ValidationError("attention eps must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0,1)");
    }
};

template <class T>
struct QkvTriple {
    Tensor<T> q, k, v;
};

template <class T>
struct AxialAttentionOutput {
    Tensor<T> o_hr_to_sr;
    Tensor<T> o_sr_to_hr;
};

template <class T>
class PbanModel {
public:
    PbanConfig config;
    ConvParam<T> stem_conv;
    ResidualBlock<T> layer1;
    ResidualBlock<T> branch_sr, branch_hr;
    BranchAttention<T> attn_sr, attn_hr;
    SubEcParams<T> subec_hr_to_sr, subec_sr_to_hr;
    DirectionHead<T> head_hr_to_sr, head_sr_to_hr;
    LinearParam<T> fuse1, fuse2;

    // All parameters zero-filled with their final shapes.
    explicit PbanModel(PbanConfig cfg = {}) : config(cfg) {
        config.validate();
        const std::size_t C = config.channels;
        stem_conv = conv(3, C, 3);
        layer1 = block(C);
        branch_sr = block(C);
        branch_hr = block(C);
        for (auto* a : {&attn_sr, &attn_hr})
            for (auto* p : {&a->height, &a->width}) *p = {conv(C, C, 1), conv(C, C, 1), conv(C, C, 1)};
        for (auto* s : {&subec_hr_to_sr, &subec_sr_to_hr}) *s = {lin(C, C), conv(4 * C, 4 * C, 1), conv(C, 1, 1)};
        for (auto* h : {&head_hr_to_sr, &head_sr_to_hr}) *h = {lin(C, C / 2), lin(C / 2, C / 4)};
        fuse1 = lin(C / 2, C / 4);
        fuse2 = lin(C / 4, 1);
    }

    static PbanModel initialized(PbanConfig cfg, std::uint64_t seed) {
        PbanModel m(cfg);
        m.initialize(seed);
        return m;
    }

    // Kaiming-normal convolutions, uniform(+-1/sqrt(fan_in)) linear layers.
    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        visit([&](const std::string& name, Tensor<T>& t) {
            auto d = t.data();
            const bool is_bias = name.ends_with(".bias");
            if (t.rank() == 4) {
                if (is_bias) return;
                const double fan_in = static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3));
                double sd = std::sqrt(2.0 / fan_in);
                if (name.find(".conv2.") != std::string::npos) sd *= 0.5;  // residual branch
                std::normal_distribution<double> n(0.0, sd);
                for (auto& v : d) v = static_cast<T>(n(rng));
                if (name == "stem.conv.weight") remove_dc(t);
            } else {
                const double fan_in = t.rank() == 2 ? static_cast<double>(t.dim(1)) : 0.0;
                if (fan_in == 0.0) return;
                const double bound = 1.0 / std::sqrt(fan_in);
                std::uniform_real_distribution<double> u(-bound, bound);
                for (auto& v : d) v = static_cast<T>(u(rng));
            }
        });
        // Linear biases follow their weight's fan-in; conv biases stay zero.
        visit_linear([&](LinearParam<T>& l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.dim(1)));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (auto& v : l.bias.data()) v = static_cast<T>(u(rng));
        });
    }

    // Visits every parameter in a fixed order with its checkpoint name.
    template <class F>
    void visit(F&& f) {
        auto c = [&](const std::string& n, ConvParam<T>& p) {
            f(n + ".weight", p.weight);
            f(n + ".bias", p.bias);
        };
        auto l = [&](const std::string& n, LinearParam<T>& p) {
            f(n + ".weight", p.weight);
            f(n + ".bias", p.bias);
        };
        auto r = [&](const std::string& n, ResidualBlock<T>& b) {
            c(n + ".conv1", b.conv1);
            c(n + ".conv2", b.conv2);
        };
        c("stem.conv", stem_conv);
        r("stem.layer1", layer1);
        r("branch_sr", branch_sr);
        r("branch_hr", branch_hr);
        for (auto [n, a] : {std::pair{"attn_sr", &attn_sr}, std::pair{"attn_hr", &attn_hr}})
            for (auto [an, p] : {std::pair{".height", &a->height}, std::pair{".width", &a->width}}) {
                const std::string base = std::string(n) + an;
                c(base + ".q", p->q);
                c(base + ".k", p->k);
                c(base + ".v", p->v);
            }
        for (auto [n, s] : {std::pair{"subec_hr_to_sr", &subec_hr_to_sr}, std::pair{"subec_sr_to_hr", &subec_sr_to_hr}}) {
            l(std::string(n) + ".channel", s->channel);
            c(std::string(n) + ".subpixel", s->subpixel);
            c(std::string(n) + ".spatial", s->spatial);
        }
        for (auto [n, h] : {std::pair{"head_hr_to_sr", &head_hr_to_sr}, std::pair{"head_sr_to_hr", &head_sr_to_hr}}) {
            l(std::string(n) + ".fc1", h->fc1);
            l(std::string(n) + ".fc2", h->fc2);
        }
        l("fuse1", fuse1);
        l("fuse2", fuse2);
    }

    template <class F>
    void visit(F&& f) const {
        const_cast<PbanModel*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, static_cast<const Tensor<T>&>(t)); });
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, t); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
        return n;
    }

    static bool is_stem(const std::string& name) { return name.starts_with("stem."); }

    void set_trainable(bool on) {
        visit([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
    }
    void set_stem_trainable(bool on) {
        visit([&](const std::string& n, Tensor<T>& t) {
            if (is_stem(n)) t.set_requires_grad(on);
        });
    }
    void freeze() { set_trainable(false); }

    // Frozen means no parameter participates in gradient flow.
    bool is_frozen() const {
        bool frozen = true;
        visit([&](const std::string&, const Tensor<T>& t) { frozen = frozen && !t.requires_grad(); });
        return frozen;
    }

    void zero_grad() {
        visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    // Deep copy with the same precision or a different one.
    template <class U = T>
    PbanModel<U> clone() const {
        PbanModel<U> out(config);
        std::vector<Tensor<U>> dst;
        out.visit([&](const std::string&, Tensor<U>& t) { dst.push_back(t); });
        std::size_t i = 0;
        visit([&](const std::string&, const Tensor<T>& t) {
            auto d = dst[i++].data();
            for (std::size_t k = 0; k < d.size(); ++k) d[k] = static_cast<U>(t.values()[k]);
            dst[i - 1].set_requires_grad(t.requires_grad());
        });
        return out;
    }

    // Copies the SR-side parameters onto their HR-side and reverse-direction
    // counterparts, making the network symmetric in its two inputs.
    void tie_branches() {
        copy(branch_sr, branch_hr);
        for (auto a : {Axis::height, Axis::width}) {
            copy(attn_sr.axis(a).q, attn_hr.axis(a).q);
            copy(attn_sr.axis(a).k, attn_hr.axis(a).k);
            copy(attn_sr.axis(a).v, attn_hr.axis(a).v);
        }
        copy(subec_hr_to_sr.channel, subec_sr_to_hr.channel);
        copy(subec_hr_to_sr.subpixel, subec_sr_to_hr.subpixel);
        copy(subec_hr_to_sr.spatial, subec_sr_to_hr.spatial);
        copy(head_hr_to_sr.fc1, head_sr_to_hr.fc1);
        copy(head_hr_to_sr.fc2, head_sr_to_hr.fc2);
    }

    const ResidualBlock<T>& branch(Branch b) const { return b == Branch::sr ? branch_sr : branch_hr; }
    const BranchAttention<T>& attention(Branch b) const { return b == Branch::sr ? attn_sr : attn_hr; }

private:
    static ConvParam<T> conv(std::size_t in, std::size_t out, std::size_t k) {
        return {Tensor<T>::zeros({out, in, k, k}, true), Tensor<T>::zeros({out}, true)};
    }
    static LinearParam<T> lin(std::size_t in, std::size_t out) {
        return {Tensor<T>::zeros({out, in}, true), Tensor<T>::zeros({out}, true)};
    }
    static ResidualBlock<T> block(std::size_t c) { return {conv(c, c, 3), conv(c, c, 3)}; }

    template <class F>
    void visit_linear(F&& f) {
        for (auto* s : {&subec_hr_to_sr, &subec_sr_to_hr}) f(s->channel);
        for (auto* h : {&head_hr_to_sr, &head_sr_to_hr}) {
            f(h->fc1);
            f(h->fc2);
        }
        f(fuse1);
        f(fuse2);
    }

    // Zero-mean taps per (output, input) kernel: the stem sees edges and
    // texture rather than flat color.
    static void remove_dc(Tensor<T>& w) {
        auto d = w.data();
        const std::size_t k = w.dim(2) * w.dim(3);
        for (std::size_t s = 0; s < d.size(); s += k) {
            double m = 0.0;
            for (std::size_t i = 0; i < k; ++i) m += static_cast<double>(d[s + i]);
            m /= static_cast<double>(k);
            for (std::size_t i = 0; i < k; ++i) d[s + i] = static_cast<T>(static_cast<double>(d[s + i]) - m);
        }
    }

    static void copy_tensor(const Tensor<T>& src, Tensor<T>& dst) {
        auto d = dst.data();
        std::copy(src.values().begin(), src.values().end(), d.begin());
    }
    template <class P>
    static void copy(const P& src, P& dst) {
        copy_tensor(src.weight, dst.weight);
        copy_tensor(src.bias, dst.bias);
    }
    static void copy(const ResidualBlock<T>& src, ResidualBlock<T>& dst) {
        copy(src.conv1, dst.conv1);
        copy(src.conv2, dst.conv2);
    }
};

template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ConvParam<T>& p, std::size_t stride = 1) {
    const std::size_t pad = p.weight.dim(2) / 2;
    return conv2d(x, p.weight, p.bias, {stride, pad});
}

template <class T>
Tensor<T> apply_linear(const Tensor<T>& x, const LinearParam<T>& p) {
    return linear(x, p.weight, p.bias);
}

// relu(x + conv2(relu(conv1(x))))
template <class T>
Tensor<T> residual_forward(const Tensor<T>& x, const ResidualBlock<T>& b) {
    auto h = relu(apply_conv(x, b.conv1));
    return relu(add(x, apply_conv(h, b.conv2)));
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> extract_features(const PbanModel<T>& m, const Tensor<T>& x_sr, const Tensor<T>& x_hr) {
    if (x_sr.shape() != x_hr.shape())
        throw ShapeError("extract_features: SR " + shape_str(x_sr.shape()) + " and HR " + shape_str(x_hr.shape()) +
                         " differ");
    if (x_sr.rank() != 4 || x_sr.dim(1) != 3)
        throw ShapeError("extract_features: expected [B,3,H,W], got " + shape_str(x_sr.shape()));
    if (x_sr.dim(2) % 4 || x_sr.dim(3) % 4)
        throw ShapeError("extract_features: height and width must be divisible by 4 (stride-2 stem x shuffle factor 2), got " +
                         shape_str(x_sr.shape()));
    auto stem = [&](const Tensor<T>& x) { return residual_forward(relu(apply_conv(x, m.stem_conv, 2)), m.layer1); };
    return {residual_forward(stem(x_sr), m.branch_sr), residual_forward(stem(x_hr), m.branch_hr)};
}

template <class T>
QkvTriple<T> qkv_project(const PbanModel<T>& m, const Tensor<T>& f, Branch branch, Axis axis) {
    const auto& p = m.attention(branch).axis(axis);
    return {apply_conv(f, p.q), apply_conv(f, p.k), apply_conv(f, p.v)};
}

namespace detail {

// Moves the attended axis last and the other spatial axis next to batch:
// height -> [B,W,C,H], width -> [B,H,C,W].
inline std::vector<std::size_t> to_slices(Axis a) {
    return a == Axis::height ? std::vector<std::size_t>{0, 3, 1, 2} : std::vector<std::size_t>{0, 2, 1, 3};
}
inline std::vector<std::size_t> from_slices(Axis a) {
    return a == Axis::height ? std::vector<std::size_t>{0, 2, 3, 1} : std::vector<std::size_t>{0, 2, 1, 3};
}

template <class T>
void check_attention_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, double eps) {
    if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("axial attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                         shape_str(v.shape()) + " must share one [B,C,H,W] shape");
    if (q.dim(2) < 2 || q.dim(3) < 2)
        throw DegenerateInputError("axial attention: degenerate axis, H and W must both be >= 2, got " +
                                   shape_str(q.shape()));
    if (!(eps > 0.0)) throw ValidationError("axial attention: eps must be positive");
}

}  // namespace detail

// Scores S = Q^T K for every slice along `axis`: [B, L, N, N].
template <class T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, Axis axis) {
    auto qs = permute(q, detail::to_slices(axis));  // [B,L,C,N]
    auto ks = permute(k, detail::to_slices(axis));
    return matmul(permute(qs, {0, 1, 3, 2}), ks);
}

// Softmax over the first score index after dividing each N x N slice by its
// population std plus eps; every column of the result sums to one.
template <class T>
Tensor<T> attention_from_scores(const Tensor<T>& scores, double eps) {
    auto sd = add_scalar(stddev_all(scores, {0, 1}), static_cast<T>(eps));
    return softmax(div(scores, sd), 2);
}

template <class T>
Tensor<T> attention_map(const Tensor<T>& q, const Tensor<T>& k, Axis axis, double eps) {
    detail::check_attention_inputs(q, k, k, eps);
    return attention_from_scores(attention_scores(q, k, axis), eps);
}

// O = V A per slice, returned in [B,C,H,W] layout.
template <class T>
Tensor<T> axial_cross_attention(const Tensor<T>& q_src, const Tensor<T>& k_other, const Tensor<T>& v_src, Axis axis,
                                double eps) {
    detail::check_attention_inputs(q_src, k_other, v_src, eps);
    auto a = attention_from_scores(attention_scores(q_src, k_other, axis), eps);
    auto vs = permute(v_src, detail::to_slices(axis));
    return permute(matmul(vs, a), detail::from_slices(axis));
}

template <class T>
AxialAttentionOutput<T> pba_plus_forward(const PbanModel<T>& m, const Tensor<T>& f_sr, const Tensor<T>& f_hr) {
    const double eps = m.config.eps;
    const T half = T(0.5);
    auto direction = [&](const Tensor<T>& f_src, Branch src, const Tensor<T>& f_other, Branch other) {
        auto both = Tensor<T>{};
        for (auto axis : {Axis::height, Axis::width}) {
            auto s = qkv_project(m, f_src, src, axis);
            auto o = qkv_project(m, f_other, other, axis);
            auto out = axial_cross_attention(s.q, o.k, s.v, axis, eps);
            both = both.defined() ? add(both, out) : out;
        }
        return scale(both, half);
    };
    return {direction(f_sr, Branch::sr, f_hr, Branch::hr), direction(f_hr, Branch::hr, f_sr, Branch::sr)};
}

template <class T>
Tensor<T> subec_channel_gate(const Tensor<T>& i, const SubEcParams<T>& p) {
    auto pooled = flatten(mean_pool2d_global(channel_shuffle(i, 4)));
    auto g = sigmoid(apply_linear(pooled, p.channel));
    return reshape(g, {i.dim(0), i.dim(1), 1, 1});
}

template <class T>
Tensor<T> subec_spatial_gate(const Tensor<T>& i, const SubEcParams<T>& p) {
    auto up = pixel_shuffle(apply_conv(pixel_unshuffle(i, 2), p.subpixel), 2);
    return sigmoid(apply_conv(up, p.spatial));
}

// f + I * channel_gate(I) * spatial_gate(I), per direction.
template <class T>
std::pair<Tensor<T>, Tensor<T>> subec_fuse(const PbanModel<T>& m, const AxialAttentionOutput<T>& in,
                                          const Tensor<T>& f_sr, const Tensor<T>& f_hr) {
    auto fuse = [](const Tensor<T>& f, const Tensor<T>& i, const SubEcParams<T>& p) {
        if (f.shape() != i.shape())
            throw ShapeError("subec_fuse: feature " + shape_str(f.shape()) + " and attention " + shape_str(i.shape()) +
                             " differ");
        if (i.dim(1) % 4 || i.dim(2) % 2 || i.dim(3) % 2)
            throw ShapeError("subec_fuse: need C divisible by 4 and even H, W, got " + shape_str(i.shape()));
        return add(f, mul(mul(i, subec_channel_gate(i, p)), subec_spatial_gate(i, p)));
    };
    return {fuse(f_sr, in.o_hr_to_sr, m.subec_hr_to_sr), fuse(f_hr, in.o_sr_to_hr, m.subec_sr_to_hr)};
}

// Returns q-hat with shape [B,1].
template <class T>
Tensor<T> quality_head_forward(const PbanModel<T>& m, const Tensor<T>& o_hr_to_sr, const Tensor<T>& o_sr_to_hr,
                               Mode mode, std::mt19937_64* rng = nullptr) {
    if (m.config.channels < 8) throw ValidationError("quality head: C < 8 collapses the head widths");
    const double p = m.config.dropout;
    auto branch = [&](const Tensor<T>& o, const DirectionHead<T>& h) {
        auto x = flatten(mean_pool2d_global(o));
        x = dropout(relu(apply_linear(x, h.fc1)), p, mode, rng);
        return dropout(relu(apply_linear(x, h.fc2)), p, mode, rng);
    };
    auto joined = concat<T>({branch(o_hr_to_sr, m.head_hr_to_sr), branch(o_sr_to_hr, m.head_sr_to_hr)}, 1);
    return apply_linear(apply_linear(joined, m.fuse1), m.fuse2);
}

// Full network; q-hat as [B,1].
template <class T>
Tensor<T> pban_forward(const PbanModel<T>& m, const Tensor<T>& x_sr, const Tensor<T>& x_hr, Mode mode = Mode::eval,
                       std::mt19937_64* rng = nullptr) {
    auto [f_sr, f_hr] = extract_features(m, x_sr, x_hr);
    auto att = pba_plus_forward(m, f_sr, f_hr);
    auto [o1, o2] = subec_fuse(m, att, f_sr, f_hr);
    return quality_head_forward(m, o1, o2, mode, rng);
}

}  // namespace epban
