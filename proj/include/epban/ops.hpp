#pragma once

// Network-level differentiable operators built on the tensor tape.

#include <cmath>
#include <random>
#include <set>

#include "epban/tensor.hpp"

namespace epban {

enum class Mode { train, eval };

namespace detail {

// Row-major kernels accumulating into C.
// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        for (std::size_t p = 0; p < K; ++p) {
            const T a = A[i * K + p];
            if (a == T(0)) continue;
            const T* b = B + p * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    for (std::size_t p = 0; p < K; ++p) {
        const T* b = B + p * N;
        for (std::size_t i = 0; i < M; ++i) {
            const T a = A[p * M + i];
            if (a == T(0)) continue;
            T* c = C + i * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, std::vector<T>& scratch) {
    scratch.resize(N * K);
    transpose(N, K, B, scratch.data());
    gemm_nn(M, N, K, A, scratch.data(), C);
}

inline std::size_t checked_axis(long axis, std::size_t rank, std::string_view op) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range");
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// Batched matrix product over the last two axes with broadcast batch dims.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_defined(a, "matmul");
    detail::require_defined(b, "matmul");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2])
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t M = sa[sa.size() - 2], K = sa[sa.size() - 1], N = sb[sb.size() - 1];
    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    detail::BroadcastPlan plan;
    try {
        plan = detail::broadcast_plan(ba, bb, "matmul");
    } catch (const ShapeError&) {
        throw ShapeError("matmul: batch dimensions of " + shape_str(sa) + " and " + shape_str(sb) +
                         " are not broadcast-compatible");
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    detail::for_each_broadcast(plan, [&](std::size_t, std::size_t i, std::size_t j) { pairs.emplace_back(i, j); });
    Shape out_shape = plan.out;
    out_shape.push_back(M);
    out_shape.push_back(N);
    std::vector<T> out(pairs.size() * M * N, T(0));
    const T* A = a.values().data();
    const T* B = b.values().data();
    for (std::size_t q = 0; q < pairs.size(); ++q)
        detail::gemm_nn(M, N, K, A + pairs[q].first * M * K, B + pairs[q].second * K * N, out.data() + q * M * N);
    return detail::make_result<T>("matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
                                  [pairs = std::move(pairs), M, N, K](Node<T>& self) {
                                      auto& pa = *self.parents[0];
                                      auto& pb = *self.parents[1];
                                      std::vector<T> scratch;
                                      for (std::size_t q = 0; q < pairs.size(); ++q) {
                                          const T* g = self.grad.data() + q * M * N;
                                          if (pa.requires_grad) {
                                              // dA = dC * B^T
                                              auto ga = pa.grad_buffer();
                                              detail::gemm_nt(M, K, N, g, pb.data.data() + pairs[q].second * K * N,
                                                              ga.data() + pairs[q].first * M * K, scratch);
                                          }
                                          if (pb.requires_grad) {
                                              // dB = A^T * dC
                                              auto gb = pb.grad_buffer();
                                              detail::gemm_tn(K, N, M, pa.data.data() + pairs[q].first * M * K, g,
                                                              gb.data() + pairs[q].second * K * N);
                                          }
                                      }
                                  });
}

// Max-stabilized softmax along one axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis) {
    detail::require_defined(x, "softmax");
    const auto ax = detail::checked_axis(axis, x.rank(), "softmax");
    const auto& s = x.shape();
    const std::size_t len = s[ax];
    const std::size_t inner = numel_of(Shape(s.begin() + ax + 1, s.end()));
    const std::size_t outer = x.numel() / (len * inner);
    const auto& xv = x.values();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = xv[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
            T z = T(0);
            for (std::size_t k = 0; k < len; ++k) {
                const T e = std::exp(xv[base + k * inner] - mx);
                out[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
        }
    return detail::make_result<T>("softmax", s, std::move(out), {x.node()}, [len, inner, outer](Node<T>& self) {
        auto gp = self.parents[0]->grad_buffer();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                T dot = T(0);
                for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                for (std::size_t k = 0; k < len; ++k)
                    gp[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
            }
    });
}

// Population standard deviation over every non-batch axis. The result keeps
// the input rank with reduced axes set to 1, so it broadcasts back.
template <class T>
Tensor<T> stddev_all(const Tensor<T>& x, const std::set<std::size_t>& batch_axes) {
    detail::require_defined(x, "stddev_all");
    const auto& s = x.shape();
    for (auto a : batch_axes)
        if (a >= s.size()) throw ShapeError("stddev_all: batch axis " + std::to_string(a) + " out of range");
    Shape out_shape = s;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (!batch_axes.count(i)) out_shape[i] = 1;
    const std::size_t groups = numel_of(out_shape);
    const std::size_t count = x.numel() / groups;
    if (count < 2)
        throw DegenerateInputError("stddev_all: need at least 2 reduced elements, got " + std::to_string(count));

    // Map each element to its group through broadcasting against the output.
    auto plan = detail::broadcast_plan(s, out_shape, "stddev_all");
    std::vector<std::size_t> group_of(x.numel());
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t g) { group_of[o] = g; });

    const auto& xv = x.values();
    std::vector<T> mu(groups, T(0)), var(groups, T(0));
    for (std::size_t i = 0; i < xv.size(); ++i) mu[group_of[i]] += xv[i];
    for (auto& m : mu) m /= static_cast<T>(count);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T d = xv[i] - mu[group_of[i]];
        var[group_of[i]] += d * d;
    }
    std::vector<T> out(groups);
    for (std::size_t g = 0; g < groups; ++g) out[g] = std::sqrt(var[g] / static_cast<T>(count));
    return detail::make_result<T>(
        "stddev_all", std::move(out_shape), std::move(out), {x.node()},
        [group_of = std::move(group_of), mu = std::move(mu), count](Node<T>& self) {
            auto& p = *self.parents[0];
            auto gp = p.grad_buffer();
            for (std::size_t i = 0; i < gp.size(); ++i) {
                const std::size_t g = group_of[i];
                const T sd = self.data[g];
                if (sd > T(0)) gp[i] += self.grad[g] * (p.data[i] - mu[g]) / (static_cast<T>(count) * sd);
            }
        });
}

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

namespace detail {

struct ConvGeometry {
    std::size_t B, C, H, W, O, KH, KW, stride, pad, HO, WO;
    std::size_t patch() const { return C * KH * KW; }
    std::size_t positions() const { return HO * WO; }
    bool pointwise() const { return KH == 1 && KW == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t ki = 0; ki < g.KH; ++ki)
            for (std::size_t kj = 0; kj < g.KW; ++kj) {
                T* row = col + ((c * g.KH + ki) * g.KW + kj) * P;
                for (std::size_t oy = 0; oy < g.HO; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.WO; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.H) && ix < static_cast<long>(g.W);
                        row[oy * g.WO + ox] = inside ? x[(c * g.H + iy) * g.W + ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t ki = 0; ki < g.KH; ++ki)
            for (std::size_t kj = 0; kj < g.KW; ++kj) {
                const T* row = col + ((c * g.KH + ki) * g.KW + kj) * P;
                for (std::size_t oy = 0; oy < g.HO; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
                    for (std::size_t ox = 0; ox < g.WO; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.W)) continue;
                        x[(c * g.H + iy) * g.W + ix] += row[oy * g.WO + ox];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation. x: [B,C,H,W], w: [O,C,KH,KW], b: [O] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Conv2dOptions opt = {}) {
    detail::require_defined(x, "conv2d");
    detail::require_defined(w, "conv2d");
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
    detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                           opt.stride, opt.padding, 0, 0};
    if (g.KH > g.H + 2 * g.pad || g.KW > g.W + 2 * g.pad)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    g.HO = (g.H + 2 * g.pad - g.KH) / g.stride + 1;
    g.WO = (g.W + 2 * g.pad - g.KW) / g.stride + 1;
    const bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != g.O))
        throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match " + std::to_string(g.O) +
                         " output channels");

    const std::size_t P = g.positions(), KK = g.patch();
    std::vector<T> out(g.B * g.O * P, T(0));
    std::vector<T> col(g.pointwise() ? 0 : KK * P);
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    for (std::size_t n = 0; n < g.B; ++n) {
        const T* src = xv + n * g.C * g.H * g.W;
        if (!g.pointwise()) {
            detail::im2col(g, src, col.data());
            src = col.data();
        }
        T* dst = out.data() + n * g.O * P;
        if (has_bias)
            for (std::size_t o = 0; o < g.O; ++o) std::fill(dst + o * P, dst + (o + 1) * P, b.values()[o]);
        detail::gemm_nn(g.O, P, KK, wv, src, dst);
    }
    std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
    return detail::make_result<T>("conv2d", {g.B, g.O, g.HO, g.WO}, std::move(out), std::move(parents),
                                  [g, has_bias](Node<T>& self) {
                                      auto& px = *self.parents[0];
                                      auto& pw = *self.parents[1];
                                      const std::size_t P = g.positions(), KK = g.patch();
                                      std::vector<T> col(g.pointwise() ? 0 : KK * P), dcol, scratch;
                                      if (px.requires_grad && !g.pointwise()) dcol.resize(KK * P);
                                      for (std::size_t n = 0; n < g.B; ++n) {
                                          const T* gout = self.grad.data() + n * g.O * P;
                                          const T* src = px.data.data() + n * g.C * g.H * g.W;
                                          if (pw.requires_grad) {
                                              if (!g.pointwise()) {
                                                  detail::im2col(g, src, col.data());
                                                  src = col.data();
                                              }
                                              // dW[O,KK] += dOut[O,P] * col[KK,P]^T
                                              detail::gemm_nt(g.O, KK, P, gout, src, pw.grad_buffer().data(), scratch);
                                          }
                                          if (px.requires_grad) {
                                              T* gx = px.grad_buffer().data() + n * g.C * g.H * g.W;
                                              if (g.pointwise()) {
                                                  detail::gemm_tn(KK, P, g.O, pw.data.data(), gout, gx);
                                              } else {
                                                  std::fill(dcol.begin(), dcol.end(), T(0));
                                                  detail::gemm_tn(KK, P, g.O, pw.data.data(), gout, dcol.data());
                                                  detail::col2im(g, dcol.data(), gx);
                                              }
                                          }
                                          if (has_bias && self.parents[2]->requires_grad) {
                                              auto gb = self.parents[2]->grad_buffer();
                                              for (std::size_t o = 0; o < g.O; ++o) {
                                                  T s = T(0);
                                                  for (std::size_t p = 0; p < P; ++p) s += gout[o * P + p];
                                                  gb[o] += s;
                                              }
                                          }
                                      }
                                  });
}

// [B,C,H,W] -> [B,C,1,1]
template <class T>
Tensor<T> mean_pool2d_global(const Tensor<T>& x) {
    detail::require_defined(x, "mean_pool2d_global");
    if (x.rank() != 4) throw ShapeError("mean_pool2d_global: expected [B,C,H,W], got " + shape_str(x.shape()));
    const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(BC, T(0));
    const auto& xv = x.values();
    for (std::size_t i = 0; i < BC; ++i) {
        T s = T(0);
        for (std::size_t p = 0; p < HW; ++p) s += xv[i * HW + p];
        out[i] = s / static_cast<T>(HW);
    }
    return detail::make_result<T>("mean_pool2d_global", {x.dim(0), x.dim(1), 1, 1}, std::move(out), {x.node()},
                                  [BC, HW](Node<T>& self) {
                                      auto gp = self.parents[0]->grad_buffer();
                                      for (std::size_t i = 0; i < BC; ++i) {
                                          const T g = self.grad[i] / static_cast<T>(HW);
                                          for (std::size_t p = 0; p < HW; ++p) gp[i * HW + p] += g;
                                      }
                                  });
}

// Non-overlapping k x k average pooling; H and W must be divisible by k.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
    detail::require_defined(x, "avg_pool2d");
    if (x.rank() != 4 || k == 0 || x.dim(2) % k || x.dim(3) % k)
        throw ShapeError("avg_pool2d: " + shape_str(x.shape()) + " not divisible by kernel " + std::to_string(k));
    const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), HO = H / k, WO = W / k;
    std::vector<T> out(BC * HO * WO, T(0));
    const auto& xv = x.values();
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t i = 0; i < BC; ++i)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(i * HO + y / k) * WO + xx / k] += xv[(i * H + y) * W + xx] * inv;
    return detail::make_result<T>("avg_pool2d", {x.dim(0), x.dim(1), HO, WO}, std::move(out), {x.node()},
                                  [BC, H, W, HO, WO, k, inv](Node<T>& self) {
                                      auto gp = self.parents[0]->grad_buffer();
                                      for (std::size_t i = 0; i < BC; ++i)
                                          for (std::size_t y = 0; y < H; ++y)
                                              for (std::size_t xx = 0; xx < W; ++xx)
                                                  gp[(i * H + y) * W + xx] += self.grad[(i * HO + y / k) * WO + xx / k] * inv;
                                  });
}

// [B, ...] -> [B, prod(...)]
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
    detail::require_defined(x, "flatten");
    if (x.rank() < 1) throw ShapeError("flatten: needs a batch axis");
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    for (auto& t : xs) detail::require_defined(t, "concat");
    const auto ax = detail::checked_axis(axis, xs[0].rank(), "concat");
    Shape out_shape = xs[0].shape();
    out_shape[ax] = 0;
    for (auto& t : xs) {
        if (t.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < t.rank(); ++d)
            if (d != ax && t.dim(d) != xs[0].dim(d))
                throw ShapeError("concat: shapes " + shape_str(xs[0].shape()) + " and " + shape_str(t.shape()) +
                                 " differ off the concat axis");
        out_shape[ax] += t.dim(ax);
    }
    const std::size_t inner = numel_of(Shape(out_shape.begin() + ax + 1, out_shape.end()));
    const std::size_t outer = numel_of(Shape(out_shape.begin(), out_shape.begin() + ax));
    std::vector<T> out;
    out.reserve(numel_of(out_shape));
    std::vector<std::size_t> chunk;
    for (auto& t : xs) chunk.push_back(t.dim(ax) * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const auto& v = xs[k].values();
            out.insert(out.end(), v.begin() + o * chunk[k], v.begin() + (o + 1) * chunk[k]);
        }
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (auto& t : xs) parents.push_back(t.node());
    return detail::make_result<T>("concat", std::move(out_shape), std::move(out), std::move(parents),
                                  [chunk, outer](Node<T>& self) {
                                      std::size_t pos = 0;
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t k = 0; k < chunk.size(); ++k) {
                                              auto& p = *self.parents[k];
                                              if (p.requires_grad) {
                                                  auto gp = p.grad_buffer();
                                                  for (std::size_t i = 0; i < chunk[k]; ++i)
                                                      gp[o * chunk[k] + i] += self.grad[pos + i];
                                              }
                                              pos += chunk[k];
                                          }
                                  });
}

// x: [B,in], w: [out,in], b: [out] or undefined -> [B,out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require_defined(x, "linear");
    detail::require_defined(w, "linear");
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
    const bool has_bias = b.defined();
    if (has_bias && (b.rank() != 1 || b.dim(0) != O)) throw ShapeError("linear: bias shape mismatch");
    std::vector<T> out(B * O, T(0));
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            T s = has_bias ? b.values()[o] : T(0);
            for (std::size_t i = 0; i < I; ++i) s += xv[n * I + i] * wv[o * I + i];
            out[n * O + o] = s;
        }
    std::vector<std::shared_ptr<Node<T>>> parents{x.node(), w.node()};
    if (has_bias) parents.push_back(b.node());
    return detail::make_result<T>("linear", {B, O}, std::move(out), std::move(parents),
                                  [B, I, O, has_bias](Node<T>& self) {
                                      auto& px = *self.parents[0];
                                      auto& pw = *self.parents[1];
                                      const auto& g = self.grad;
                                      if (px.requires_grad) {
                                          auto gx = px.grad_buffer();
                                          for (std::size_t n = 0; n < B; ++n)
                                              for (std::size_t o = 0; o < O; ++o)
                                                  for (std::size_t i = 0; i < I; ++i)
                                                      gx[n * I + i] += g[n * O + o] * pw.data[o * I + i];
                                      }
                                      if (pw.requires_grad) {
                                          auto gw = pw.grad_buffer();
                                          for (std::size_t n = 0; n < B; ++n)
                                              for (std::size_t o = 0; o < O; ++o)
                                                  for (std::size_t i = 0; i < I; ++i)
                                                      gw[o * I + i] += g[n * O + o] * px.data[n * I + i];
                                      }
                                      if (has_bias && self.parents[2]->requires_grad) {
                                          auto gb = self.parents[2]->grad_buffer();
                                          for (std::size_t n = 0; n < B; ++n)
                                              for (std::size_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
                                      }
                                  });
}

// Inverted dropout: survivors are scaled by 1/(1-p) in train mode; eval mode
// returns the input unchanged.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::mt19937_64* rng) {
    detail::require_defined(x, "dropout");
    if (!(p >= 0.0 && p < 1.0)) throw ValidationError("dropout: p must lie in [0,1)");
    if (mode == Mode::eval || p == 0.0) return x;
    if (!rng) throw ContractError("dropout: train mode needs a random generator");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = u(*rng) < p ? T(0) : keep;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * mask[i];
    return detail::make_result<T>("dropout", x.shape(), std::move(out), {x.node()},
                                  [mask = std::move(mask)](Node<T>& self) {
                                      auto gp = self.parents[0]->grad_buffer();
                                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * mask[i];
                                  });
}

// [B, C*r*r, H, W] -> [B, C, H*r, W*r]
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
    detail::require_defined(x, "pixel_shuffle");
    if (x.rank() != 4 || r == 0 || x.dim(1) % (r * r))
        throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    const std::size_t B = x.dim(0), C = x.dim(1) / (r * r), H = x.dim(2), W = x.dim(3);
    std::vector<std::size_t> src(x.numel());
    std::size_t o = 0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H * r; ++y)
                for (std::size_t xx = 0; xx < W * r; ++xx) {
                    const std::size_t ic = c * r * r + (y % r) * r + (xx % r);
                    src[o++] = ((n * C * r * r + ic) * H + y / r) * W + xx / r;
                }
    return gather(x, {B, C, H * r, W * r}, std::move(src), "pixel_shuffle");
}

// [B, C, H*r, W*r] -> [B, C*r*r, H, W]
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
    detail::require_defined(x, "pixel_unshuffle");
    if (x.rank() != 4 || r == 0 || x.dim(2) % r || x.dim(3) % r)
        throw ShapeError("pixel_unshuffle: spatial dims of " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(r));
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2) / r, W = x.dim(3) / r;
    std::vector<std::size_t> src(x.numel());
    std::size_t o = 0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t oc = 0; oc < C * r * r; ++oc) {
            const std::size_t c = oc / (r * r), dy = (oc / r) % r, dx = oc % r;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx)
                    src[o++] = ((n * C + c) * H * r + y * r + dy) * W * r + xx * r + dx;
        }
    return gather(x, {B, C * r * r, H, W}, std::move(src), "pixel_unshuffle");
}

// Interleaves channel groups: [g0c0 g0c1 .. g1c0 ..] -> [g0c0 g1c0 .. g0c1 ..]
template <class T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups) {
    detail::require_defined(x, "channel_shuffle");
    if (x.rank() != 4 || groups == 0 || x.dim(1) % groups)
        throw ShapeError("channel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(groups) + " groups");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), per = C / groups;
    std::vector<std::size_t> src(x.numel());
    std::size_t o = 0;
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t oc = 0; oc < C; ++oc) {
            const std::size_t ic = (oc % groups) * per + oc / groups;
            for (std::size_t p = 0; p < HW; ++p) src[o++] = (n * C + ic) * HW + p;
        }
    return gather(x, x.shape(), std::move(src), "channel_shuffle");
}

}  // namespace epban
