#pragma once

// Dense tensors with a reverse-mode autodiff tape.
//
// A Tensor<T> is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar walks the graph once in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace epban {

using Shape = std::vector<std::size_t>;

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "Tensor supports f32 and f64 only");
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

// Error taxonomy shared by the whole library.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Thread-local switch; while disabled, ops never record graph edges.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set_enabled(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;
    std::string_view op = "leaf";

    bool is_leaf() const { return !backward; }

    std::span<T> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        if (numel_of(shape) != values.size())
            throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                             " values");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = numel_of(shape);
        return from(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return from({}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = on;
    }
    bool is_leaf() const { return node_->is_leaf(); }
    std::string_view op() const { return node_->op; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    // Fresh leaf holding a copy of the values; no graph edges.
    Tensor detach() const { return from(shape(), node_->data, false); }

    Tensor clone_leaf(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

    void backward() const;

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

namespace detail {

// Creates an op result, recording edges only when some parent needs grad.
template <class T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<Node<T>>> parents, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool any = false;
    if (GradMode::enabled())
        for (auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

template <class T>
void require_defined(const Tensor<T>& t, std::string_view op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor argument");
}

}  // namespace detail

template <class T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    // Leaves collect this call's gradient separately and add it to what they
    // already hold at the end, so repeated calls accumulate exactly.
    std::vector<std::pair<Node<T>*, std::vector<T>>> previous;
    for (auto* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), T(0));
        } else if (!n->grad.empty()) {
            previous.emplace_back(n, std::move(n->grad));
            n->grad.clear();
        }
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward(**it);
    for (auto& [n, prev] : previous) {
        if (n->grad.empty()) {
            n->grad = std::move(prev);
        } else {
            for (std::size_t i = 0; i < prev.size(); ++i) n->grad[i] = prev[i] + n->grad[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise ops

namespace detail {

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast dims
    bool same = false;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, std::string_view op) {
    BroadcastPlan p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
    p.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        p.out[i] = std::max(pa[i], pb[i]);
    }
    auto sa = strides_of(pa), sb = strides_of(pb);
    p.stride_a.resize(r);
    p.stride_b.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        p.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
        p.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    const std::size_t n = numel_of(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t r = p.out.size();
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::size_t> idx(r, 0);
    const std::size_t inner = p.out[r - 1], ia_step = p.stride_a[r - 1], ib_step = p.stride_b[r - 1];
    std::size_t ia = 0, ib = 0, o = 0;
    while (o < n) {
        for (std::size_t j = 0; j < inner; ++j) f(o++, ia + j * ia_step, ib + j * ib_step);
        // advance outer multi-index
        std::size_t d = r - 1;
        while (d-- > 0) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= idx[d] * p.stride_a[d];
            ib -= idx[d] * p.stride_b[d];
            idx[d] = 0;
        }
    }
}

// da(x, y, z) and db(x, y, z) return dz/dx and dz/dy for z = fwd(x, y).
template <class T, class Fwd, class Da, class Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, std::string_view name, Fwd fwd, Da da, Db db) {
    require_defined(a, name);
    require_defined(b, name);
    auto plan = broadcast_plan(a.shape(), b.shape(), name);
    std::vector<T> out(numel_of(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
    Shape out_shape = plan.out;
    return make_result<T>(name, std::move(out_shape), std::move(out), {a.node(), b.node()},
                          [plan = std::move(plan), da, db](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const auto& g = self.grad;
                              const auto& z = self.data;
                              if (pa.requires_grad) {
                                  auto ga = pa.grad_buffer();
                                  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                                      ga[i] += g[o] * da(pa.data[i], pb.data[j], z[o]);
                                  });
                              }
                              if (pb.requires_grad) {
                                  auto gb = pb.grad_buffer();
                                  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                                      gb[j] += g[o] * db(pa.data[i], pb.data[j], z[o]);
                                  });
                              }
                          });
}

template <class T, class Fwd, class D>
Tensor<T> unary_op(const Tensor<T>& x, std::string_view name, Fwd fwd, D d) {
    require_defined(x, name);
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return make_result<T>(name, x.shape(), std::move(out), {x.node()}, [d](Node<T>& self) {
        auto& p = *self.parents[0];
        auto gp = p.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * d(p.data[i], self.data[i]);
    });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T, T y, T z) { return -z / y; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary_op<T>(
        x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op<T>(
        x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, "sigmoid",
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

// Treats the value as a constant during differentiation.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) { return x.detach(); }

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    detail::require_defined(x, "sum");
    T s = T(0);
    for (T v : x.values()) s += v;
    return detail::make_result<T>("sum", {}, {s}, {x.node()}, [](Node<T>& self) {
        auto gp = self.parents[0]->grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gp) v += g;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    detail::require_defined(x, "mean");
    T s = T(0);
    for (T v : x.values()) s += v;
    const T n = static_cast<T>(x.numel());
    return detail::make_result<T>("mean", {}, {s / n}, {x.node()}, [n](Node<T>& self) {
        auto gp = self.parents[0]->grad_buffer();
        const T g = self.grad[0] / n;
        for (auto& v : gp) v += g;
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require_defined(x, "reshape");
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    return detail::make_result<T>("reshape", std::move(shape), x.values(), {x.node()}, [](Node<T>& self) {
        auto gp = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    });
}

// out[i] = x[src[i]]; the backbone of every data-movement op.
template <class T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> src, std::string_view name) {
    detail::require_defined(x, name);
    if (src.size() != numel_of(out_shape)) throw ShapeError(std::string(name) + ": index map size mismatch");
    std::vector<T> out(src.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
    return detail::make_result<T>(name, std::move(out_shape), std::move(out), {x.node()},
                                  [src = std::move(src)](Node<T>& self) {
                                      auto gp = self.parents[0]->grad_buffer();
                                      for (std::size_t i = 0; i < src.size(); ++i) gp[src[i]] += self.grad[i];
                                  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    detail::require_defined(x, "permute");
    const auto& s = x.shape();
    if (perm.size() != s.size()) throw ShapeError("permute: permutation rank mismatch for " + shape_str(s));
    std::vector<bool> used(s.size(), false);
    for (auto p : perm) {
        if (p >= s.size() || used[p]) throw ShapeError("permute: invalid permutation");
        used[p] = true;
    }
    Shape out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[perm[i]];
    const auto in_st = strides_of(s);
    std::vector<std::size_t> st(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) st[i] = in_st[perm[i]];
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
        src[o] = off;
        for (std::size_t d = s.size(); d-- > 0;) {
            ++idx[d];
            off += st[d];
            if (idx[d] < out[d]) break;
            off -= idx[d] * st[d];
            idx[d] = 0;
        }
    }
    return gather(x, std::move(out), std::move(src), "permute");
}

}  // namespace epban
