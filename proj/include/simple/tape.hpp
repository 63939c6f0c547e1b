#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "simple/gemm.hpp"
#include "simple/rng.hpp"
#include "simple/tensor.hpp"

namespace simple {

/// Large activation tensors are allocated and freed every step; keep glibc
/// from serving them via mmap/munmap so the heap retains warm pages instead
/// of page-faulting each training step.
inline void tune_allocator_once() {
#ifdef __GLIBC__
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)done;
#endif
}

/// Reverse-mode autodiff over Tensor<T> values.
///
/// A Tape owns every intermediate of one forward computation. Ops append
/// nodes and register backward closures; backward(loss) seeds d(loss)=1 and
/// runs the closures in reverse creation order. Gradients are only allocated
/// and propagated for nodes reachable from a differentiable leaf, so feeding
/// data through leaf() (needs_grad=false) skips the wasted input-gradient
/// work in the first layer.
template <typename T>
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() {
        tune_allocator_once();
        static std::atomic<uint64_t> counter{0};
        uid_ = ++counter;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Process-unique instance id; lets callers key caches without risking
    /// address reuse across tape lifetimes.
    uint64_t uid() const { return uid_; }

    Var leaf(Tensor<T> value, bool needs_grad = false) {
        return push(std::move(value), needs_grad, {});
    }

    const Tensor<T>& val(Var x) const { return nodes_[check(x)].value; }

    /// Gradient of a node after backward(); zero tensor if it was not reached.
    Tensor<T> grad(Var x) const {
        const Node& n = nodes_[check(x)];
        if (n.grad.numel() == 0) return Tensor<T>(n.value.shape);
        return n.grad;
    }

    void backward(Var loss) {
        Node& top = nodes_[check(loss)];
        if (top.value.numel() != 1) throw std::logic_error("backward() needs a scalar loss");
        for (Node& n : nodes_)
            if (n.needs) n.grad = Tensor<T>(n.value.shape);
        if (!top.needs) return;
        top.grad.v[0] = T(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.needs && n.back) n.back(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

    // ---- hooks for op implementations ----

    /// Id the next pushed node will get; lets closures capture their own var.
    Var next_var() const { return Var{static_cast<int>(nodes_.size())}; }

    Var push(Tensor<T> value, bool needs, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(back), needs});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool needs(Var x) const { return nodes_[check(x)].needs; }

    /// Accumulation target for a parent's gradient; null when the parent does
    /// not participate in differentiation.
    Tensor<T>* grad_ref(Var x) {
        Node& n = nodes_[check(x)];
        return n.needs ? &n.grad : nullptr;
    }

    const Tensor<T>& out_grad(Var x) const { return nodes_[check(x)].grad; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(Tape&)> back;
        bool needs = false;
    };

    int check(Var x) const {
        if (x.id < 0 || x.id >= static_cast<int>(nodes_.size())) throw std::logic_error("bad tape var");
        return x.id;
    }

    uint64_t uid_ = 0;
    std::vector<Node> nodes_;
};

template <typename T>
using Var = typename Tape<T>::Var;

namespace detail {

[[noreturn]] inline void op_fail(const std::string& op, const std::string& msg) {
    throw std::invalid_argument(op + ": " + msg);
}

/// exp() used by softmax-family ops. Double keeps libm precision (tests and
/// gradient checks run in double); float uses a 2^f polynomial split that the
/// compiler can vectorize, ~1e-7 relative error.
inline double softmax_exp(double x) { return std::exp(x); }
inline float softmax_exp(float x) {
    // Branch-free (clamped) so the compiler can vectorize callers' loops.
    x = std::min(std::max(x, -87.0f), 88.0f);
    const float t = x * 1.442695040888963f;  // log2(e)
    const float fi = std::floor(t);
    const float f = t - fi;
    // 2^f on [0,1) via e^g with g = f*ln2, degree-7 Taylor (rel err ~ 7e-7).
    const float g = f * 0.6931471805599453f;
    const float p =
        1.0f +
        g * (1.0f +
             g * (0.5f +
                  g * (0.16666667f +
                       g * (0.041666668f +
                            g * (0.008333334f + g * (0.0013888889f + g * 0.00019841270f))))));
    const uint32_t bits = static_cast<uint32_t>(static_cast<int>(fi) + 127) << 23;
    return p * std::bit_cast<float>(bits);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) op_fail(op, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
    detail::require_same_shape("add", t.val(a), t.val(b));
    Tensor<T> y = t.val(a);
    const Tensor<T>& vb = t.val(b);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
        if (auto* gb = tp.grad_ref(b))
            for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
    });
}

template <typename T>
Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b) {
    detail::require_same_shape("sub", t.val(a), t.val(b));
    Tensor<T> y = t.val(a);
    const Tensor<T>& vb = t.val(b);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
        if (auto* gb = tp.grad_ref(b))
            for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    });
}

template <typename T>
Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b) {
    detail::require_same_shape("mul", t.val(a), t.val(b));
    Tensor<T> y = t.val(a);
    const Tensor<T>& vb = t.val(b);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& va = tp.val(a);
        const Tensor<T>& vb2 = tp.val(b);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * vb2[i];
        if (auto* gb = tp.grad_ref(b))
            for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * va[i];
    });
}

template <typename T>
Var<T> scale(Tape<T>& t, Var<T> a, T s) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x *= s;
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, s, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * s;
    });
}

template <typename T>
Var<T> add_const(Tape<T>& t, Var<T> a, T c) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x += c;
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> relu(Tape<T>& t, Var<T> a) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v)
        if (x < T(0)) x = T(0);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& va = tp.val(a);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (va[i] > T(0)) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> sigmoid(Tape<T>& t, Var<T> a) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x = T(1) / (T(1) + std::exp(-x));
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& vy = tp.val(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * vy[i] * (T(1) - vy[i]);
    });
}

template <typename T>
Var<T> tanh_op(Tape<T>& t, Var<T> a) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x = std::tanh(x);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& vy = tp.val(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * (T(1) - vy[i] * vy[i]);
    });
}

template <typename T>
Var<T> exp_op(Tape<T>& t, Var<T> a) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x = std::exp(x);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& vy = tp.val(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * vy[i];
    });
}

/// max(x, c) elementwise; gradient passes only where x > c. Exact-zero
/// gradient on the clipped side is relied on by the clipped losses.
template <typename T>
Var<T> max_const(Tape<T>& t, Var<T> a, T c) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v)
        if (x < c) x = c;
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, c, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& va = tp.val(a);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (va[i] > c) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> clamp_const(Tape<T>& t, Var<T> a, T lo, T hi) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x = std::min(std::max(x, lo), hi);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, lo, hi, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& va = tp.val(a);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (va[i] > lo && va[i] < hi) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> min_pair(Tape<T>& t, Var<T> a, Var<T> b) {
    detail::require_same_shape("min_pair", t.val(a), t.val(b));
    Tensor<T> y = t.val(a);
    const Tensor<T>& vb = t.val(b);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::min(y[i], vb[i]);
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& va = tp.val(a);
        const Tensor<T>& vb2 = tp.val(b);
        auto* ga = tp.grad_ref(a);
        auto* gb = tp.grad_ref(b);
        for (int64_t i = 0; i < g.numel(); ++i) {
            if (va[i] <= vb2[i]) {
                if (ga) (*ga)[i] += g[i];
            } else if (gb) {
                (*gb)[i] += g[i];
            }
        }
    });
}

/// Forward: 1 where x > 0 else 0. Backward: identity (straight-through).
template <typename T>
Var<T> discretize_st(Tape<T>& t, Var<T> a) {
    Tensor<T> y = t.val(a);
    for (auto& x : y.v) x = x > T(0) ? T(1) : T(0);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
}

/// Inverted-scaling dropout: kept activations divide by keep-probability, so
/// evaluation needs no rescaling. Identity when training is off or rate is 0.
template <typename T>
Var<T> dropout(Tape<T>& t, Var<T> a, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) detail::op_fail("dropout", "rate must be in [0,1)");
    if (!training || rate == 0.0) return a;
    const double keep = 1.0 - rate;
    const T inv = T(1.0 / keep);
    Tensor<T> y = t.val(a);
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(y.numel()));
    for (int64_t i = 0; i < y.numel(); ++i) {
        bool k = rng.uniform() < keep;
        (*mask)[static_cast<size_t>(i)] = k;
        y[i] = k ? y[i] * inv : T(0);
    }
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, mask, inv, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i)
                if ((*mask)[static_cast<size_t>(i)]) (*ga)[i] += g[i] * inv;
    });
}

// ---------------------------------------------------------------------------
// Broadcast / reshape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Tape<T>& t, Var<T> a, std::vector<int> shape) {
    Tensor<T> y = t.val(a).reshaped(std::move(shape));
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
}

/// x[..., C] + b[C], bias broadcast over rows.
template <typename T>
Var<T> add_bias(Tape<T>& t, Var<T> x, Var<T> b) {
    const Tensor<T>& vx = t.val(x);
    const Tensor<T>& vb = t.val(b);
    const int C = vx.cols();
    if (vb.rank() != 1 || vb.dim(0) != C)
        detail::op_fail("add_bias", "bias " + shape_str(vb.shape) + " does not match last dim of " + shape_str(vx.shape));
    Tensor<T> y = vx;
    const int64_t R = vx.rows();
    for (int64_t r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) y[r * C + c] += vb[c];
    const bool needs = t.needs(x) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [x, b, C, R, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* gx = tp.grad_ref(x))
            for (int64_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
        if (auto* gb = tp.grad_ref(b))
            for (int64_t r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) (*gb)[c] += g[r * C + c];
    });
}

/// x[N, ..., C] * e[N, C], the per-sample vector broadcast over all middle
/// (spatial) positions. This is the channel-wise conditioning primitive.
template <typename T>
Var<T> mul_rows_bcast(Tape<T>& t, Var<T> x, Var<T> e) {
    const Tensor<T>& vx = t.val(x);
    const Tensor<T>& ve = t.val(e);
    const int C = vx.cols();
    if (ve.rank() != 2 || ve.dim(1) != C || vx.dim(0) != ve.dim(0))
        detail::op_fail("mul_rows_bcast",
                        "cannot broadcast " + shape_str(ve.shape) + " over " + shape_str(vx.shape));
    const int64_t N = vx.dim(0);
    const int64_t S = vx.rows() / N;  // spatial positions per sample
    Tensor<T> y = vx;
    for (int64_t n = 0; n < N; ++n) {
        const T* en = ve.data() + n * C;
        T* yn = y.data() + n * S * C;
        for (int64_t s = 0; s < S; ++s)
            for (int c = 0; c < C; ++c) yn[s * C + c] *= en[c];
    }
    const bool needs = t.needs(x) || t.needs(e);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [x, e, N, S, C, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& vx2 = tp.val(x);
        const Tensor<T>& ve2 = tp.val(e);
        auto* gx = tp.grad_ref(x);
        auto* ge = tp.grad_ref(e);
        for (int64_t n = 0; n < N; ++n) {
            const int64_t base = n * S * C;
            for (int64_t s = 0; s < S; ++s)
                for (int c = 0; c < C; ++c) {
                    const int64_t i = base + s * C + c;
                    if (gx) (*gx)[i] += g[i] * ve2[n * C + c];
                    if (ge) (*ge)[n * C + c] += g[i] * vx2[i];
                }
        }
    });
}

template <typename T>
Var<T> concat_lastdim(Tape<T>& t, Var<T> a, Var<T> b) {
    const Tensor<T>& va = t.val(a);
    const Tensor<T>& vb = t.val(b);
    if (va.rank() != vb.rank()) detail::op_fail("concat_lastdim", "rank mismatch");
    for (int i = 0; i + 1 < va.rank(); ++i)
        if (va.dim(i) != vb.dim(i)) detail::op_fail("concat_lastdim", "leading dims differ");
    const int Ca = va.cols(), Cb = vb.cols();
    std::vector<int> shape = va.shape;
    shape.back() = Ca + Cb;
    Tensor<T> y(shape);
    const int64_t R = va.rows();
    for (int64_t r = 0; r < R; ++r) {
        for (int c = 0; c < Ca; ++c) y[r * (Ca + Cb) + c] = va[r * Ca + c];
        for (int c = 0; c < Cb; ++c) y[r * (Ca + Cb) + Ca + c] = vb[r * Cb + c];
    }
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, R, Ca, Cb, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        auto* ga = tp.grad_ref(a);
        auto* gb = tp.grad_ref(b);
        for (int64_t r = 0; r < R; ++r) {
            if (ga)
                for (int c = 0; c < Ca; ++c) (*ga)[r * Ca + c] += g[r * (Ca + Cb) + c];
            if (gb)
                for (int c = 0; c < Cb; ++c) (*gb)[r * Cb + c] += g[r * (Ca + Cb) + Ca + c];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    T s = 0;
    for (T x : va.v) s += x;
    Var<T> out = t.next_var();
    return t.push(Tensor<T>::scalar(s), t.needs(a), [a, out](Tape<T>& tp) {
        const T g = tp.out_grad(out)[0];
        if (auto* ga = tp.grad_ref(a))
            for (auto& x : ga->v) x += g;
    });
}

template <typename T>
Var<T> mean_all(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    const int64_t n = va.numel();
    T s = 0;
    for (T x : va.v) s += x;
    Var<T> out = t.next_var();
    return t.push(Tensor<T>::scalar(s / T(n)), t.needs(a), [a, n, out](Tape<T>& tp) {
        const T g = tp.out_grad(out)[0] / T(n);
        if (auto* ga = tp.grad_ref(a))
            for (auto& x : ga->v) x += g;
    });
}

/// [..., K] -> [...] summing the last dimension.
template <typename T>
Var<T> sum_lastdim(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    const int K = va.cols();
    const int64_t R = va.rows();
    std::vector<int> shape(va.shape.begin(), va.shape.end() - 1);
    if (shape.empty()) shape = {1};
    Tensor<T> y(shape);
    for (int64_t r = 0; r < R; ++r) {
        T s = 0;
        for (int k = 0; k < K; ++k) s += va[r * K + k];
        y[r] = s;
    }
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, R, K, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t r = 0; r < R; ++r)
                for (int k = 0; k < K; ++k) (*ga)[r * K + k] += g[r];
    });
}

/// [N, H, W, C] -> [N, C] averaging over the spatial dims.
template <typename T>
Var<T> global_avg_pool(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    if (va.rank() != 4) detail::op_fail("global_avg_pool", "expects NHWC, got " + shape_str(va.shape));
    const int N = va.dim(0), H = va.dim(1), W = va.dim(2), C = va.dim(3);
    const int64_t S = int64_t(H) * W;
    Tensor<T> y({N, C});
    for (int n = 0; n < N; ++n)
        for (int64_t s = 0; s < S; ++s)
            for (int c = 0; c < C; ++c) y[n * C + c] += va[(n * S + s) * C + c];
    for (auto& x : y.v) x /= T(S);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, N, S, C, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t n = 0; n < N; ++n)
                for (int64_t s = 0; s < S; ++s)
                    for (int c = 0; c < C; ++c) (*ga)[(n * S + s) * C + c] += g[n * C + c] / T(S);
    });
}

// ---------------------------------------------------------------------------
// Matmul / dense
// ---------------------------------------------------------------------------

/// A[M,K] x B[K,N] -> [M,N]. A may carry extra leading dims (flattened rows).
template <typename T>
Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b) {
    const Tensor<T>& va = t.val(a);
    const Tensor<T>& vb = t.val(b);
    if (vb.rank() != 2) detail::op_fail("matmul", "rhs must be rank 2, got " + shape_str(vb.shape));
    const int K = vb.dim(0), N = vb.dim(1);
    if (va.cols() != K)
        detail::op_fail("matmul", "inner dims " + shape_str(va.shape) + " x " + shape_str(vb.shape));
    const int64_t M = va.rows();
    std::vector<int> shape(va.shape.begin(), va.shape.end() - 1);
    shape.push_back(N);
    Tensor<T> y(shape);
    gemm_ab(M, K, N, va.data(), vb.data(), y.data());
    const bool needs = t.needs(a) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [a, b, M, K, N, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* ga = tp.grad_ref(a)) gemm_abt(M, N, K, g.data(), tp.val(b).data(), ga->data());
        if (auto* gb = tp.grad_ref(b)) gemm_atb(M, K, N, tp.val(a).data(), g.data(), gb->data());
    });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    const int K = va.cols();
    const int64_t R = va.rows();
    Tensor<T> y = va;
#pragma omp parallel for schedule(static) if (R * K >= (1 << 14))
    for (int64_t r = 0; r < R; ++r) {
        T* row = y.data() + r * K;
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = 0;
        for (int k = 0; k < K; ++k) {
            row[k] = detail::softmax_exp(row[k] - m);
            z += row[k];
        }
        const T inv = T(1) / z;
        for (int k = 0; k < K; ++k) row[k] *= inv;
    }
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, R, K, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& p = tp.val(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t r = 0; r < R; ++r) {
                T dot = 0;
                for (int k = 0; k < K; ++k) dot += g[r * K + k] * p[r * K + k];
                for (int k = 0; k < K; ++k) (*ga)[r * K + k] += p[r * K + k] * (g[r * K + k] - dot);
            }
    });
}

template <typename T>
Var<T> log_softmax_lastdim(Tape<T>& t, Var<T> a) {
    const Tensor<T>& va = t.val(a);
    const int K = va.cols();
    const int64_t R = va.rows();
    Tensor<T> y = va;
    for (int64_t r = 0; r < R; ++r) {
        T* row = y.data() + r * K;
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
        const T lse = m + std::log(z);
        for (int k = 0; k < K; ++k) row[k] -= lse;
    }
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(a), [a, R, K, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& ls = tp.val(out);
        if (auto* ga = tp.grad_ref(a))
            for (int64_t r = 0; r < R; ++r) {
                T gs = 0;
                for (int k = 0; k < K; ++k) gs += g[r * K + k];
                for (int k = 0; k < K; ++k)
                    (*ga)[r * K + k] += g[r * K + k] - std::exp(ls[r * K + k]) * gs;
            }
    });
}

/// Fused cross-entropy with integer targets per row. `classes` defaults to
/// the last dimension; passing it explicitly reinterprets the tensor as flat
/// rows of that width (e.g. a [N,H,W,3*256] head scored as 256-way pixels)
/// without a reshape copy.
template <typename T>
Var<T> softmax_ce(Tape<T>& t, Var<T> logits, const Tensor<int>& targets, int classes = -1) {
    const Tensor<T>& vl = t.val(logits);
    const int K = classes > 0 ? classes : vl.cols();
    if (vl.numel() % K != 0) detail::op_fail("softmax_ce", "element count not divisible by class count");
    const int64_t R = vl.numel() / K;
    if (targets.numel() != R)
        detail::op_fail("softmax_ce", "targets count " + std::to_string(targets.numel()) +
                                          " does not match rows " + std::to_string(R));
    for (int64_t r = 0; r < R; ++r)
        if (targets[r] < 0 || targets[r] >= K)
            detail::op_fail("softmax_ce", "target index " + std::to_string(targets[r]) +
                                              " out of range [0," + std::to_string(K) + ")");
    Tensor<T> y({static_cast<int>(R)});
    auto probs = std::make_shared<Tensor<T>>(vl.shape);
    const T* src = vl.data();
#pragma omp parallel for schedule(static) if (R * K >= (1 << 14))
    for (int64_t r = 0; r < R; ++r) {
        const T* in = src + r * K;
        T* row = probs->data() + r * K;
        T m = in[0];
        for (int k = 1; k < K; ++k) m = std::max(m, in[k]);
        T z = 0;
        for (int k = 0; k < K; ++k) {
            row[k] = detail::softmax_exp(in[k] - m);
            z += row[k];
        }
        const T inv = T(1) / z;
        for (int k = 0; k < K; ++k) row[k] *= inv;
        y[r] = m + std::log(z) - in[targets[r]];
    }
    auto tg = std::make_shared<Tensor<int>>(targets);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(logits), [logits, probs, tg, R, K, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* gl = tp.grad_ref(logits)) {
            T* dst = gl->data();
#pragma omp parallel for schedule(static) if (R * K >= (1 << 14))
            for (int64_t r = 0; r < R; ++r) {
                const T gr = g[r];
                if (gr == T(0)) continue;
                T* d = dst + r * K;
                const T* p = probs->data() + r * K;
                for (int k = 0; k < K; ++k) d[k] += gr * p[k];
                d[(*tg)[r]] -= gr;
            }
        }
    });
}

/// y[r] = x[r, idx[r]] for x [..., K].
template <typename T>
Var<T> gather_lastdim(Tape<T>& t, Var<T> x, const Tensor<int>& idx) {
    const Tensor<T>& vx = t.val(x);
    const int K = vx.cols();
    const int64_t R = vx.rows();
    if (idx.numel() != R) detail::op_fail("gather_lastdim", "index count mismatch");
    std::vector<int> shape(vx.shape.begin(), vx.shape.end() - 1);
    if (shape.empty()) shape = {1};
    Tensor<T> y(shape);
    for (int64_t r = 0; r < R; ++r) {
        if (idx[r] < 0 || idx[r] >= K) detail::op_fail("gather_lastdim", "index out of range");
        y[r] = vx[r * K + idx[r]];
    }
    auto ii = std::make_shared<Tensor<int>>(idx);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(x), [x, ii, R, K, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* gx = tp.grad_ref(x))
            for (int64_t r = 0; r < R; ++r) (*gx)[r * K + (*ii)[r]] += g[r];
    });
}

/// table[V, D] gathered by integer indices [R] -> [R, D].
template <typename T>
Var<T> embedding(Tape<T>& t, Var<T> table, const Tensor<int>& idx) {
    const Tensor<T>& vt = t.val(table);
    if (vt.rank() != 2) detail::op_fail("embedding", "table must be [vocab, dim]");
    const int V = vt.dim(0), D = vt.dim(1);
    const int64_t R = idx.numel();
    Tensor<T> y({static_cast<int>(R), D});
    for (int64_t r = 0; r < R; ++r) {
        if (idx[r] < 0 || idx[r] >= V) detail::op_fail("embedding", "index out of vocab range");
        const T* src = vt.data() + int64_t(idx[r]) * D;
        std::copy(src, src + D, y.data() + r * D);
    }
    auto ii = std::make_shared<Tensor<int>>(idx);
    Var<T> out = t.next_var();
    return t.push(std::move(y), t.needs(table), [table, ii, R, D, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        if (auto* gt = tp.grad_ref(table))
            for (int64_t r = 0; r < R; ++r)
                for (int d = 0; d < D; ++d) (*gt)[int64_t((*ii)[r]) * D + d] += g[r * D + d];
    });
}

// ---------------------------------------------------------------------------
// Layer norm (over the last dimension, population variance)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(Tape<T>& t, Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-6)) {
    const Tensor<T>& vx = t.val(x);
    const Tensor<T>& vg = t.val(gain);
    const Tensor<T>& vb = t.val(bias);
    const int C = vx.cols();
    if (vg.numel() != C || vb.numel() != C)
        detail::op_fail("layer_norm", "gain/bias must match last dim " + std::to_string(C));
    const int64_t R = vx.rows();
    Tensor<T> y = vx;
    auto xhat = std::make_shared<Tensor<T>>(vx.shape);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const T* row = vx.data() + r * C;
        T mu = 0;
        for (int c = 0; c < C; ++c) mu += row[c];
        mu /= T(C);
        T var = 0;
        for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= T(C);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = is;
        for (int c = 0; c < C; ++c) {
            const T xh = (row[c] - mu) * is;
            (*xhat)[r * C + c] = xh;
            y[r * C + c] = xh * vg[c] + vb[c];
        }
    }
    const bool needs = t.needs(x) || t.needs(gain) || t.needs(bias);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [x, gain, bias, xhat, inv_std, R, C, out](Tape<T>& tp) {
        const Tensor<T>& g = tp.out_grad(out);
        const Tensor<T>& vg2 = tp.val(gain);
        auto* gx = tp.grad_ref(x);
        auto* gg = tp.grad_ref(gain);
        auto* gb = tp.grad_ref(bias);
        for (int64_t r = 0; r < R; ++r) {
            const T is = (*inv_std)[static_cast<size_t>(r)];
            T sum_dy = 0, sum_dy_xh = 0;
            for (int c = 0; c < C; ++c) {
                const T dyg = g[r * C + c] * vg2[c];
                sum_dy += dyg;
                sum_dy_xh += dyg * (*xhat)[r * C + c];
            }
            for (int c = 0; c < C; ++c) {
                const int64_t i = r * C + c;
                if (gx) {
                    const T dyg = g[i] * vg2[c];
                    (*gx)[i] += is * (dyg - sum_dy / T(C) - (*xhat)[i] * sum_dy_xh / T(C));
                }
                if (gg) (*gg)[c] += g[i] * (*xhat)[i];
                if (gb) (*gb)[c] += g[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions (NHWC, "same"-style padding, ceil-divided output size)
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

struct ConvGeom {
    int N, H, W, Ci;   // conv input (the larger spatial side)
    int KH, KW, Co;    // kernel and conv output channels
    int SH, SW;        // strides
    int OH, OW;        // conv output (the smaller spatial side)
    int pad_top, pad_left;

    static ConvGeom make(const char* op, int N, int H, int W, int Ci, int KH, int KW, int Co, int SH, int SW,
                         Padding pad = Padding::same) {
        if (KH <= 0 || KW <= 0 || SH <= 0 || SW <= 0) detail::op_fail(op, "kernel and stride must be positive");
        ConvGeom g{N, H, W, Ci, KH, KW, Co, SH, SW, 0, 0, 0, 0};
        if (pad == Padding::same) {
            g.OH = (H + SH - 1) / SH;
            g.OW = (W + SW - 1) / SW;
            const int ph = std::max((g.OH - 1) * SH + KH - H, 0);
            const int pw = std::max((g.OW - 1) * SW + KW - W, 0);
            g.pad_top = ph / 2;
            g.pad_left = pw / 2;
        } else {
            if (H < KH || W < KW) detail::op_fail(op, "input smaller than kernel with valid padding");
            g.OH = (H - KH) / SH + 1;
            g.OW = (W - KW) / SW + 1;
        }
        return g;
    }

    int64_t rows() const { return int64_t(N) * OH * OW; }
    int64_t patch() const { return int64_t(KH) * KW * Ci; }
};

namespace detail {

/// Gather conv patches: col[rows, KH*KW*Ci] from x[N,H,W,Ci].
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
    const int64_t patch = g.patch();
#pragma omp parallel for schedule(static) if (g.rows() * patch >= (1 << 15))
    for (int64_t n = 0; n < g.N; ++n) {
        const T* xn = x + n * int64_t(g.H) * g.W * g.Ci;
        for (int oh = 0; oh < g.OH; ++oh)
            for (int ow = 0; ow < g.OW; ++ow) {
                T* dst = col + ((n * g.OH + oh) * int64_t(g.OW) + ow) * patch;
                for (int kh = 0; kh < g.KH; ++kh) {
                    const int ih = oh * g.SH - g.pad_top + kh;
                    for (int kw = 0; kw < g.KW; ++kw) {
                        const int iw = ow * g.SW - g.pad_left + kw;
                        T* d = dst + (kh * int64_t(g.KW) + kw) * g.Ci;
                        if (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W) {
                            const T* s = xn + (int64_t(ih) * g.W + iw) * g.Ci;
                            std::copy(s, s + g.Ci, d);
                        } else {
                            std::fill(d, d + g.Ci, T(0));
                        }
                    }
                }
            }
    }
}

/// Scatter-add conv patches back: x[N,H,W,Ci] += col[rows, KH*KW*Ci].
/// Parallel over samples only; within a sample the order is fixed.
template <typename T>
void col2im(const ConvGeom& g, const T* col, T* x) {
    const int64_t patch = g.patch();
#pragma omp parallel for schedule(static) if (g.rows() * patch >= (1 << 15))
    for (int64_t n = 0; n < g.N; ++n) {
        T* xn = x + n * int64_t(g.H) * g.W * g.Ci;
        for (int oh = 0; oh < g.OH; ++oh)
            for (int ow = 0; ow < g.OW; ++ow) {
                const T* src = col + ((n * g.OH + oh) * int64_t(g.OW) + ow) * patch;
                for (int kh = 0; kh < g.KH; ++kh) {
                    const int ih = oh * g.SH - g.pad_top + kh;
                    if (ih < 0 || ih >= g.H) continue;
                    for (int kw = 0; kw < g.KW; ++kw) {
                        const int iw = ow * g.SW - g.pad_left + kw;
                        if (iw < 0 || iw >= g.W) continue;
                        const T* s = src + (kh * int64_t(g.KW) + kw) * g.Ci;
                        T* d = xn + (int64_t(ih) * g.W + iw) * g.Ci;
                        for (int c = 0; c < g.Ci; ++c) d[c] += s[c];
                    }
                }
            }
    }
}

}  // namespace detail

/// x[N,H,W,Ci] * w[KH,KW,Ci,Co] + b[Co] -> [N,OH,OW,Co].
/// Same padding gives OH = ceil(H/SH); valid gives OH = (H-KH)/SH + 1.
template <typename T>
Var<T> conv2d(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b, int stride_h, int stride_w,
              Padding pad = Padding::same) {
    const Tensor<T>& vx = t.val(x);
    const Tensor<T>& vw = t.val(w);
    const Tensor<T>& vb = t.val(b);
    if (vx.rank() != 4) detail::op_fail("conv2d", "input must be NHWC, got " + shape_str(vx.shape));
    if (vw.rank() != 4) detail::op_fail("conv2d", "weight must be [KH,KW,Ci,Co]");
    if (vw.dim(2) != vx.dim(3))
        detail::op_fail("conv2d", "input channels " + std::to_string(vx.dim(3)) +
                                      " do not match weight " + shape_str(vw.shape));
    const ConvGeom g = ConvGeom::make("conv2d", vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3),
                                      vw.dim(0), vw.dim(1), vw.dim(3), stride_h, stride_w, pad);
    if (vb.numel() != g.Co) detail::op_fail("conv2d", "bias size must equal output channels");
    Tensor<T> col({static_cast<int>(g.rows()), static_cast<int>(g.patch())});
    detail::im2col(g, vx.data(), col.data());
    Tensor<T> y({g.N, g.OH, g.OW, g.Co});
    // Seed the output with the bias so the GEMM accumulation finishes it in
    // one pass over what can be a large tensor.
    for (int64_t r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.Co; ++c) y[r * g.Co + c] = vb[c];
    gemm_ab(g.rows(), g.patch(), g.Co, col.data(), vw.data(), y.data());
    const bool needs = t.needs(x) || t.needs(w) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [x, w, b, g, out](Tape<T>& tp) {
        const Tensor<T>& gy = tp.out_grad(out);
        auto* gx = tp.grad_ref(x);
        auto* gw = tp.grad_ref(w);
        auto* gb = tp.grad_ref(b);
        if (gb)
            for (int64_t r = 0; r < g.rows(); ++r)
                for (int c = 0; c < g.Co; ++c) (*gb)[c] += gy[r * g.Co + c];
        if (gw) {
            Tensor<T> col({static_cast<int>(g.rows()), static_cast<int>(g.patch())});
            detail::im2col(g, tp.val(x).data(), col.data());
            gemm_atb(g.rows(), g.patch(), g.Co, col.data(), gy.data(), gw->data());
        }
        if (gx) {
            Tensor<T> dcol({static_cast<int>(g.rows()), static_cast<int>(g.patch())});
            gemm_abt(g.rows(), g.Co, g.patch(), gy.data(), tp.val(w).data(), dcol.data());
            detail::col2im(g, dcol.data(), gx->data());
        }
    });
}

/// Transposed convolution as the exact adjoint of conv2d: maps [N,h,w,Cin]
/// up to [N,OH,OW,Co] where conv2d with the same kernel geometry would map
/// [OH,OW] down to [h,w]. Weight layout [KH,KW,Co,Cin]. The output spatial
/// size is explicit because ceil-division is not invertible.
template <typename T>
Var<T> conv2d_transpose(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b, int stride_h, int stride_w,
                        int out_h, int out_w) {
    const Tensor<T>& vx = t.val(x);
    const Tensor<T>& vw = t.val(w);
    const Tensor<T>& vb = t.val(b);
    if (vx.rank() != 4) detail::op_fail("conv2d_transpose", "input must be NHWC");
    if (vw.rank() != 4) detail::op_fail("conv2d_transpose", "weight must be [KH,KW,Co,Ci]");
    if (vw.dim(3) != vx.dim(3))
        detail::op_fail("conv2d_transpose", "input channels " + std::to_string(vx.dim(3)) +
                                                " do not match weight " + shape_str(vw.shape));
    if ((out_h + stride_h - 1) / stride_h != vx.dim(1) || (out_w + stride_w - 1) / stride_w != vx.dim(2))
        detail::op_fail("conv2d_transpose", "output size " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                                " is not restorable from input " + shape_str(vx.shape) +
                                                " at this stride");
    // Geometry of the adjoint conv: big side = output, small side = input.
    const ConvGeom g = ConvGeom::make("conv2d_transpose", vx.dim(0), out_h, out_w, vw.dim(2),
                                      vw.dim(0), vw.dim(1), vx.dim(3), stride_h, stride_w);
    if (vb.numel() != g.Ci) detail::op_fail("conv2d_transpose", "bias size must equal output channels");
    // y = col2im(x * w^T): x rows [N*h*w, Cin], w [KH*KW*Co, Cin].
    Tensor<T> dcol({static_cast<int>(g.rows()), static_cast<int>(g.patch())});
    gemm_abt(g.rows(), g.Co, g.patch(), vx.data(), vw.data(), dcol.data());
    Tensor<T> y({g.N, out_h, out_w, g.Ci});
    detail::col2im(g, dcol.data(), y.data());
    for (int64_t r = 0; r < int64_t(g.N) * out_h * out_w; ++r)
        for (int c = 0; c < g.Ci; ++c) y[r * g.Ci + c] += vb[c];
    const bool needs = t.needs(x) || t.needs(w) || t.needs(b);
    Var<T> out = t.next_var();
    return t.push(std::move(y), needs, [x, w, b, g, out_h, out_w, out](Tape<T>& tp) {
        const Tensor<T>& gy = tp.out_grad(out);
        auto* gx = tp.grad_ref(x);
        auto* gw = tp.grad_ref(w);
        auto* gb = tp.grad_ref(b);
        if (gb)
            for (int64_t r = 0; r < int64_t(g.N) * out_h * out_w; ++r)
                for (int c = 0; c < g.Ci; ++c) (*gb)[c] += gy[r * g.Ci + c];
        if (gx || gw) {
            Tensor<T> col({static_cast<int>(g.rows()), static_cast<int>(g.patch())});
            detail::im2col(g, gy.data(), col.data());
            if (gx) gemm_ab(g.rows(), g.patch(), g.Co, col.data(), tp.val(w).data(), gx->data());
            if (gw) gemm_atb(g.rows(), g.patch(), g.Co, col.data(), tp.val(x).data(), gw->data());
        }
    });
}

}  // namespace simple
