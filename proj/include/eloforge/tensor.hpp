// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal deterministic reverse-mode autograd engine. Supplies exactly the
// operations the decoder model needs; f32 for training, f64 for gradient
// checking. Single-threaded by default; ELO_FORGE_THREADS may row-partition
// the matmul kernels (bitwise identical to the single-thread result because
// each output row keeps its reduction order).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "eloforge/errors.hpp"
#include "eloforge/rng.hpp"

namespace eloforge {

// ---------------------------------------------------------------------------
// Threading for the matmul kernels.

inline unsigned matmul_threads() {
    static const unsigned n = [] {
        const char* env = std::getenv("ELO_FORGE_THREADS");
        if (!env) return 1u;
        long v = std::strtol(env, nullptr, 10);
        if (v < 1) return 1u;
        if (v > 256) return 256u;
        return static_cast<unsigned>(v);
    }();
    return n;
}

// Runs fn(row_begin, row_end) over a deterministic contiguous partition of
// [0, m). With one thread (the default) no thread is spawned.
template <typename F>
void parallel_rows(size_t m, F&& fn) {
    unsigned t = matmul_threads();
    if (t <= 1 || m < 2 * t) {
        fn(size_t(0), m);
        return;
    }
    size_t chunk = (m + t - 1) / t;
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (unsigned w = 0; w < t; ++w) {
        size_t lo = std::min(m, w * chunk);
        size_t hi = std::min(m, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Raw kernels. All accumulate into c; callers zero-fill fresh outputs and
// pass gradient buffers directly so accumulation (+=) is the native mode.

// c[M,N] += a[M,K] · b[K,N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    parallel_rows(M, [=](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            const T* arow = a + i * K;
            T* crow = c + i * N;
            for (size_t k = 0; k < K; ++k) {
                T aik = arow[k];
                const T* brow = b + k * N;
                for (size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
            }
        }
    });
}

// c[M,N] += a[M,K] · bt[N,K]ᵀ  (bt stored row-major as [N,K])
template <typename T>
void gemm_abt_acc(const T* a, const T* bt, T* c, size_t M, size_t K, size_t N) {
    parallel_rows(M, [=](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            const T* arow = a + i * K;
            T* crow = c + i * N;
            for (size_t j = 0; j < N; ++j) {
                const T* brow = bt + j * K;
                T acc = 0;
                for (size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
                crow[j] += acc;
            }
        }
    });
}

// c[K,N] += a[M,K]ᵀ · b[M,N]  (single-threaded: rows of c are shared across i)
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    for (size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * N;
        for (size_t k = 0; k < K; ++k) {
            T aik = arow[k];
            T* crow = c + k * N;
            for (size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Autograd graph.

inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

// Disables graph recording in scope (evaluation / greedy decode).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct NodeT {
    std::vector<size_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty = absent
    bool requires_grad = false;
    std::string name;  // set on parameters; empty for interior nodes
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backprop;  // receives *this; adds into parent grads

    size_t numel() const { return data.size(); }

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

inline size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

inline void check_shape(const std::vector<size_t>& shape) {
    if (shape.empty()) throw InvalidShape("tensor shape must be non-empty");
    for (size_t d : shape)
        if (d == 0) throw InvalidShape("tensor dims must be >= 1");
}

inline std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> n) : node_(std::move(n)) {}

    static TensorT zeros(const std::vector<size_t>& shape, bool requires_grad = false) {
        return filled(shape, T(0), requires_grad);
    }
    static TensorT ones(const std::vector<size_t>& shape, bool requires_grad = false) {
        return filled(shape, T(1), requires_grad);
    }
    static TensorT filled(const std::vector<size_t>& shape, T value, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<NodeT<T>>();
        n->shape = shape;
        n->data.assign(shape_numel(shape), value);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }
    // Deterministic per (seed, name): the stream key is seed ^ fnv1a64(name),
    // so initialization is independent of construction order.
    static TensorT normal(const std::vector<size_t>& shape, double std, uint64_t seed,
                          std::string_view name, bool requires_grad = false) {
        check_shape(shape);
        if (!(std > 0)) throw InvalidShape("normal init requires std > 0");
        auto n = std::make_shared<NodeT<T>>();
        n->shape = shape;
        n->data.resize(shape_numel(shape));
        n->name = std::string(name);
        n->requires_grad = requires_grad;
        CounterRng rng(seed, name);
        for (auto& x : n->data) x = static_cast<T>(std * rng.next_gauss());
        return TensorT(std::move(n));
    }
    static TensorT from_values(const std::vector<size_t>& shape, std::vector<T> values,
                               bool requires_grad = false) {
        check_shape(shape);
        if (shape_numel(shape) != values.size())
            throw InvalidShape("value count does not match shape " + shape_str(shape));
        auto n = std::make_shared<NodeT<T>>();
        n->shape = shape;
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    NodeT<T>* node() const { return node_.get(); }
    const std::shared_ptr<NodeT<T>>& handle() const { return node_; }

    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t numel() const { return node_->numel(); }
    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    const std::string& name() const { return node_->name; }
    void set_name(std::string n) { node_->name = std::move(n); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a scalar, got " + shape_str(shape()));
        return node_->data[0];
    }

    // Deep copy of shape/data/flags; grad is not copied.
    TensorT clone() const {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->requires_grad = node_->requires_grad;
        n->name = node_->name;
        return TensorT(std::move(n));
    }

    // Reverse-mode sweep from this scalar. Gradients accumulate into leaf
    // tensors; interior gradients are freed as the sweep retires them, so a
    // second backward over a fresh graph doubles leaf grads exactly.
    void backward() const {
        if (!node_ || node_->numel() != 1)
            throw ShapeError("backward() requires a scalar loss");
        std::vector<NodeT<T>*> order;
        std::unordered_set<NodeT<T>*> seen;
        struct Frame {
            NodeT<T>* n;
            size_t next;
        };
        std::vector<Frame> stk;
        stk.push_back({node_.get(), 0});
        seen.insert(node_.get());
        while (!stk.empty()) {
            Frame& f = stk.back();
            if (f.next < f.n->parents.size()) {
                NodeT<T>* p = f.n->parents[f.next++].get();
                if (p && p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stk.push_back({p, 0});
                }
            } else {
                order.push_back(f.n);
                stk.pop_back();
            }
        }
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* n = *it;
            if (!n->backprop) continue;  // leaf: keep accumulated grad
            if (!n->grad.empty()) n->backprop(*n);
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }

private:
    std::shared_ptr<NodeT<T>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// Op helpers.

template <typename T>
std::shared_ptr<NodeT<T>> make_node(std::vector<size_t> shape, std::vector<T> data) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

// Attaches graph metadata to out when recording is on and any parent needs
// gradients; otherwise the op is pure data flow and the graph is pruned here.
template <typename T, typename F>
void record(const std::shared_ptr<NodeT<T>>& out,
            std::vector<std::shared_ptr<NodeT<T>>> parents, F&& fn) {
    if (!grad_mode()) return;
    bool need = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) need = true;
    if (!need) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backprop = std::forward<F>(fn);
}

// ---------------------------------------------------------------------------
// Operations.

// c[i][j] = Σ_k a[i][k]·b[k][j]; dA = dC·Bᵀ, dB = Aᵀ·dC.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(as) + " and " +
                         shape_str(bs));
    if (as[1] != bs[0])
        throw ShapeError("matmul inner dims differ: " + shape_str(as) + " vs " + shape_str(bs));
    size_t M = as[0], K = as[1], N = bs[1];
    auto out = make_node<T>({M, N}, std::vector<T>(M * N, T(0)));
    gemm_acc(a.data().data(), b.data().data(), out->data.data(), M, K, N);
    auto pa = a.handle(), pb = b.handle();
    record(out, {pa, pb}, [pa, pb, M, K, N](NodeT<T>& self) {
        if (pa->requires_grad)
            gemm_abt_acc(self.grad.data(), pb->data.data(), pa->ensure_grad().data(), M, N, K);
        if (pb->requires_grad)
            gemm_atb_acc(pa->data.data(), self.grad.data(), pb->ensure_grad().data(), M, K, N);
    });
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    size_t n = a.numel();
    std::vector<T> d(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (size_t i = 0; i < n; ++i) d[i] = pa[i] + pb[i];
    auto out = make_node<T>(a.shape(), std::move(d));
    auto ha = a.handle(), hb = b.handle();
    record(out, {ha, hb}, [ha, hb, n](NodeT<T>& self) {
        for (auto& h : {ha, hb}) {
            if (!h->requires_grad) continue;
            T* g = h->ensure_grad().data();
            const T* sg = self.grad.data();
            for (size_t i = 0; i < n; ++i) g[i] += sg[i];
        }
    });
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    size_t n = a.numel();
    std::vector<T> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = a.data()[i] * b.data()[i];
    auto out = make_node<T>(a.shape(), std::move(d));
    auto ha = a.handle(), hb = b.handle();
    record(out, {ha, hb}, [ha, hb, n](NodeT<T>& self) {
        const T* sg = self.grad.data();
        if (ha->requires_grad) {
            T* g = ha->ensure_grad().data();
            const T* other = hb->data.data();
            for (size_t i = 0; i < n; ++i) g[i] += sg[i] * other[i];
        }
        if (hb->requires_grad) {
            T* g = hb->ensure_grad().data();
            const T* other = ha->data.data();
            for (size_t i = 0; i < n; ++i) g[i] += sg[i] * other[i];
        }
    });
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, double c) {
    size_t n = a.numel();
    std::vector<T> d(n);
    T tc = static_cast<T>(c);
    for (size_t i = 0; i < n; ++i) d[i] = a.data()[i] * tc;
    auto out = make_node<T>(a.shape(), std::move(d));
    auto ha = a.handle();
    record(out, {ha}, [ha, tc, n](NodeT<T>& self) {
        if (!ha->requires_grad) return;
        T* g = ha->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) g[i] += self.grad[i] * tc;
    });
    return TensorT<T>(out);
}

// x · sigmoid(x)
template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
    size_t n = a.numel();
    std::vector<T> d(n);
    for (size_t i = 0; i < n; ++i) {
        T x = a.data()[i];
        T s = T(1) / (T(1) + std::exp(-x));
        d[i] = x * s;
    }
    auto out = make_node<T>(a.shape(), std::move(d));
    auto ha = a.handle();
    record(out, {ha}, [ha, n](NodeT<T>& self) {
        if (!ha->requires_grad) return;
        T* g = ha->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) {
            T x = ha->data[i];
            T s = T(1) / (T(1) + std::exp(-x));
            g[i] += self.grad[i] * (s * (T(1) + x * (T(1) - s)));
        }
    });
    return TensorT<T>(out);
}

// Row-stable softmax over the last axis of a rank-2 tensor.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
    if (a.shape().size() != 2)
        throw ShapeError("softmax_rows expects rank-2, got " + shape_str(a.shape()));
    size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<T> d(m * n);
    for (size_t i = 0; i < m; ++i) {
        const T* row = a.data().data() + i * n;
        T* orow = d.data() + i * n;
        T mx = row[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        T inv = T(1) / sum;
        for (size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    auto out = make_node<T>(a.shape(), std::move(d));
    auto ha = a.handle();
    record(out, {ha}, [ha, m, n](NodeT<T>& self) {
        if (!ha->requires_grad) return;
        T* g = ha->ensure_grad().data();
        for (size_t i = 0; i < m; ++i) {
            const T* p = self.data.data() + i * n;
            const T* dy = self.grad.data() + i * n;
            T dot = 0;
            for (size_t j = 0; j < n; ++j) dot += p[j] * dy[j];
            for (size_t j = 0; j < n; ++j) g[i * n + j] += p[j] * (dy[j] - dot);
        }
    });
    return TensorT<T>(out);
}

// y = x / sqrt(mean(x²) + eps) · gain, per last-axis vector.
template <typename T>
TensorT<T> rms_norm(const TensorT<T>& x, const TensorT<T>& gain, double eps) {
    if (!(eps > 0)) throw InvalidShape("rms_norm requires eps > 0");
    const auto& xs = x.shape();
    size_t d = xs.back();
    if (gain.shape().size() != 1 || gain.shape()[0] != d)
        throw ShapeError("rms_norm gain must be [d], got " + shape_str(gain.shape()));
    size_t rows = x.numel() / d;
    std::vector<T> out_data(x.numel());
    std::vector<T> inv(rows);
    for (size_t r = 0; r < rows; ++r) {
        const T* row = x.data().data() + r * d;
        double ms = 0;
        for (size_t j = 0; j < d; ++j) ms += double(row[j]) * double(row[j]);
        ms /= double(d);
        T rinv = static_cast<T>(1.0 / std::sqrt(ms + eps));
        inv[r] = rinv;
        T* orow = out_data.data() + r * d;
        for (size_t j = 0; j < d; ++j) orow[j] = row[j] * rinv * gain.data()[j];
    }
    auto out = make_node<T>(xs, std::move(out_data));
    auto hx = x.handle(), hg = gain.handle();
    record(out, {hx, hg}, [hx, hg, inv = std::move(inv), rows, d](NodeT<T>& self) {
        for (size_t r = 0; r < rows; ++r) {
            const T* xrow = hx->data.data() + r * d;
            const T* dy = self.grad.data() + r * d;
            T rinv = inv[r];
            if (hx->requires_grad) {
                // dL/dx_j = r·g_j·u_j − (r³/d)·x_j·Σ_i u_i·g_i·x_i
                double dot = 0;
                for (size_t j = 0; j < d; ++j)
                    dot += double(dy[j]) * double(hg->data[j]) * double(xrow[j]);
                T c = static_cast<T>(double(rinv) * double(rinv) * double(rinv) * dot / double(d));
                T* gx = hx->ensure_grad().data() + r * d;
                for (size_t j = 0; j < d; ++j)
                    gx[j] += rinv * hg->data[j] * dy[j] - c * xrow[j];
            }
            if (hg->requires_grad) {
                T* gg = hg->ensure_grad().data();
                for (size_t j = 0; j < d; ++j) gg[j] += dy[j] * xrow[j] * rinv;
            }
        }
    });
    return TensorT<T>(out);
}

// Gathers rows of table for each id; backward scatter-adds.
template <typename T>
TensorT<T> embedding_rows(const TensorT<T>& table, std::span<const int32_t> ids) {
    if (table.shape().size() != 2)
        throw ShapeError("embedding table must be rank-2, got " + shape_str(table.shape()));
    if (ids.empty()) throw InvalidShape("embedding_rows requires at least one id");
    size_t V = table.shape()[0], d = table.shape()[1];
    for (int32_t id : ids)
        if (id < 0 || size_t(id) >= V)
            throw IndexError("token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(V) + ")");
    size_t s = ids.size();
    std::vector<T> out_data(s * d);
    for (size_t p = 0; p < s; ++p)
        std::copy_n(table.data().data() + size_t(ids[p]) * d, d, out_data.data() + p * d);
    auto out = make_node<T>({s, d}, std::move(out_data));
    auto ht = table.handle();
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    record(out, {ht}, [ht, ids_copy = std::move(ids_copy), d](NodeT<T>& self) {
        if (!ht->requires_grad) return;
        T* g = ht->ensure_grad().data();
        for (size_t p = 0; p < ids_copy.size(); ++p) {
            const T* src = self.grad.data() + p * d;
            T* dst = g + size_t(ids_copy[p]) * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return TensorT<T>(out);
}

// Multi-head causal self-attention with rotary position encoding applied to
// q and k. q/k/v are post-projection [s, d]; cos/sin tables are [rope_rows,
// head_dim/2]. Fused (one graph node) to keep graphs small.
template <typename T>
TensorT<T> causal_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                            size_t n_heads, const std::vector<T>& cos_tab,
                            const std::vector<T>& sin_tab, size_t rope_rows) {
    const auto& qs = q.shape();
    if (qs.size() != 2 || k.shape() != qs || v.shape() != qs)
        throw ShapeError("causal_attention expects q,k,v of identical [s,d] shape");
    size_t s = qs[0], d = qs[1];
    if (n_heads == 0 || d % n_heads != 0)
        throw ShapeError("d_model must be divisible by n_heads");
    size_t dh = d / n_heads;
    if (dh % 2 != 0) throw ShapeError("head dim must be even for rotary encoding");
    size_t half = dh / 2;
    if (s > rope_rows) throw ShapeError("sequence longer than rotary table");
    if (cos_tab.size() < rope_rows * half || sin_tab.size() < rope_rows * half)
        throw ShapeError("rotary table too small");

    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(double(dh)));

    // Rope q and k (all heads share the per-position angle table).
    auto rope_apply = [&](const std::vector<T>& src, std::vector<T>& dst) {
        dst.resize(s * d);
        for (size_t p = 0; p < s; ++p) {
            const T* crow = cos_tab.data() + p * half;
            const T* srow = sin_tab.data() + p * half;
            for (size_t h = 0; h < n_heads; ++h) {
                const T* in = src.data() + p * d + h * dh;
                T* outp = dst.data() + p * d + h * dh;
                for (size_t i = 0; i < half; ++i) {
                    T x0 = in[2 * i], x1 = in[2 * i + 1];
                    outp[2 * i] = x0 * crow[i] - x1 * srow[i];
                    outp[2 * i + 1] = x0 * srow[i] + x1 * crow[i];
                }
            }
        }
    };
    auto rq = std::make_shared<std::vector<T>>();
    auto rk = std::make_shared<std::vector<T>>();
    rope_apply(q.data(), *rq);
    rope_apply(k.data(), *rk);

    // probs: [n_heads, s, s] lower-triangular rows (zeros above the diagonal).
    auto probs = std::make_shared<std::vector<T>>(n_heads * s * s, T(0));
    std::vector<T> out_data(s * d, T(0));
    for (size_t h = 0; h < n_heads; ++h) {
        size_t off = h * dh;
        T* ph = probs->data() + h * s * s;
        for (size_t i = 0; i < s; ++i) {
            const T* qi = rq->data() + i * d + off;
            T* prow = ph + i * s;
            T mx = -std::numeric_limits<T>::infinity();
            for (size_t j = 0; j <= i; ++j) {
                const T* kj = rk->data() + j * d + off;
                T acc = 0;
                for (size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
                prow[j] = acc * inv_sqrt;
                mx = std::max(mx, prow[j]);
            }
            T sum = 0;
            for (size_t j = 0; j <= i; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                sum += prow[j];
            }
            T inv = T(1) / sum;
            T* orow = out_data.data() + i * d + off;
            for (size_t j = 0; j <= i; ++j) {
                prow[j] *= inv;
                const T* vj = v.data().data() + j * d + off;
                for (size_t t = 0; t < dh; ++t) orow[t] += prow[j] * vj[t];
            }
        }
    }

    auto out = make_node<T>({s, d}, std::move(out_data));
    auto hq = q.handle(), hk = k.handle(), hv = v.handle();
    // Capture the cos/sin tables by pointer-to-copy to keep the node
    // self-contained even if the model dies before backward (tests do this).
    auto ctab = std::make_shared<std::vector<T>>(cos_tab.begin(), cos_tab.begin() + rope_rows * half);
    auto stab = std::make_shared<std::vector<T>>(sin_tab.begin(), sin_tab.begin() + rope_rows * half);
    record(out, {hq, hk, hv},
           [hq, hk, hv, rq, rk, probs, ctab, stab, s, d, dh, n_heads, half,
            inv_sqrt](NodeT<T>& self) {
               std::vector<T> drq(s * d, T(0)), drk(s * d, T(0));
               bool need_qk = hq->requires_grad || hk->requires_grad;
               std::vector<T> dp(s), ds(s);
               for (size_t h = 0; h < n_heads; ++h) {
                   size_t off = h * dh;
                   const T* ph = probs->data() + h * s * s;
                   for (size_t i = 0; i < s; ++i) {
                       const T* dout = self.grad.data() + i * d + off;
                       const T* prow = ph + i * s;
                       // dP[i][j] = dout·v_j ; dV_j += P[i][j]·dout
                       for (size_t j = 0; j <= i; ++j) {
                           const T* vj = hv->data.data() + j * d + off;
                           T acc = 0;
                           for (size_t t = 0; t < dh; ++t) acc += dout[t] * vj[t];
                           dp[j] = acc;
                       }
                       if (hv->requires_grad) {
                           T* gv = hv->ensure_grad().data();
                           for (size_t j = 0; j <= i; ++j) {
                               T pij = prow[j];
                               T* gvj = gv + j * d + off;
                               for (size_t t = 0; t < dh; ++t) gvj[t] += pij * dout[t];
                           }
                       }
                       if (!need_qk) continue;
                       T dot = 0;
                       for (size_t j = 0; j <= i; ++j) dot += prow[j] * dp[j];
                       for (size_t j = 0; j <= i; ++j) ds[j] = prow[j] * (dp[j] - dot);
                       T* drqi = drq.data() + i * d + off;
                       for (size_t j = 0; j <= i; ++j) {
                           T dsij = ds[j] * inv_sqrt;
                           const T* rkj = rk->data() + j * d + off;
                           const T* rqi = rq->data() + i * d + off;
                           T* drkj = drk.data() + j * d + off;
                           for (size_t t = 0; t < dh; ++t) {
                               drqi[t] += dsij * rkj[t];
                               drkj[t] += dsij * rqi[t];
                           }
                       }
                   }
               }
               // Un-rope: dq = Rᵀ·drq per pair.
               auto unrope_into = [&](const std::vector<T>& dr, NodeT<T>& dst) {
                   T* g = dst.ensure_grad().data();
                   for (size_t p = 0; p < s; ++p) {
                       const T* crow = ctab->data() + p * half;
                       const T* srow = stab->data() + p * half;
                       for (size_t h2 = 0; h2 < n_heads; ++h2) {
                           const T* in = dr.data() + p * d + h2 * dh;
                           T* outp = g + p * d + h2 * dh;
                           for (size_t i = 0; i < half; ++i) {
                               T d0 = in[2 * i], d1 = in[2 * i + 1];
                               outp[2 * i] += d0 * crow[i] + d1 * srow[i];
                               outp[2 * i + 1] += -d0 * srow[i] + d1 * crow[i];
                           }
                       }
                   }
               };
               if (hq->requires_grad) unrope_into(drq, *hq);
               if (hk->requires_grad) unrope_into(drk, *hk);
           });
    return TensorT<T>(out);
}

// Mean negative log-likelihood over unmasked positions; the causal LM loss.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int32_t> targets,
                         std::span<const uint8_t> mask) {
    const auto& ls = logits.shape();
    if (ls.size() != 2) throw ShapeError("cross_entropy expects [s,V] logits");
    size_t s = ls[0], V = ls[1];
    if (targets.size() != s || mask.size() != s)
        throw ShapeError("cross_entropy targets/mask length must equal sequence length");
    size_t count = 0;
    for (size_t p = 0; p < s; ++p) {
        if (targets[p] < 0 || size_t(targets[p]) >= V)
            throw IndexError("target id " + std::to_string(targets[p]) + " out of range [0," +
                             std::to_string(V) + ")");
        if (mask[p]) ++count;
    }
    if (count == 0) throw EmptyLossError("cross_entropy: all positions masked");
    double acc = 0;
    for (size_t p = 0; p < s; ++p) {
        if (!mask[p]) continue;
        const T* row = logits.data().data() + p * V;
        double mx = row[0];
        for (size_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
        double sum = 0;
        for (size_t j = 0; j < V; ++j) sum += std::exp(double(row[j]) - mx);
        double lse = mx + std::log(sum);
        acc += lse - double(row[targets[p]]);
    }
    auto out = make_node<T>({1}, {static_cast<T>(acc / double(count))});
    auto hl = logits.handle();
    std::vector<int32_t> tcopy(targets.begin(), targets.end());
    std::vector<uint8_t> mcopy(mask.begin(), mask.end());
    record(out, {hl},
           [hl, tcopy = std::move(tcopy), mcopy = std::move(mcopy), s, V, count](NodeT<T>& self) {
               if (!hl->requires_grad) return;
               double g = double(self.grad[0]) / double(count);
               T* gl = hl->ensure_grad().data();
               for (size_t p = 0; p < s; ++p) {
                   if (!mcopy[p]) continue;
                   const T* row = hl->data.data() + p * V;
                   double mx = row[0];
                   for (size_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
                   double sum = 0;
                   for (size_t j = 0; j < V; ++j) sum += std::exp(double(row[j]) - mx);
                   for (size_t j = 0; j < V; ++j) {
                       double prob = std::exp(double(row[j]) - mx) / sum;
                       double delta = (size_t(tcopy[p]) == j) ? 1.0 : 0.0;
                       gl[p * V + j] += static_cast<T>(g * (prob - delta));
                   }
               }
           });
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    double acc = 0;
    for (T x : a.data()) acc += double(x);
    auto out = make_node<T>({1}, {static_cast<T>(acc)});
    auto ha = a.handle();
    record(out, {ha}, [ha](NodeT<T>& self) {
        if (!ha->requires_grad) return;
        T g = self.grad[0];
        for (auto& v : ha->ensure_grad()) v += g;
    });
    return TensorT<T>(out);
}

// Σ w_i·x_i over scalar tensors; combines per-item losses into a batch loss.
template <typename T>
TensorT<T> weighted_sum(const std::vector<TensorT<T>>& xs, const std::vector<double>& ws) {
    if (xs.empty() || xs.size() != ws.size())
        throw ShapeError("weighted_sum needs equally many tensors and weights, >= 1");
    double acc = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    parents.reserve(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) throw ShapeError("weighted_sum operands must be scalars");
        acc += ws[i] * double(xs[i].data()[0]);
        parents.push_back(xs[i].handle());
    }
    auto out = make_node<T>({1}, {static_cast<T>(acc)});
    auto wcopy = ws;
    record(out, std::move(parents), [wcopy = std::move(wcopy)](NodeT<T>& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parents[i];
            if (p->requires_grad) p->ensure_grad()[0] += static_cast<T>(wcopy[i] * double(self.grad[0]));
        }
    });
    return TensorT<T>(out);
}

// Stacks same-shape tensors along a new leading axis.
template <typename T>
TensorT<T> stack(const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw ShapeError("stack requires at least one tensor");
    const auto& s0 = xs[0].shape();
    size_t per = xs[0].numel();
    std::vector<T> d;
    d.reserve(per * xs.size());
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    for (const auto& x : xs) {
        if (x.shape() != s0) throw ShapeError("stack operands must share a shape");
        d.insert(d.end(), x.data().begin(), x.data().end());
        parents.push_back(x.handle());
    }
    std::vector<size_t> shape{xs.size()};
    shape.insert(shape.end(), s0.begin(), s0.end());
    auto out = make_node<T>(std::move(shape), std::move(d));
    record(out, std::move(parents), [per](NodeT<T>& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parents[i];
            if (!p->requires_grad) continue;
            T* g = p->ensure_grad().data();
            const T* src = self.grad.data() + i * per;
            for (size_t j = 0; j < per; ++j) g[j] += src[j];
        }
    });
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// AdamW.

struct AdamWParams {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

template <typename T>
struct AdamWStateT {
    std::vector<T> m, v;
    uint64_t t = 0;
};

using AdamWState = AdamWStateT<float>;

// Decoupled weight decay applied separately from the Adam update; bias
// correction with step t. An absent grad buffer counts as a zero gradient.
template <typename T>
void adamw_step(TensorT<T>& w, AdamWStateT<T>& st, const AdamWParams& hp) {
    size_t n = w.numel();
    if (st.m.empty()) st.m.assign(n, T(0));
    if (st.v.empty()) st.v.assign(n, T(0));
    if (st.m.size() != n || st.v.size() != n)
        throw ShapeError("optimizer state shape does not match parameter");
    const std::vector<T>& gv = w.grad();
    if (!gv.empty() && gv.size() != n)
        throw ShapeError("gradient shape does not match parameter");
    st.t += 1;
    double bc1 = 1.0 - std::pow(hp.beta1, double(st.t));
    double bc2 = 1.0 - std::pow(hp.beta2, double(st.t));
    T* wd = w.data().data();
    T* m = st.m.data();
    T* v = st.v.data();
    for (size_t i = 0; i < n; ++i) {
        double g = gv.empty() ? 0.0 : double(gv[i]);
        double wi = double(wd[i]);
        wi -= hp.lr * hp.weight_decay * wi;
        double mi = hp.beta1 * double(m[i]) + (1.0 - hp.beta1) * g;
        double vi = hp.beta2 * double(v[i]) + (1.0 - hp.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        wi -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
        wd[i] = static_cast<T>(wi);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking (f64 only by contract).

// Central differences (f(w+h)−f(w−h))/2h on sampled coordinates (all coords
// when the tensor is small). Returns max over samples of
// |analytic−numeric| / max(1, |numeric|).
inline double grad_check(const std::function<TensorD()>& f,
                         const std::vector<TensorD>& params, double h = 1e-4,
                         size_t coords_per_tensor = 32, uint64_t seed = 0) {
    for (const auto& p : params) {
        const_cast<TensorD&>(p).zero_grad();
    }
    TensorD loss = f();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.emplace_back(p.numel(), 0.0);
    }
    double max_rel = 0;
    CounterRng rng(seed, "grad_check");
    for (size_t pi = 0; pi < params.size(); ++pi) {
        TensorD& p = const_cast<TensorD&>(params[pi]);
        size_t n = p.numel();
        std::vector<size_t> idx;
        if (n <= coords_per_tensor) {
            idx.resize(n);
            for (size_t i = 0; i < n; ++i) idx[i] = i;
        } else {
            // Partial Fisher-Yates over the index range for distinct samples.
            std::vector<size_t> pool(n);
            for (size_t i = 0; i < n; ++i) pool[i] = i;
            for (size_t i = 0; i < coords_per_tensor; ++i) {
                size_t j = i + size_t(rng.uniform_int(uint64_t(n - i)));
                std::swap(pool[i], pool[j]);
            }
            idx.assign(pool.begin(), pool.begin() + coords_per_tensor);
        }
        for (size_t ci : idx) {
            double orig = p.data()[ci];
            p.data()[ci] = orig + h;
            double fp = f().item();
            p.data()[ci] = orig - h;
            double fm = f().item();
            p.data()[ci] = orig;
            double numeric = (fp - fm) / (2 * h);
            double a = analytic[pi][ci];
            double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace eloforge
