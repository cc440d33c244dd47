#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "plm2/common.hpp"

namespace plm2 {

// ===========================================================================
// Dense f32 tensor with reverse-mode autodiff.
//
// Values are immutable after an op creates them; only grad buffers mutate.
// A Tape records backward closures in creation order; backward() replays
// them in reverse. Every kernel accumulates each output element in a fixed
// (ascending) index order, so results are reproducible for a fixed thread
// count, and row-at-a-time calls match full-matrix calls bitwise.
// ===========================================================================

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until backward touches it
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto p = std::make_shared<TensorImpl>();
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        p->shape = std::move(shape);
        p->data.assign(n, 0.0f);
        p->requires_grad = requires_grad;
        return Tensor(std::move(p));
    }

    static Tensor from(std::vector<int> shape, std::vector<float> data, bool requires_grad = false) {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        if (n != data.size()) throw ShapeError("tensor data length does not match shape product");
        auto p = std::make_shared<TensorImpl>();
        p->shape = std::move(shape);
        p->data = std::move(data);
        p->requires_grad = requires_grad;
        return Tensor(std::move(p));
    }

    static Tensor scalar(float v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<int>& shape() const { return p_->shape; }
    int dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(p_->shape.size()); }
    size_t numel() const { return p_->data.size(); }
    int rows() const { return p_->shape.size() == 2 ? p_->shape[0] : 1; }
    int cols() const { return p_->shape.back(); }

    const float* data() const { return p_->data.data(); }
    float* mutable_data() { return p_->data.data(); }
    std::span<const float> values() const { return {p_->data.data(), p_->data.size()}; }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool b) { p_->requires_grad = b; }

    bool has_grad() const { return !p_->grad.empty(); }
    std::span<const float> grad() const { return {p_->grad.data(), p_->grad.size()}; }
    float* grad_data() { return p_->grad.data(); }

    void ensure_grad() {
        if (p_->grad.size() != p_->data.size()) p_->grad.assign(p_->data.size(), 0.0f);
    }

    void zero_grad() {
        if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0f);
    }

    float item() const {
        if (p_->data.size() != 1) throw ShapeError("item() on non-scalar tensor");
        return p_->data[0];
    }

    TensorImpl* impl() const { return p_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}
    std::shared_ptr<TensorImpl> p_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    void touch(const Tensor& t) {
        if (t.defined() && t.requires_grad()) touched_.push_back(t);
    }

    size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        touched_.clear();
    }

    // Reverse replay. Zero-fills the grad of every tensor the tape touched,
    // seeds d(loss)/d(loss) = 1, then accumulates.
    void backward(Tensor& loss) {
        if (loss.numel() != 1) throw ShapeError("backward() expects a scalar loss");
        for (auto& t : touched_) {
            t.ensure_grad();
            t.zero_grad();
        }
        loss.ensure_grad();
        loss.grad_data()[0] = 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<Tensor> touched_;
};

namespace detail {
inline Tape*& current_tape() {
    thread_local Tape* t = nullptr;
    return t;
}
inline bool& grad_enabled() {
    thread_local bool b = true;
    return b;
}
}  // namespace detail

class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::current_tape()) { detail::current_tape() = &t; }
    ~TapeScope() { detail::current_tape() = prev_; }
    TapeScope(const TapeScope&) = delete;

private:
    Tape* prev_;
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool recording() { return detail::current_tape() != nullptr && detail::grad_enabled(); }

namespace detail {

inline void mark_output(Tensor& out, bool any_input_grad) {
    out.set_requires_grad(recording() && any_input_grad);
}

template <typename Fn>
inline void record_node(Fn&& fn, std::initializer_list<Tensor> involved) {
    Tape* t = current_tape();
    for (const auto& x : involved) t->touch(x);
    t->record(std::forward<Fn>(fn));
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace detail

// ===========================================================================
// Kernels. Shared by the tape ops and the incremental (KV-cache) path so
// that the two compute bitwise-identical values per row.
// ===========================================================================

namespace kern {

// C += A*B, row-major. Each C[i][j] accumulates over p in ascending order
// regardless of the row blocking, so single-row and full calls agree bitwise.
template <int RB>
inline void gemm_nn_rows(const float* A, const float* B, float* C, int i0, int k, int n) {
    const float* a[RB];
    float* c[RB];
    for (int r = 0; r < RB; ++r) {
        a[r] = A + static_cast<size_t>(i0 + r) * k;
        c[r] = C + static_cast<size_t>(i0 + r) * n;
    }
    for (int p = 0; p < k; ++p) {
        const float* b = B + static_cast<size_t>(p) * n;
        float v[RB];
        for (int r = 0; r < RB; ++r) v[r] = a[r][p];
#pragma omp simd
        for (int j = 0; j < n; ++j) {
            for (int r = 0; r < RB; ++r) c[r][j] += v[r] * b[j];
        }
    }
}

inline void gemm_nn(const float* A, const float* B, float* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i0 = 0; i0 < m; i0 += 8) {
        const int ib = std::min(8, m - i0);
        if (ib == 8) {
            gemm_nn_rows<8>(A, B, C, i0, k, n);
        } else {
            for (int i = i0; i < i0 + ib; ++i) gemm_nn_rows<1>(A, B, C, i, k, n);
        }
    }
}

// out[j] += sum_p x[p] * W[p][j]; identical accumulation order to gemm_nn.
inline void row_matvec(const float* x, const float* W, float* out, int k, int n) {
    gemm_nn_rows<1>(x, W, out, 0, k, n);
}

// 4-accumulator dot; one fixed routine everywhere it matters.
inline float dot(const float* a, const float* b, int n) {
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// C += A * B^T  (A: m x k, B: n x k, C: m x n)
inline void gemm_nt(const float* A, const float* B, float* C, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const float* a = A + static_cast<size_t>(i) * k;
        float* c = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) c[j] += dot(a, B + static_cast<size_t>(j) * k, k);
    }
}

// C += A^T * B  (A: m x k, B: m x n, C: k x n). Per-thread partials over row
// chunks, reduced in thread order: fixed order for a fixed thread count.
inline void gemm_tn(const float* A, const float* B, float* C, int m, int k, int n) {
    const int nt = std::max(1, threads());
    const size_t cn = static_cast<size_t>(k) * n;
    std::vector<float> partial(cn * static_cast<size_t>(nt), 0.0f);
    const int chunk = (m + nt - 1) / nt;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < nt; ++t) {
        float* P = partial.data() + cn * static_cast<size_t>(t);
        const int lo = t * chunk, hi = std::min(m, lo + chunk);
        for (int i = lo; i < hi; ++i) {
            const float* a = A + static_cast<size_t>(i) * k;
            const float* b = B + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const float v = a[p];
                float* prow = P + static_cast<size_t>(p) * n;
#pragma omp simd
                for (int j = 0; j < n; ++j) prow[j] += v * b[j];
            }
        }
    }
#pragma omp parallel for schedule(static)
    for (int p = 0; p < k; ++p) {
        float* crow = C + static_cast<size_t>(p) * n;
        for (int t = 0; t < nt; ++t) {
            const float* prow = partial.data() + cn * static_cast<size_t>(t) + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += prow[j];
        }
    }
}

inline void ln_row(const float* x, const float* gamma, const float* beta, int d, float eps,
                   float* out, float* save_mean, float* save_rstd) {
    float mean = 0.f;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<float>(d);
    float var = 0.f;
    for (int i = 0; i < d; ++i) {
        const float c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) {
        const float xhat = (x[i] - mean) * rstd;
        out[i] = gamma ? xhat * gamma[i] + beta[i] : xhat;
    }
    if (save_mean) *save_mean = mean;
    if (save_rstd) *save_rstd = rstd;
}

inline float gelu_one(float x) {
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    const float u = c * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad_one(float x) {
    const float c = 0.7978845608028654f;
    const float u = c * (x + 0.044715f * x * x * x);
    const float t = std::tanh(u);
    const float du = c * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

// Rotary rotation of one row (all heads), angle pos * base^(-2t/hd) per pair.
inline void rope_row(float* row, int d, int hd, int pos, float base, bool inverse = false) {
    const int half = hd / 2;
    for (int h = 0; h * hd < d; ++h) {
        float* r = row + h * hd;
        for (int t = 0; t < half; ++t) {
            const float freq = std::pow(base, -2.0f * static_cast<float>(t) / static_cast<float>(hd));
            const float ang = static_cast<float>(pos) * freq;
            float cs = std::cos(ang), sn = std::sin(ang);
            if (inverse) sn = -sn;
            const float a = r[2 * t], b = r[2 * t + 1];
            r[2 * t] = a * cs - b * sn;
            r[2 * t + 1] = a * sn + b * cs;
        }
    }
}

// Causal softmax attention for one query against keys 0..n_keys-1 of one
// head. scores is caller scratch of at least n_keys floats.
inline void attend_one(const float* q, const float* k_base, const float* v_base, size_t stride,
                       int n_keys, int hd, float scale, float* out, float* probs_out,
                       float* scores) {
    float mx = -3.4e38f;
    for (int j = 0; j < n_keys; ++j) {
        const float s = dot(q, k_base + static_cast<size_t>(j) * stride, hd) * scale;
        scores[j] = s;
        mx = std::max(mx, s);
    }
    float denom = 0.f;
    for (int j = 0; j < n_keys; ++j) {
        const float e = std::exp(scores[j] - mx);
        scores[j] = e;
        denom += e;
    }
    const float inv = 1.0f / denom;
    if (out) {
        for (int t = 0; t < hd; ++t) out[t] = 0.f;
        for (int j = 0; j < n_keys; ++j) {
            const float p = scores[j] * inv;
            const float* v = v_base + static_cast<size_t>(j) * stride;
#pragma omp simd
            for (int t = 0; t < hd; ++t) out[t] += p * v[t];
        }
    }
    if (probs_out) {
        for (int j = 0; j < n_keys; ++j) probs_out[j] = scores[j] * inv;
    }
}

}  // namespace kern

inline bool all_finite(const Tensor& t) {
    for (float v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ===========================================================================
// Ops
// ===========================================================================

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mutable_data();
#pragma omp parallel for schedule(static) if (n > 1u << 16)
    for (long long i = 0; i < static_cast<long long>(n); ++i) po[i] = pa[i] + pb[i];
    const bool g = a.requires_grad() || b.requires_grad();
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor ta = a, tb = b, to = out;
        detail::record_node(
            [ta, tb, to, n]() mutable {
                const float* go = to.grad().data();
                if (ta.requires_grad()) {
                    ta.ensure_grad();
                    float* ga = ta.grad_data();
                    for (size_t i = 0; i < n; ++i) ga[i] += go[i];
                }
                if (tb.requires_grad()) {
                    tb.ensure_grad();
                    float* gb = tb.grad_data();
                    for (size_t i = 0; i < n; ++i) gb[i] += go[i];
                }
            },
            {a, b, out});
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mutable_data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    const bool g = a.requires_grad() || b.requires_grad();
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor ta = a, tb = b, to = out;
        detail::record_node(
            [ta, tb, to, n]() mutable {
                const float* go = to.grad().data();
                if (ta.requires_grad()) {
                    ta.ensure_grad();
                    float* ga = ta.grad_data();
                    const float* vb = tb.data();
                    for (size_t i = 0; i < n; ++i) ga[i] += go[i] * vb[i];
                }
                if (tb.requires_grad()) {
                    tb.ensure_grad();
                    float* gb = tb.grad_data();
                    const float* va = ta.data();
                    for (size_t i = 0; i < n; ++i) gb[i] += go[i] * va[i];
                }
            },
            {a, b, out});
    }
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.numel();
    const float* pa = a.data();
    float* po = out.mutable_data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    detail::mark_output(out, a.requires_grad());
    if (recording() && a.requires_grad()) {
        Tensor ta = a, to = out;
        detail::record_node(
            [ta, to, c, n]() mutable {
                ta.ensure_grad();
                const float* go = to.grad().data();
                float* ga = ta.grad_data();
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] * c;
            },
            {a, out});
    }
    return out;
}

// out = x*W + b. x: [m x k], W: [k x n], b: [n] (optional, pass undefined).
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
    if (x.ndim() != 2 || W.ndim() != 2 || x.dim(1) != W.dim(0))
        throw ShapeError("linear: shape mismatch " + detail::shape_str(x.shape()) + " vs " +
                         detail::shape_str(W.shape()));
    const int m = x.dim(0), k = x.dim(1), n = W.dim(1);
    if (b.defined() && static_cast<int>(b.numel()) != n)
        throw ShapeError("linear: bias length mismatch");
    Tensor out = Tensor::zeros({m, n});
    kern::gemm_nn(x.data(), W.data(), out.mutable_data(), m, k, n);
    if (b.defined()) {
        float* po = out.mutable_data();
        const float* pb = b.data();
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i) {
            float* row = po + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) row[j] += pb[j];
        }
    }
    const bool g = x.requires_grad() || W.requires_grad() || (b.defined() && b.requires_grad());
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor tx = x, tw = W, tb = b, to = out;
        detail::record_node(
            [tx, tw, tb, to, m, k, n]() mutable {
                const float* go = to.grad().data();
                if (tx.requires_grad()) {
                    tx.ensure_grad();
                    kern::gemm_nt(go, tw.data(), tx.grad_data(), m, n, k);
                }
                if (tw.requires_grad()) {
                    tw.ensure_grad();
                    kern::gemm_tn(tx.data(), go, tw.grad_data(), m, k, n);
                }
                if (tb.defined() && tb.requires_grad()) {
                    tb.ensure_grad();
                    float* gb = tb.grad_data();
                    for (int i = 0; i < m; ++i) {
                        const float* row = go + static_cast<size_t>(i) * n;
                        for (int j = 0; j < n; ++j) gb[j] += row[j];
                    }
                }
            },
            {x, W, b.defined() ? b : out, out});
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions do not match: " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
    return linear(a, b, Tensor());
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expects a 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const float* pa = a.data();
    float* po = out.mutable_data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[static_cast<size_t>(j) * m + i] = pa[static_cast<size_t>(i) * n + j];
    detail::mark_output(out, a.requires_grad());
    if (recording() && a.requires_grad()) {
        Tensor ta = a, to = out;
        detail::record_node(
            [ta, to, m, n]() mutable {
                ta.ensure_grad();
                const float* go = to.grad().data();
                float* ga = ta.grad_data();
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i)
                        ga[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j) * m + i];
            },
            {a, out});
    }
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    if (n != a.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor out = Tensor::from(std::move(shape), {a.data(), a.data() + a.numel()});
    detail::mark_output(out, a.requires_grad());
    if (recording() && a.requires_grad()) {
        Tensor ta = a, to = out;
        detail::record_node(
            [ta, to]() mutable {
                ta.ensure_grad();
                const float* go = to.grad().data();
                float* ga = ta.grad_data();
                for (size_t i = 0; i < ta.numel(); ++i) ga[i] += go[i];
            },
            {a, out});
    }
    return out;
}

inline Tensor detach(const Tensor& t) {
    return Tensor::from(t.shape(), {t.data(), t.data() + t.numel()}, false);
}

inline Tensor embedding(const Tensor& table, std::span<const int32_t> ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
    const int V = table.dim(0), d = table.dim(1);
    for (int32_t id : ids) {
        if (id < 0 || id >= V)
            throw ValueError("embedding: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(V) + ")");
    }
    const int n = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({n, d});
    const float* pt = table.data();
    float* po = out.mutable_data();
    for (int i = 0; i < n; ++i)
        std::memcpy(po + static_cast<size_t>(i) * d, pt + static_cast<size_t>(ids[i]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    detail::mark_output(out, table.requires_grad());
    if (recording() && table.requires_grad()) {
        Tensor tt = table, to = out;
        std::vector<int32_t> idv(ids.begin(), ids.end());
        detail::record_node(
            [tt, to, idv, d]() mutable {
                tt.ensure_grad();
                const float* go = to.grad().data();
                float* gt = tt.grad_data();
                for (size_t i = 0; i < idv.size(); ++i) {
                    const float* src = go + i * static_cast<size_t>(d);
                    float* dst = gt + static_cast<size_t>(idv[i]) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            },
            {table, out});
    }
    return out;
}

inline Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: expects a 2-D tensor");
    const int d = x.dim(1), m = x.dim(0);
    for (int r : rows) {
        if (r < 0 || r >= m) throw ValueError("gather_rows: row index out of range");
    }
    const int n = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({n, d});
    const float* px = x.data();
    float* po = out.mutable_data();
    for (int i = 0; i < n; ++i)
        std::memcpy(po + static_cast<size_t>(i) * d, px + static_cast<size_t>(rows[i]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    detail::mark_output(out, x.requires_grad());
    if (recording() && x.requires_grad()) {
        Tensor tx = x, to = out;
        std::vector<int> rv(rows.begin(), rows.end());
        detail::record_node(
            [tx, to, rv, d]() mutable {
                tx.ensure_grad();
                const float* go = to.grad().data();
                float* gx = tx.grad_data();
                for (size_t i = 0; i < rv.size(); ++i) {
                    const float* src = go + i * static_cast<size_t>(d);
                    float* dst = gx + static_cast<size_t>(rv[i]) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            },
            {x, out});
    }
    return out;
}

// Row pick for interleaving two row sources into one sequence.
struct RowPick {
    uint8_t src;  // 0 = first tensor, 1 = second
    int row;
};

inline Tensor compose_rows(const Tensor& a, const Tensor& b, std::span<const RowPick> pick) {
    if (a.ndim() != 2) throw ShapeError("compose_rows: expects 2-D tensors");
    const int d = a.dim(1);
    if (b.defined() && (b.ndim() != 2 || b.dim(1) != d))
        throw ShapeError("compose_rows: row width mismatch: " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
    const int n = static_cast<int>(pick.size());
    Tensor out = Tensor::zeros({n, d});
    float* po = out.mutable_data();
    for (int i = 0; i < n; ++i) {
        const auto& p = pick[i];
        const Tensor& src = (p.src == 0) ? a : b;
        if (p.row < 0 || p.row >= src.dim(0)) throw ValueError("compose_rows: row out of range");
        std::memcpy(po + static_cast<size_t>(i) * d, src.data() + static_cast<size_t>(p.row) * d,
                    sizeof(float) * static_cast<size_t>(d));
    }
    const bool g = a.requires_grad() || (b.defined() && b.requires_grad());
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor ta = a, tb = b, to = out;
        std::vector<RowPick> pv(pick.begin(), pick.end());
        detail::record_node(
            [ta, tb, to, pv, d]() mutable {
                const float* go = to.grad().data();
                if (ta.requires_grad()) ta.ensure_grad();
                if (tb.defined() && tb.requires_grad()) tb.ensure_grad();
                for (size_t i = 0; i < pv.size(); ++i) {
                    Tensor& src = (pv[i].src == 0) ? ta : tb;
                    if (!src.defined() || !src.requires_grad()) continue;
                    float* dst = src.grad_data() + static_cast<size_t>(pv[i].row) * d;
                    const float* s = go + i * static_cast<size_t>(d);
                    for (int j = 0; j < d; ++j) dst[j] += s[j];
                }
            },
            {a, b.defined() ? b : out, out});
    }
    return out;
}

inline Tensor broadcast_row(const Tensor& v, int n) {
    if (static_cast<int>(v.numel()) != v.cols() && v.ndim() != 1)
        throw ShapeError("broadcast_row: expects a single row");
    const int d = static_cast<int>(v.numel());
    Tensor out = Tensor::zeros({n, d});
    float* po = out.mutable_data();
    for (int i = 0; i < n; ++i)
        std::memcpy(po + static_cast<size_t>(i) * d, v.data(), sizeof(float) * static_cast<size_t>(d));
    detail::mark_output(out, v.requires_grad());
    if (recording() && v.requires_grad()) {
        Tensor tv = v, to = out;
        detail::record_node(
            [tv, to, n, d]() mutable {
                tv.ensure_grad();
                const float* go = to.grad().data();
                float* gv = tv.grad_data();
                for (int i = 0; i < n; ++i) {
                    const float* row = go + static_cast<size_t>(i) * d;
                    for (int j = 0; j < d; ++j) gv[j] += row[j];
                }
            },
            {v, out});
    }
    return out;
}

inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    if (x.ndim() != 2) throw ShapeError("layernorm: expects a 2-D tensor");
    const int m = x.dim(0), d = x.dim(1);
    if (gamma.defined() && (static_cast<int>(gamma.numel()) != d || static_cast<int>(beta.numel()) != d))
        throw ShapeError("layernorm: gamma/beta length mismatch");
    Tensor out = Tensor::zeros({m, d});
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(m) * 2);
    const float* px = x.data();
    const float* pg = gamma.defined() ? gamma.data() : nullptr;
    const float* pb = beta.defined() ? beta.data() : nullptr;
    float* po = out.mutable_data();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        kern::ln_row(px + static_cast<size_t>(i) * d, pg, pb, d, eps, po + static_cast<size_t>(i) * d,
                     stats->data() + 2 * static_cast<size_t>(i), stats->data() + 2 * static_cast<size_t>(i) + 1);
    }
    const bool g = x.requires_grad() || (gamma.defined() && (gamma.requires_grad() || beta.requires_grad()));
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor tx = x, tg = gamma, tb = beta, to = out;
        detail::record_node(
            [tx, tg, tb, to, stats, m, d]() mutable {
                const float* go = to.grad().data();
                const float* px2 = tx.data();
                const float* pg2 = tg.defined() ? tg.data() : nullptr;
                if (tx.requires_grad()) {
                    tx.ensure_grad();
                    float* gx = tx.grad_data();
#pragma omp parallel for schedule(static)
                    for (int i = 0; i < m; ++i) {
                        const float mean = (*stats)[2 * static_cast<size_t>(i)];
                        const float rstd = (*stats)[2 * static_cast<size_t>(i) + 1];
                        const float* xr = px2 + static_cast<size_t>(i) * d;
                        const float* gr = go + static_cast<size_t>(i) * d;
                        float* dxr = gx + static_cast<size_t>(i) * d;
                        float s1 = 0.f, s2 = 0.f;
                        for (int j = 0; j < d; ++j) {
                            const float dy = gr[j] * (pg2 ? pg2[j] : 1.0f);
                            const float xh = (xr[j] - mean) * rstd;
                            s1 += dy;
                            s2 += dy * xh;
                        }
                        s1 /= static_cast<float>(d);
                        s2 /= static_cast<float>(d);
                        for (int j = 0; j < d; ++j) {
                            const float dy = gr[j] * (pg2 ? pg2[j] : 1.0f);
                            const float xh = (xr[j] - mean) * rstd;
                            dxr[j] += (dy - s1 - xh * s2) * rstd;
                        }
                    }
                }
                if (tg.defined() && tg.requires_grad()) {
                    tg.ensure_grad();
                    tb.ensure_grad();
                    float* ggam = tg.grad_data();
                    float* gbet = tb.grad_data();
                    for (int i = 0; i < m; ++i) {
                        const float mean = (*stats)[2 * static_cast<size_t>(i)];
                        const float rstd = (*stats)[2 * static_cast<size_t>(i) + 1];
                        const float* xr = px2 + static_cast<size_t>(i) * d;
                        const float* gr = go + static_cast<size_t>(i) * d;
                        for (int j = 0; j < d; ++j) {
                            ggam[j] += gr[j] * (xr[j] - mean) * rstd;
                            gbet[j] += gr[j];
                        }
                    }
                }
            },
            {x, gamma.defined() ? gamma : out, beta.defined() ? beta : out, out});
    }
    return out;
}

// Parameterless row normalization (optional thought-feedback stabilizer).
inline Tensor rownorm(const Tensor& x, float eps = 1e-5f) { return layernorm(x, Tensor(), Tensor(), eps); }

inline Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const size_t n = x.numel();
    const float* px = x.data();
    float* po = out.mutable_data();
#pragma omp parallel for schedule(static) if (n > 1u << 14)
    for (long long i = 0; i < static_cast<long long>(n); ++i) po[i] = kern::gelu_one(px[i]);
    detail::mark_output(out, x.requires_grad());
    if (recording() && x.requires_grad()) {
        Tensor tx = x, to = out;
        detail::record_node(
            [tx, to, n]() mutable {
                tx.ensure_grad();
                const float* go = to.grad().data();
                const float* px2 = tx.data();
                float* gx = tx.grad_data();
#pragma omp parallel for schedule(static) if (n > 1u << 14)
                for (long long i = 0; i < static_cast<long long>(n); ++i)
                    gx[i] += go[i] * kern::gelu_grad_one(px2[i]);
            },
            {x, out});
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() != 2) throw ShapeError("softmax_rows: expects a 2-D tensor");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const float* px = x.data();
    float* po = out.mutable_data();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const float* r = px + static_cast<size_t>(i) * n;
        float* o = po + static_cast<size_t>(i) * n;
        float mx = r[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        float denom = 0.f;
        for (int j = 0; j < n; ++j) {
            o[j] = std::exp(r[j] - mx);
            denom += o[j];
        }
        const float inv = 1.0f / denom;
        for (int j = 0; j < n; ++j) o[j] *= inv;
    }
    detail::mark_output(out, x.requires_grad());
    if (recording() && x.requires_grad()) {
        Tensor tx = x, to = out;
        detail::record_node(
            [tx, to, m, n]() mutable {
                tx.ensure_grad();
                const float* go = to.grad().data();
                const float* p = to.data();
                float* gx = tx.grad_data();
#pragma omp parallel for schedule(static)
                for (int i = 0; i < m; ++i) {
                    const float* pr = p + static_cast<size_t>(i) * n;
                    const float* gr = go + static_cast<size_t>(i) * n;
                    float* gxr = gx + static_cast<size_t>(i) * n;
                    float s = 0.f;
                    for (int j = 0; j < n; ++j) s += pr[j] * gr[j];
                    for (int j = 0; j < n; ++j) gxr[j] += pr[j] * (gr[j] - s);
                }
            },
            {x, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Causal scaled-dot-product attention over window spans.
//
// q,k,v: [R x d] with n_heads contiguous head slices per row. Attention is
// strictly causal in row order and never crosses a window boundary. When
// rope_pos is non-null, q and k rows are rotated by their position id before
// the dot products (rotary encoding); learned-absolute models pass nullptr.
// Backward recomputes the softmax instead of saving R x R probabilities.
// ---------------------------------------------------------------------------

struct RowSpan {
    int begin;
    int len;
};

namespace detail {

struct AttnSaved {
    std::vector<RowSpan> spans;
    std::vector<int> rope_pos;  // empty = no rotary
    float rope_base = 10000.0f;
    int n_heads = 1;
};

inline void rope_all(const Tensor& t, std::vector<float>& buf, const AttnSaved& s, int d, int hd) {
    buf.assign(t.data(), t.data() + t.numel());
    if (s.rope_pos.empty()) return;
    const int R = t.dim(0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < R; ++i)
        kern::rope_row(buf.data() + static_cast<size_t>(i) * d, d, hd, s.rope_pos[static_cast<size_t>(i)],
                       s.rope_base);
}

}  // namespace detail

inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                               std::span<const RowSpan> windows, const int* rope_pos = nullptr,
                               float rope_base = 10000.0f) {
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("causal_attention: q/k/v shapes differ");
    const int R = q.dim(0), d = q.dim(1);
    if (d % n_heads != 0) throw ShapeError("causal_attention: d not divisible by n_heads");
    const int hd = d / n_heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(hd));

    auto saved = std::make_shared<detail::AttnSaved>();
    saved->spans.assign(windows.begin(), windows.end());
    saved->n_heads = n_heads;
    saved->rope_base = rope_base;
    if (rope_pos) saved->rope_pos.assign(rope_pos, rope_pos + R);

    std::vector<float> qr, kr;
    detail::rope_all(q, qr, *saved, d, hd);
    detail::rope_all(k, kr, *saved, d, hd);

    Tensor out = Tensor::zeros({R, d});
    float* po = out.mutable_data();
    const float* pv = v.data();
    const int W = static_cast<int>(saved->spans.size());
#pragma omp parallel for schedule(static) collapse(2)
    for (int w = 0; w < W; ++w) {
        for (int h = 0; h < n_heads; ++h) {
            const RowSpan sp = saved->spans[static_cast<size_t>(w)];
            std::vector<float> scratch(static_cast<size_t>(sp.len));
            const size_t off = static_cast<size_t>(h) * hd;
            const float* kb = kr.data() + static_cast<size_t>(sp.begin) * d + off;
            const float* vb = pv + static_cast<size_t>(sp.begin) * d + off;
            for (int i = 0; i < sp.len; ++i) {
                const float* qrow = qr.data() + static_cast<size_t>(sp.begin + i) * d + off;
                float* orow = po + static_cast<size_t>(sp.begin + i) * d + off;
                kern::attend_one(qrow, kb, vb, static_cast<size_t>(d), i + 1, hd, sc, orow, nullptr,
                                 scratch.data());
            }
        }
    }

    const bool g = q.requires_grad() || k.requires_grad() || v.requires_grad();
    detail::mark_output(out, g);
    if (recording() && g) {
        Tensor tq = q, tk = k, tv = v, to = out;
        detail::record_node(
            [tq, tk, tv, to, saved, R, d, hd, sc]() mutable {
                tq.ensure_grad();
                tk.ensure_grad();
                tv.ensure_grad();
                std::vector<float> qr2, kr2;
                detail::rope_all(tq, qr2, *saved, d, hd);
                detail::rope_all(tk, kr2, *saved, d, hd);
                const bool rot = !saved->rope_pos.empty();
                // dq/dk accumulate in rotated space, then rotate back.
                std::vector<float> dqr(static_cast<size_t>(R) * d, 0.f);
                std::vector<float> dkr(static_cast<size_t>(R) * d, 0.f);
                const float* go = to.grad().data();
                const float* pv2 = tv.data();
                float* gv = tv.grad_data();
                const int W2 = static_cast<int>(saved->spans.size());
                const int H = saved->n_heads;
#pragma omp parallel for schedule(static) collapse(2)
                for (int w = 0; w < W2; ++w) {
                    for (int h = 0; h < H; ++h) {
                        const RowSpan sp = saved->spans[static_cast<size_t>(w)];
                        std::vector<float> scratch(static_cast<size_t>(sp.len));
                        std::vector<float> probs(static_cast<size_t>(sp.len));
                        std::vector<float> dp(static_cast<size_t>(sp.len));
                        const size_t off = static_cast<size_t>(h) * hd;
                        const float* kb = kr2.data() + static_cast<size_t>(sp.begin) * d + off;
                        const float* vb = pv2 + static_cast<size_t>(sp.begin) * d + off;
                        for (int i = 0; i < sp.len; ++i) {
                            const size_t qoff = static_cast<size_t>(sp.begin + i) * d + off;
                            const float* qrow = qr2.data() + qoff;
                            const float* grow = go + qoff;
                            kern::attend_one(qrow, kb, vb, static_cast<size_t>(d), i + 1, hd, sc,
                                             nullptr, probs.data(), scratch.data());
                            float ds_sum = 0.f;
                            for (int j = 0; j <= i; ++j) {
                                dp[static_cast<size_t>(j)] =
                                    kern::dot(grow, vb + static_cast<size_t>(j) * d, hd);
                                ds_sum += probs[static_cast<size_t>(j)] * dp[static_cast<size_t>(j)];
                            }
                            float* dqrow = dqr.data() + qoff;
                            for (int j = 0; j <= i; ++j) {
                                const float p = probs[static_cast<size_t>(j)];
                                const float ds = p * (dp[static_cast<size_t>(j)] - ds_sum) * sc;
                                const float* krow = kb + static_cast<size_t>(j) * d;
                                float* dkrow = dkr.data() + static_cast<size_t>(sp.begin + j) * d + off;
                                float* gvrow = gv + static_cast<size_t>(sp.begin + j) * d + off;
#pragma omp simd
                                for (int t = 0; t < hd; ++t) {
                                    dqrow[t] += ds * krow[t];
                                    dkrow[t] += ds * qrow[t];
                                    gvrow[t] += p * grow[t];
                                }
                            }
                        }
                    }
                }
                float* gq = tq.grad_data();
                float* gk = tk.grad_data();
#pragma omp parallel for schedule(static)
                for (int i = 0; i < R; ++i) {
                    if (rot) {
                        kern::rope_row(dqr.data() + static_cast<size_t>(i) * d, d, hd,
                                       saved->rope_pos[static_cast<size_t>(i)], saved->rope_base, true);
                        kern::rope_row(dkr.data() + static_cast<size_t>(i) * d, d, hd,
                                       saved->rope_pos[static_cast<size_t>(i)], saved->rope_base, true);
                    }
                    for (int j = 0; j < d; ++j) {
                        gq[static_cast<size_t>(i) * d + j] += dqr[static_cast<size_t>(i) * d + j];
                        gk[static_cast<size_t>(i) * d + j] += dkr[static_cast<size_t>(i) * d + j];
                    }
                }
            },
            {q, k, v, out});
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.values()) s += v;
    Tensor out = Tensor::scalar(static_cast<float>(s));
    detail::mark_output(out, x.requires_grad());
    if (recording() && x.requires_grad()) {
        Tensor tx = x, to = out;
        detail::record_node(
            [tx, to]() mutable {
                tx.ensure_grad();
                const float g = to.grad().data()[0];
                float* gx = tx.grad_data();
                for (size_t i = 0; i < tx.numel(); ++i) gx[i] += g;
            },
            {x, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mean negative log-likelihood over masked rows, numerically stable, with
// 64-bit loss accumulation.
// ---------------------------------------------------------------------------

inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                                    std::span<const uint8_t> mask) {
    if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be 2-D");
    const int n = logits.dim(0), V = logits.dim(1);
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("softmax_cross_entropy: targets/mask length mismatch");
    int count = 0;
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        ++count;
        const int32_t t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= V)
            throw ValueError("softmax_cross_entropy: target " + std::to_string(t) +
                             " out of range [0," + std::to_string(V) + ")");
    }
    if (count == 0) throw ValueError("softmax_cross_entropy: mask selects no positions (empty loss)");

    const float* pl = logits.data();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const float* row = pl + static_cast<size_t>(i) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        total += std::log(denom) + static_cast<double>(mx) -
                 static_cast<double>(row[targets[static_cast<size_t>(i)]]);
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / count));
    detail::mark_output(out, logits.requires_grad());
    if (recording() && logits.requires_grad()) {
        Tensor tl = logits, to = out;
        std::vector<int32_t> tv(targets.begin(), targets.end());
        std::vector<uint8_t> mv(mask.begin(), mask.end());
        detail::record_node(
            [tl, to, tv, mv, n, V, count]() mutable {
                tl.ensure_grad();
                const float g = to.grad().data()[0] / static_cast<float>(count);
                const float* pl2 = tl.data();
                float* gl = tl.grad_data();
#pragma omp parallel for schedule(static)
                for (int i = 0; i < n; ++i) {
                    if (!mv[static_cast<size_t>(i)]) continue;
                    const float* row = pl2 + static_cast<size_t>(i) * V;
                    float* grow = gl + static_cast<size_t>(i) * V;
                    float mx = row[0];
                    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
                    double denom = 0.0;
                    for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
                    const float inv = static_cast<float>(1.0 / denom);
                    for (int j = 0; j < V; ++j) {
                        float p = std::exp(row[j] - mx) * inv;
                        if (j == tv[static_cast<size_t>(i)]) p -= 1.0f;
                        grow[j] += p * g;
                    }
                }
            },
            {logits, out});
    }
    return out;
}

}  // namespace plm2
