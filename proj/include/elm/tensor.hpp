#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "elm/error.hpp"
#include "elm/rng.hpp"

namespace elm {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "{";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "}";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

namespace detail {
inline std::atomic<int64_t> next_tensor_id{1};
}

template <class Real>
struct TensorData {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad; // empty until first needed; empty reads as all-zero
    bool requires_grad = false;
    std::string name;
    int64_t id = detail::next_tensor_id.fetch_add(1, std::memory_order_relaxed);

    int64_t numel() const { return shape_numel(shape); }

    // Allocates a zeroed gradient if absent; existing values are preserved so
    // gradients can accumulate across multiple backward passes.
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), Real(0));
    }
};

template <class Real>
using TensorPtr = std::shared_ptr<TensorData<Real>>;

// Value-semantics handle to a shared tensor payload. Copying the handle aliases
// the storage; ops never mutate their inputs.
template <class Real>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorPtr<Real> p) : p_(std::move(p)) {}

    static Tensor zeros(Shape shape) {
        auto p = std::make_shared<TensorData<Real>>();
        p->shape = std::move(shape);
        p->value.assign(shape_numel(p->shape), Real(0));
        return Tensor(std::move(p));
    }

    static Tensor full(Shape shape, Real fill) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.p_->value.begin(), t.p_->value.end(), fill);
        return t;
    }

    static Tensor from(Shape shape, std::vector<Real> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                             std::to_string(data.size()) + " values");
        auto p = std::make_shared<TensorData<Real>>();
        p->shape = std::move(shape);
        p->value = std::move(data);
        return Tensor(std::move(p));
    }

    static Tensor scalar(Real v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        for (Real& v : t.p_->value) v = static_cast<Real>(rng.normal(0.0, stddev));
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int64_t numel() const { return p_->numel(); }
    int64_t rows() const { return p_->shape.at(0); }
    int64_t cols() const { return p_->shape.at(1); }

    // Handle semantics: a const Tensor still aliases mutable shared storage,
    // like a smart pointer. Ops rely on this to fill outputs they captured.
    std::vector<Real>& value() const { return p_->value; }
    // All-zero (empty) until a backward pass touches this tensor.
    std::vector<Real>& grad() const { return p_->grad; }

    Real item() const {
        if (p_->numel() != 1)
            throw ShapeError("item: tensor " + shape_str(p_->shape) + " is not scalar");
        return p_->value[0];
    }

    Real& at(int64_t r, int64_t c) const { return p_->value[r * cols() + c]; }

    Tensor& set_requires_grad(bool rg = true) {
        p_->requires_grad = rg;
        return *this;
    }
    bool requires_grad() const { return p_->requires_grad; }

    Tensor& set_name(std::string n) {
        p_->name = std::move(n);
        return *this;
    }
    const std::string& name() const { return p_->name; }
    int64_t id() const { return p_->id; }

    void ensure_grad() const { p_->ensure_grad(); }
    void zero_grad() const { p_->zero_grad(); }

    // Deep copy of value (grad not copied).
    Tensor clone() const {
        auto p = std::make_shared<TensorData<Real>>();
        p->shape = p_->shape;
        p->value = p_->value;
        p->requires_grad = p_->requires_grad;
        p->name = p_->name;
        return Tensor(std::move(p));
    }

    TensorPtr<Real> ptr() const { return p_; }

private:
    TensorPtr<Real> p_;
};

enum class OpKind {
    matmul,
    matmul_nt,
    add,
    sub,
    mul,
    scale,
    add_scaled,
    sigmoid,
    dropout,
    add_positional,
    gather_rows,
    gather_cols,
    softmax_rows,
    log_softmax_rows,
    rms_norm,
    causal_attention,
    cross_entropy_mean,
    kd_divergence,
    sum_all,
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_nt: return "matmul_nt";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::add_scaled: return "add_scaled";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::dropout: return "dropout";
        case OpKind::add_positional: return "add_positional";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::gather_cols: return "gather_cols";
        case OpKind::softmax_rows: return "softmax_rows";
        case OpKind::log_softmax_rows: return "log_softmax_rows";
        case OpKind::rms_norm: return "rms_norm";
        case OpKind::causal_attention: return "causal_attention";
        case OpKind::cross_entropy_mean: return "cross_entropy_mean";
        case OpKind::kd_divergence: return "kd_divergence";
        case OpKind::sum_all: return "sum_all";
    }
    return "?";
}

enum class KdKind { kl_forward, kl_reverse, js, l1, l2, cosine };

inline const char* kd_kind_name(KdKind k) {
    switch (k) {
        case KdKind::kl_forward: return "kl_forward";
        case KdKind::kl_reverse: return "kl_reverse";
        case KdKind::js: return "js";
        case KdKind::l1: return "l1";
        case KdKind::l2: return "l2";
        case KdKind::cosine: return "cosine";
    }
    return "?";
}

namespace detail {

// Raw GEMM kernels. Plain loops, accumulation order fixed by the loop order,
// which keeps results bitwise reproducible run to run.
template <class Real>
void mm_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n, bool acc) {
    if (!acc) std::fill(c, c + m * n, Real(0));
    for (int64_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c{m,n} (+)= a{m,k} * b{n,k}^T
template <class Real>
void mm_nt(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n, bool acc) {
    for (int64_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const Real* brow = b + j * k;
            Real s = 0;
            for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            Real& dst = c[i * n + j];
            dst = acc ? dst + s : s;
        }
    }
}

// c{m,n} (+)= a{k,m}^T * b{k,n}
template <class Real>
void mm_tn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n, bool acc) {
    if (!acc) std::fill(c, c + m * n, Real(0));
    for (int64_t p = 0; p < k; ++p) {
        const Real* arow = a + p * m;
        const Real* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const Real av = arow[i];
            if (av == Real(0)) continue;
            Real* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

// Filled by the fused attention op when requested: per (batch, position, group)
// L2 norm of the group's concatenated head outputs before the output projection.
template <class Real>
struct AttentionProbe {
    int64_t batch = 0, seq = 0, groups = 0;
    std::vector<Real> group_norms; // batch * seq * groups
};

// Records every op in execution order; replay() recomputes forward values
// bit-identically and backward() visits nodes in exact reverse order,
// accumulating gradients (fan-out sums; tensors off the loss path keep zeros).
template <class Real>
class Tape {
public:
    struct NodeInfo {
        OpKind kind;
        std::vector<int64_t> inputs;
        int64_t output;
    };

    Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
        check2d("matmul", a);
        check2d("matmul", b);
        if (a.cols() != b.rows())
            throw ShapeError(std::string("matmul: lhs ") + shape_str(a.shape()) + " rhs " +
                             shape_str(b.shape()) + " inner dims differ");
        const int64_t m = a.rows(), k = a.cols(), n = b.cols();
        auto out = Tensor<Real>::zeros({m, n});
        madds_ += static_cast<uint64_t>(m) * k * n;
        auto fwd = [a, b, out, m, k, n] {
            detail::mm_nn(a.value().data(), b.value().data(), out.value().data(), m, k, n, false);
        };
        fwd();
        push(OpKind::matmul, {a.ptr(), b.ptr()}, out.ptr(), fwd, [a, b, out, m, k, n] {
            // dA{m,k} = dC{m,n} * B{k,n}^T ; dB{k,n} = A{m,k}^T * dC{m,n}
            if (has_grad(a))
                detail::mm_nt(out.grad().data(), b.value().data(), a.grad().data(), m, n, k, true);
            if (has_grad(b))
                detail::mm_tn(a.value().data(), out.grad().data(), b.grad().data(), k, m, n, true);
        });
        return out;
    }

    // a{m,k} * b{n,k}^T -> {m,n}
    Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
        check2d("matmul_nt", a);
        check2d("matmul_nt", b);
        if (a.cols() != b.cols())
            throw ShapeError(std::string("matmul_nt: lhs ") + shape_str(a.shape()) + " rhs " +
                             shape_str(b.shape()) + " inner dims differ");
        const int64_t m = a.rows(), k = a.cols(), n = b.rows();
        auto out = Tensor<Real>::zeros({m, n});
        madds_ += static_cast<uint64_t>(m) * k * n;
        auto fwd = [a, b, out, m, k, n] {
            detail::mm_nt(a.value().data(), b.value().data(), out.value().data(), m, k, n, false);
        };
        fwd();
        push(OpKind::matmul_nt, {a.ptr(), b.ptr()}, out.ptr(), fwd, [a, b, out, m, k, n] {
            // dA{m,k} = dC{m,n} * B{n,k} ; dB{n,k} = dC{m,n}^T * A{m,k}
            if (has_grad(a))
                detail::mm_nn(out.grad().data(), b.value().data(), a.grad().data(), m, n, k, true);
            if (has_grad(b))
                detail::mm_tn(out.grad().data(), a.value().data(), b.grad().data(), n, m, k, true);
        });
        return out;
    }

    Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
        return binary_elementwise(OpKind::add, a, b, [](Real x, Real y) { return x + y; },
                                  Real(1), Real(1));
    }

    Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
        return binary_elementwise(OpKind::sub, a, b, [](Real x, Real y) { return x - y; },
                                  Real(1), Real(-1));
    }

    // a + beta * b
    Tensor<Real> add_scaled(const Tensor<Real>& a, const Tensor<Real>& b, Real beta) {
        return binary_elementwise(OpKind::add_scaled, a, b,
                                  [beta](Real x, Real y) { return x + beta * y; }, Real(1), beta);
    }

    Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
        check_same_shape("mul", a, b);
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, b, out] {
            const auto& av = a.value();
            const auto& bv = b.value();
            auto& ov = out.value();
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
        };
        fwd();
        push(OpKind::mul, {a.ptr(), b.ptr()}, out.ptr(), fwd, [a, b, out] {
            const auto& g = out.grad();
            if (has_grad(a)) {
                auto& ag = a.grad();
                const auto& bv = b.value();
                for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bv[i];
            }
            if (has_grad(b)) {
                auto& bg = b.grad();
                const auto& av = a.value();
                for (size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * av[i];
            }
        });
        return out;
    }

    Tensor<Real> scale(const Tensor<Real>& a, Real c) {
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, out, c] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
        };
        fwd();
        push(OpKind::scale, {a.ptr()}, out.ptr(), fwd, [a, out, c] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * c;
        });
        return out;
    }

    Tensor<Real> sigmoid(const Tensor<Real>& a) {
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, out] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = Real(1) / (Real(1) + std::exp(-av[i]));
        };
        fwd();
        push(OpKind::sigmoid, {a.ptr()}, out.ptr(), fwd, [a, out] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            const auto& y = out.value();
            auto& ag = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * y[i] * (Real(1) - y[i]);
        });
        return out;
    }

    // Inverted dropout. The mask is drawn once at op creation so replay() and
    // backward() see the same pattern. p == 0 is an exact pass-through.
    Tensor<Real> dropout(const Tensor<Real>& a, double p, Rng& rng) {
        if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
        auto out = Tensor<Real>::zeros(a.shape());
        auto mask = std::make_shared<std::vector<Real>>(a.value().size());
        const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
        for (auto& m : *mask) m = (p > 0.0 && rng.uniform01() < p) ? Real(0) : keep_scale;
        auto fwd = [a, out, mask] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * (*mask)[i];
        };
        fwd();
        push(OpKind::dropout, {a.ptr()}, out.ptr(), fwd, [a, out, mask] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * (*mask)[i];
        });
        return out;
    }

    // x{batch*seq, d} plus the first `seq` rows of pos{max_seq, d}, tiled over
    // the batch.
    Tensor<Real> add_positional(const Tensor<Real>& x, const Tensor<Real>& pos, int64_t batch,
                                int64_t seq) {
        check2d("add_positional", x);
        check2d("add_positional", pos);
        if (x.rows() != batch * seq)
            throw ShapeError("add_positional: x " + shape_str(x.shape()) + " rows != batch*seq");
        if (pos.rows() < seq || pos.cols() != x.cols())
            throw ShapeError("add_positional: pos " + shape_str(pos.shape()) +
                             " incompatible with x " + shape_str(x.shape()) + " seq " +
                             std::to_string(seq));
        const int64_t d = x.cols();
        auto out = Tensor<Real>::zeros(x.shape());
        auto fwd = [x, pos, out, batch, seq, d] {
            const auto& xv = x.value();
            const auto& pv = pos.value();
            auto& ov = out.value();
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t t = 0; t < seq; ++t) {
                    const int64_t r = (b * seq + t) * d;
                    for (int64_t j = 0; j < d; ++j) ov[r + j] = xv[r + j] + pv[t * d + j];
                }
        };
        fwd();
        push(OpKind::add_positional, {x.ptr(), pos.ptr()}, out.ptr(), fwd,
             [x, pos, out, batch, seq, d] {
                 const auto& g = out.grad();
                 if (has_grad(x)) {
                     auto& xg = x.grad();
                     for (size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
                 }
                 if (has_grad(pos)) {
                     auto& pg = pos.grad();
                     for (int64_t b = 0; b < batch; ++b)
                         for (int64_t t = 0; t < seq; ++t) {
                             const int64_t r = (b * seq + t) * d;
                             for (int64_t j = 0; j < d; ++j) pg[t * d + j] += g[r + j];
                         }
                 }
             });
        return out;
    }

    // out[i, :] = a[idx[i], :]; backward scatter-adds. Duplicate indices allowed.
    Tensor<Real> gather_rows(const Tensor<Real>& a, std::vector<int64_t> idx) {
        check2d("gather_rows", a);
        for (int64_t i : idx)
            if (i < 0 || i >= a.rows())
                throw ShapeError("gather_rows: index " + std::to_string(i) + " outside " +
                                 shape_str(a.shape()));
        const int64_t d = a.cols();
        auto shared_idx = std::make_shared<std::vector<int64_t>>(std::move(idx));
        auto out = Tensor<Real>::zeros({static_cast<int64_t>(shared_idx->size()), d});
        auto fwd = [a, out, shared_idx, d] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (size_t i = 0; i < shared_idx->size(); ++i)
                std::copy_n(av.data() + (*shared_idx)[i] * d, d, ov.data() + i * d);
        };
        fwd();
        push(OpKind::gather_rows, {a.ptr()}, out.ptr(), fwd, [a, out, shared_idx, d] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (size_t i = 0; i < shared_idx->size(); ++i) {
                const int64_t r = (*shared_idx)[i] * d;
                for (int64_t j = 0; j < d; ++j) ag[r + j] += g[i * d + j];
            }
        });
        return out;
    }

    // out[:, j] = a[:, idx[j]]; backward scatter-adds.
    Tensor<Real> gather_cols(const Tensor<Real>& a, std::vector<int64_t> idx) {
        check2d("gather_cols", a);
        for (int64_t j : idx)
            if (j < 0 || j >= a.cols())
                throw ShapeError("gather_cols: index " + std::to_string(j) + " outside " +
                                 shape_str(a.shape()));
        const int64_t m = a.rows(), c = a.cols();
        auto shared_idx = std::make_shared<std::vector<int64_t>>(std::move(idx));
        const int64_t n = static_cast<int64_t>(shared_idx->size());
        auto out = Tensor<Real>::zeros({m, n});
        auto fwd = [a, out, shared_idx, m, c, n] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ov[i * n + j] = av[i * c + (*shared_idx)[j]];
        };
        fwd();
        push(OpKind::gather_cols, {a.ptr()}, out.ptr(), fwd, [a, out, shared_idx, m, c, n] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            auto& ag = a.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ag[i * c + (*shared_idx)[j]] += g[i * n + j];
        });
        return out;
    }

    Tensor<Real> softmax_rows(const Tensor<Real>& a) {
        check2d("softmax_rows", a);
        const int64_t m = a.rows(), n = a.cols();
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, out, m, n] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (int64_t i = 0; i < m; ++i)
                detail_softmax_row(av.data() + i * n, ov.data() + i * n, n);
        };
        fwd();
        push(OpKind::softmax_rows, {a.ptr()}, out.ptr(), fwd, [a, out, m, n] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            const auto& y = out.value();
            auto& ag = a.grad();
            for (int64_t i = 0; i < m; ++i) {
                Real dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (int64_t j = 0; j < n; ++j)
                    ag[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
        return out;
    }

    Tensor<Real> log_softmax_rows(const Tensor<Real>& a) {
        check2d("log_softmax_rows", a);
        const int64_t m = a.rows(), n = a.cols();
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, out, m, n] {
            const auto& av = a.value();
            auto& ov = out.value();
            for (int64_t i = 0; i < m; ++i)
                detail_log_softmax_row(av.data() + i * n, ov.data() + i * n, n);
        };
        fwd();
        push(OpKind::log_softmax_rows, {a.ptr()}, out.ptr(), fwd, [a, out, m, n] {
            if (!has_grad(a)) return;
            const auto& g = out.grad();
            const auto& ly = out.value();
            auto& ag = a.grad();
            for (int64_t i = 0; i < m; ++i) {
                Real gsum = 0;
                for (int64_t j = 0; j < n; ++j) gsum += g[i * n + j];
                for (int64_t j = 0; j < n; ++j)
                    ag[i * n + j] += g[i * n + j] - std::exp(ly[i * n + j]) * gsum;
            }
        });
        return out;
    }

    // Row-wise x / sqrt(mean(x^2) + eps) * gamma. gamma is {1, d}.
    Tensor<Real> rms_norm(const Tensor<Real>& x, const Tensor<Real>& gamma, Real eps) {
        check2d("rms_norm", x);
        if (gamma.numel() != x.cols())
            throw ShapeError("rms_norm: gamma " + shape_str(gamma.shape()) + " vs x " +
                             shape_str(x.shape()));
        const int64_t m = x.rows(), d = x.cols();
        auto out = Tensor<Real>::zeros(x.shape());
        auto inv_rms = std::make_shared<std::vector<Real>>(m);
        auto fwd = [x, gamma, out, inv_rms, m, d, eps] {
            const auto& xv = x.value();
            const auto& gv = gamma.value();
            auto& ov = out.value();
            for (int64_t i = 0; i < m; ++i) {
                Real ss = 0;
                for (int64_t j = 0; j < d; ++j) {
                    const Real v = xv[i * d + j];
                    ss += v * v;
                }
                const Real inv = Real(1) / std::sqrt(ss / static_cast<Real>(d) + eps);
                (*inv_rms)[i] = inv;
                for (int64_t j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] * inv * gv[j];
            }
        };
        fwd();
        push(OpKind::rms_norm, {x.ptr(), gamma.ptr()}, out.ptr(), fwd,
             [x, gamma, out, inv_rms, m, d] {
                 const auto& g = out.grad();
                 const auto& xv = x.value();
                 const auto& gv = gamma.value();
                 for (int64_t i = 0; i < m; ++i) {
                     const Real inv = (*inv_rms)[i];
                     if (has_grad(x)) {
                         // dL/dx = gamma*g*inv - x * inv^3/d * sum_j(g_j*gamma_j*x_j)
                         Real c = 0;
                         for (int64_t j = 0; j < d; ++j)
                             c += g[i * d + j] * gv[j] * xv[i * d + j];
                         c *= inv * inv * inv / static_cast<Real>(d);
                         auto& xg = x.grad();
                         for (int64_t j = 0; j < d; ++j)
                             xg[i * d + j] += g[i * d + j] * gv[j] * inv - xv[i * d + j] * c;
                     }
                     if (has_grad(gamma)) {
                         auto& gg = gamma.grad();
                         for (int64_t j = 0; j < d; ++j)
                             gg[j] += g[i * d + j] * xv[i * d + j] * inv;
                     }
                 }
             });
        return out;
    }

    // Causal grouped-query attention, fused. q is {batch*seq, heads*dh},
    // k and v are {batch*seq, groups*dh}; head h reads group h/(heads/groups).
    // Per query position t only keys 0..t participate; scores are scaled by
    // 1/sqrt(dh). Softmax probabilities are retained for the backward pass.
    // When `probe` is given it is filled with per-(batch,pos,group) L2 norms of
    // the group's concatenated head outputs (the pre-projection activations).
    Tensor<Real> causal_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                  const Tensor<Real>& v, int64_t batch, int64_t seq,
                                  int64_t heads, int64_t groups, int64_t dh,
                                  AttentionProbe<Real>* probe = nullptr) {
        check2d("causal_attention", q);
        if (heads <= 0 || groups <= 0 || heads % groups != 0)
            throw ConfigError("causal_attention: heads " + std::to_string(heads) +
                              " not a multiple of groups " + std::to_string(groups));
        if (q.rows() != batch * seq || q.cols() != heads * dh)
            throw ShapeError("causal_attention: q " + shape_str(q.shape()) + " expected {" +
                             std::to_string(batch * seq) + "," + std::to_string(heads * dh) + "}");
        if (k.rows() != batch * seq || k.cols() != groups * dh || v.rows() != batch * seq ||
            v.cols() != groups * dh)
            throw ShapeError("causal_attention: k " + shape_str(k.shape()) + " v " +
                             shape_str(v.shape()) + " expected {" + std::to_string(batch * seq) +
                             "," + std::to_string(groups * dh) + "}");
        const int64_t hpg = heads / groups;
        const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));
        auto out = Tensor<Real>::zeros({batch * seq, heads * dh});
        // Lower-triangular softmax rows, stored dense per (b,h): seq*seq.
        auto probs = std::make_shared<std::vector<Real>>(
            static_cast<size_t>(batch) * heads * seq * seq, Real(0));
        madds_ += static_cast<uint64_t>(batch) * heads * dh * seq * (seq + 1); // scores + values
        auto fwd = [q, k, v, out, probs, probe, batch, seq, heads, groups, dh, hpg,
                    inv_sqrt_dh] {
            const auto& qv = q.value();
            const auto& kv = k.value();
            const auto& vv = v.value();
            auto& ov = out.value();
            const int64_t qw = heads * dh, kw = groups * dh;
            std::vector<Real> row(seq);
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t h = 0; h < heads; ++h) {
                    const int64_t g = h / hpg;
                    Real* pbh = probs->data() + ((b * heads + h) * seq) * seq;
                    for (int64_t t = 0; t < seq; ++t) {
                        const Real* qrow = qv.data() + (b * seq + t) * qw + h * dh;
                        Real mx = std::numeric_limits<Real>::lowest();
                        for (int64_t j = 0; j <= t; ++j) {
                            const Real* krow = kv.data() + (b * seq + j) * kw + g * dh;
                            Real s = 0;
                            for (int64_t e = 0; e < dh; ++e) s += qrow[e] * krow[e];
                            s *= inv_sqrt_dh;
                            row[j] = s;
                            mx = std::max(mx, s);
                        }
                        Real z = 0;
                        for (int64_t j = 0; j <= t; ++j) {
                            row[j] = std::exp(row[j] - mx);
                            z += row[j];
                        }
                        const Real invz = Real(1) / z;
                        Real* orow = ov.data() + (b * seq + t) * qw + h * dh;
                        std::fill(orow, orow + dh, Real(0));
                        for (int64_t j = 0; j <= t; ++j) {
                            const Real p = row[j] * invz;
                            pbh[t * seq + j] = p;
                            const Real* vrow = vv.data() + (b * seq + j) * kw + g * dh;
                            for (int64_t e = 0; e < dh; ++e) orow[e] += p * vrow[e];
                        }
                    }
                }
            }
            if (probe) {
                probe->batch = batch;
                probe->seq = seq;
                probe->groups = groups;
                probe->group_norms.assign(static_cast<size_t>(batch) * seq * groups, Real(0));
                for (int64_t b = 0; b < batch; ++b)
                    for (int64_t t = 0; t < seq; ++t)
                        for (int64_t g = 0; g < groups; ++g) {
                            const Real* orow = ov.data() + (b * seq + t) * qw + g * hpg * dh;
                            Real ss = 0;
                            for (int64_t e = 0; e < hpg * dh; ++e) ss += orow[e] * orow[e];
                            probe->group_norms[(b * seq + t) * groups + g] = std::sqrt(ss);
                        }
            }
        };
        fwd();
        push(OpKind::causal_attention, {q.ptr(), k.ptr(), v.ptr()}, out.ptr(), fwd,
             [q, k, v, out, probs, batch, seq, heads, groups, dh, hpg, inv_sqrt_dh] {
                 const bool gq = has_grad(q), gk = has_grad(k), gv_ = has_grad(v);
                 if (!gq && !gk && !gv_) return;
                 const auto& qv = q.value();
                 const auto& kv = k.value();
                 const auto& vv = v.value();
                 const auto& og = out.grad();
                 const int64_t qw = heads * dh, kw = groups * dh;
                 std::vector<Real> dp(seq), ds(seq);
                 for (int64_t b = 0; b < batch; ++b) {
                     for (int64_t h = 0; h < heads; ++h) {
                         const int64_t g = h / hpg;
                         const Real* pbh = probs->data() + ((b * heads + h) * seq) * seq;
                         for (int64_t t = 0; t < seq; ++t) {
                             const Real* gorow = og.data() + (b * seq + t) * qw + h * dh;
                             const Real* prow = pbh + t * seq;
                             // dV and dp
                             Real dot = 0;
                             for (int64_t j = 0; j <= t; ++j) {
                                 const Real* vrow = vv.data() + (b * seq + j) * kw + g * dh;
                                 Real s = 0;
                                 for (int64_t e = 0; e < dh; ++e) s += gorow[e] * vrow[e];
                                 dp[j] = s;
                                 dot += s * prow[j];
                                 if (gv_) {
                                     Real* vgrow = v.grad().data() + (b * seq + j) * kw + g * dh;
                                     const Real p = prow[j];
                                     for (int64_t e = 0; e < dh; ++e) vgrow[e] += p * gorow[e];
                                 }
                             }
                             // softmax backward, then into q and k
                             const Real* qrow = qv.data() + (b * seq + t) * qw + h * dh;
                             Real* qgrow = gq ? q.grad().data() + (b * seq + t) * qw + h * dh
                                              : nullptr;
                             for (int64_t j = 0; j <= t; ++j) {
                                 ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt_dh;
                                 const Real* krow = kv.data() + (b * seq + j) * kw + g * dh;
                                 if (gq)
                                     for (int64_t e = 0; e < dh; ++e) qgrow[e] += ds[j] * krow[e];
                                 if (gk) {
                                     Real* kgrow = k.grad().data() + (b * seq + j) * kw + g * dh;
                                     for (int64_t e = 0; e < dh; ++e)
                                         kgrow[e] += ds[j] * qrow[e];
                                 }
                             }
                         }
                     }
                 }
             });
        return out;
    }

    // Mean cross-entropy over rows: -(1/N) sum_i log softmax(logits)[i, target_i].
    Tensor<Real> cross_entropy_mean(const Tensor<Real>& logits,
                                    std::vector<int32_t> targets) {
        check2d("cross_entropy_mean", logits);
        const int64_t n = logits.rows(), vsz = logits.cols();
        if (static_cast<int64_t>(targets.size()) != n)
            throw ShapeError("cross_entropy_mean: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_str(logits.shape()));
        for (int32_t t : targets)
            if (t < 0 || t >= vsz)
                throw InputError("cross_entropy_mean: target " + std::to_string(t) +
                                 " outside vocab " + std::to_string(vsz));
        auto tgt = std::make_shared<std::vector<int32_t>>(std::move(targets));
        auto logp = std::make_shared<std::vector<Real>>(logits.value().size());
        auto out = Tensor<Real>::zeros({1});
        auto fwd = [logits, tgt, logp, out, n, vsz] {
            const auto& lv = logits.value();
            Real acc = 0;
            for (int64_t i = 0; i < n; ++i) {
                detail_log_softmax_row(lv.data() + i * vsz, logp->data() + i * vsz, vsz);
                acc -= (*logp)[i * vsz + (*tgt)[i]];
            }
            out.value()[0] = acc / static_cast<Real>(n);
        };
        fwd();
        push(OpKind::cross_entropy_mean, {logits.ptr()}, out.ptr(), fwd,
             [logits, tgt, logp, out, n, vsz] {
                 if (!has_grad(logits)) return;
                 const Real go = out.grad()[0] / static_cast<Real>(n);
                 auto& lg = logits.grad();
                 for (int64_t i = 0; i < n; ++i) {
                     for (int64_t j = 0; j < vsz; ++j)
                         lg[i * vsz + j] += go * std::exp((*logp)[i * vsz + j]);
                     lg[i * vsz + (*tgt)[i]] -= go;
                 }
             });
        return out;
    }

    // Distillation divergence between teacher and student logits, averaged over
    // rows. The teacher is a constant: no gradient flows to it. Softmax-based
    // kinds apply the temperature to both sides; the norm and cosine kinds act
    // on raw logits.
    Tensor<Real> kd_divergence(KdKind kind, const Tensor<Real>& teacher,
                               const Tensor<Real>& student, Real temp) {
        check_same_shape("kd_divergence", teacher, student);
        if (!(temp > Real(0))) throw ConfigError("kd_divergence: temperature must be positive");
        const int64_t n = teacher.rows(), vsz = teacher.cols();
        auto out = Tensor<Real>::zeros({1});
        // Scratch retained for backward: per-row log-probabilities (softmax
        // kinds) or nothing (norm kinds recompute from values).
        auto lt = std::make_shared<std::vector<Real>>();
        auto ls = std::make_shared<std::vector<Real>>();
        const bool softmax_kind =
            kind == KdKind::kl_forward || kind == KdKind::kl_reverse || kind == KdKind::js;
        if (softmax_kind) {
            lt->resize(teacher.value().size());
            ls->resize(teacher.value().size());
        }
        auto fwd = [kind, teacher, student, out, lt, ls, n, vsz, temp, softmax_kind] {
            const auto& tv = teacher.value();
            const auto& sv = student.value();
            std::vector<Real> tmp(vsz);
            Real acc = 0;
            for (int64_t i = 0; i < n; ++i) {
                const Real* trow = tv.data() + i * vsz;
                const Real* srow = sv.data() + i * vsz;
                const Real* lti = nullptr;
                const Real* lsi = nullptr;
                if (softmax_kind) {
                    for (int64_t j = 0; j < vsz; ++j) tmp[j] = trow[j] / temp;
                    detail_log_softmax_row(tmp.data(), lt->data() + i * vsz, vsz);
                    for (int64_t j = 0; j < vsz; ++j) tmp[j] = srow[j] / temp;
                    detail_log_softmax_row(tmp.data(), ls->data() + i * vsz, vsz);
                    lti = lt->data() + i * vsz;
                    lsi = ls->data() + i * vsz;
                }
                switch (kind) {
                    case KdKind::kl_forward: {
                        Real s = 0;
                        for (int64_t j = 0; j < vsz; ++j) {
                            const Real p = std::exp(lti[j]);
                            if (p > Real(0)) s += p * (lti[j] - lsi[j]);
                        }
                        acc += s;
                        break;
                    }
                    case KdKind::kl_reverse: {
                        Real s = 0;
                        for (int64_t j = 0; j < vsz; ++j) {
                            const Real qj = std::exp(lsi[j]);
                            if (qj > Real(0)) s += qj * (lsi[j] - lti[j]);
                        }
                        acc += s;
                        break;
                    }
                    case KdKind::js: {
                        Real s = 0;
                        for (int64_t j = 0; j < vsz; ++j) {
                            const Real p = std::exp(lti[j]);
                            const Real qj = std::exp(lsi[j]);
                            const Real m = (p + qj) / Real(2);
                            if (m <= Real(0)) continue;
                            const Real lm = std::log(m);
                            if (p > Real(0)) s += Real(0.5) * p * (lti[j] - lm);
                            if (qj > Real(0)) s += Real(0.5) * qj * (lsi[j] - lm);
                        }
                        acc += s;
                        break;
                    }
                    case KdKind::l1: {
                        Real s = 0;
                        for (int64_t j = 0; j < vsz; ++j) s += std::abs(trow[j] - srow[j]);
                        acc += s;
                        break;
                    }
                    case KdKind::l2: {
                        Real s = 0;
                        for (int64_t j = 0; j < vsz; ++j) {
                            const Real d = trow[j] - srow[j];
                            s += d * d;
                        }
                        acc += std::sqrt(s);
                        break;
                    }
                    case KdKind::cosine: {
                        Real dot = 0, nt = 0, ns = 0;
                        for (int64_t j = 0; j < vsz; ++j) {
                            dot += trow[j] * srow[j];
                            nt += trow[j] * trow[j];
                            ns += srow[j] * srow[j];
                        }
                        const Real denom = std::sqrt(nt) * std::sqrt(ns);
                        acc += Real(1) - (denom > Real(0) ? dot / denom : Real(0));
                        break;
                    }
                }
            }
            out.value()[0] = acc / static_cast<Real>(n);
        };
        fwd();
        push(OpKind::kd_divergence, {teacher.ptr(), student.ptr()}, out.ptr(), fwd,
             [kind, teacher, student, out, lt, ls, n, vsz, temp] {
                 if (!has_grad(student)) return;
                 const Real go = out.grad()[0] / static_cast<Real>(n);
                 const auto& tv = teacher.value();
                 const auto& sv = student.value();
                 auto& sg = student.grad();
                 const bool softmax_kind = !lt->empty();
                 for (int64_t i = 0; i < n; ++i) {
                     const Real* trow = tv.data() + i * vsz;
                     const Real* srow = sv.data() + i * vsz;
                     Real* grow = sg.data() + i * vsz;
                     const Real* lti = softmax_kind ? lt->data() + i * vsz : nullptr;
                     const Real* lsi = softmax_kind ? ls->data() + i * vsz : nullptr;
                     switch (kind) {
                         case KdKind::kl_forward: {
                             // d/dz_j sum_v p_v(lp_v - lq_v) = (q_j - p_j)/T
                             for (int64_t j = 0; j < vsz; ++j)
                                 grow[j] +=
                                     go * (std::exp(lsi[j]) - std::exp(lti[j])) / temp;
                             break;
                         }
                         case KdKind::kl_reverse: {
                             // d/dz_j sum_v q_v a_v, a = lq - lp:
                             // q_j (a_j - sum_v q_v a_v) / T
                             Real mean_a = 0;
                             for (int64_t j = 0; j < vsz; ++j)
                                 mean_a += std::exp(lsi[j]) * (lsi[j] - lti[j]);
                             for (int64_t j = 0; j < vsz; ++j)
                                 grow[j] += go * std::exp(lsi[j]) *
                                            ((lsi[j] - lti[j]) - mean_a) / temp;
                             break;
                         }
                         case KdKind::js: {
                             // With g_v = 0.5*log(q_v/m_v):
                             // d/dz_j = q_j (g_j - sum_v q_v g_v) / T
                             Real mean_g = 0;
                             std::vector<Real> gvec(vsz, Real(0));
                             for (int64_t j = 0; j < vsz; ++j) {
                                 const Real p = std::exp(lti[j]);
                                 const Real qj = std::exp(lsi[j]);
                                 const Real m = (p + qj) / Real(2);
                                 if (qj > Real(0) && m > Real(0))
                                     gvec[j] = Real(0.5) * (lsi[j] - std::log(m));
                                 mean_g += qj * gvec[j];
                             }
                             for (int64_t j = 0; j < vsz; ++j)
                                 grow[j] += go * std::exp(lsi[j]) * (gvec[j] - mean_g) / temp;
                             break;
                         }
                         case KdKind::l1: {
                             for (int64_t j = 0; j < vsz; ++j) {
                                 const Real d = trow[j] - srow[j];
                                 // subgradient 0 at d == 0
                                 grow[j] += go * (d > Real(0) ? Real(-1)
                                                              : (d < Real(0) ? Real(1) : Real(0)));
                             }
                             break;
                         }
                         case KdKind::l2: {
                             Real ss = 0;
                             for (int64_t j = 0; j < vsz; ++j) {
                                 const Real d = trow[j] - srow[j];
                                 ss += d * d;
                             }
                             const Real norm = std::sqrt(ss);
                             if (norm > Real(0))
                                 for (int64_t j = 0; j < vsz; ++j)
                                     grow[j] += go * (srow[j] - trow[j]) / norm;
                             break;
                         }
                         case KdKind::cosine: {
                             Real dot = 0, nt2 = 0, ns2 = 0;
                             for (int64_t j = 0; j < vsz; ++j) {
                                 dot += trow[j] * srow[j];
                                 nt2 += trow[j] * trow[j];
                                 ns2 += srow[j] * srow[j];
                             }
                             const Real na = std::sqrt(nt2), nb = std::sqrt(ns2);
                             if (na > Real(0) && nb > Real(0)) {
                                 const Real c = dot / (na * nb);
                                 for (int64_t j = 0; j < vsz; ++j)
                                     grow[j] += go * (-(trow[j] / (na * nb)) +
                                                      c * srow[j] / ns2);
                             }
                             break;
                         }
                     }
                 }
             });
        return out;
    }

    Tensor<Real> sum_all(const Tensor<Real>& a) {
        auto out = Tensor<Real>::zeros({1});
        auto fwd = [a, out] {
            Real s = 0;
            for (Real v : a.value()) s += v;
            out.value()[0] = s;
        };
        fwd();
        push(OpKind::sum_all, {a.ptr()}, out.ptr(), fwd, [a, out] {
            if (!has_grad(a)) return;
            const Real g = out.grad()[0];
            for (Real& v : a.grad()) v += g;
        });
        return out;
    }

    // Seeds d(loss)/d(loss) = 1 and visits all recorded ops in reverse order.
    // Gradients of tensors this tape saw that are off the loss path end up
    // zero; pre-existing gradient buffers (earlier tapes, same weights) are
    // accumulated into, not reset.
    void backward(const Tensor<Real>& loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
        if (ran_backward_) throw StateError("backward: tape already ran backward");
        ran_backward_ = true;
        for (auto& node : nodes_) {
            node.out->ensure_grad();
            for (auto& in : node.in)
                if (in->requires_grad) in->ensure_grad();
        }
        loss.ptr()->ensure_grad();
        loss.ptr()->grad[0] += Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->bwd();
    }

    // Recomputes every node's forward value in record order. Given unchanged
    // inputs this is bitwise identical to the original execution.
    void replay() {
        for (auto& node : nodes_) node.fwd();
    }

    size_t size() const { return nodes_.size(); }
    uint64_t madds() const { return madds_; }
    void reset_madds() { madds_ = 0; }

    std::vector<NodeInfo> nodes_info() const {
        std::vector<NodeInfo> out;
        out.reserve(nodes_.size());
        for (const auto& n : nodes_) {
            NodeInfo info;
            info.kind = n.kind;
            for (const auto& in : n.in) info.inputs.push_back(in->id);
            info.output = n.out->id;
            out.push_back(std::move(info));
        }
        return out;
    }

private:
    struct Node {
        OpKind kind;
        std::vector<TensorPtr<Real>> in;
        TensorPtr<Real> out;
        std::function<void()> fwd;
        std::function<void()> bwd;
    };

    static bool has_grad(const Tensor<Real>& t) {
        return t.ptr()->grad.size() == t.ptr()->value.size() && !t.ptr()->value.empty();
    }

    static void check2d(const char* op, const Tensor<Real>& t) {
        if (t.shape().size() != 2)
            throw ShapeError(std::string(op) + ": expected 2-d tensor, got " +
                             shape_str(t.shape()));
    }

    static void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
        if (a.shape() != b.shape())
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    }

    static void detail_softmax_row(const Real* in, Real* out, int64_t n) {
        Real mx = in[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        Real z = 0;
        for (int64_t j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            z += out[j];
        }
        const Real invz = Real(1) / z;
        for (int64_t j = 0; j < n; ++j) out[j] *= invz;
    }

    static void detail_log_softmax_row(const Real* in, Real* out, int64_t n) {
        Real mx = in[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        Real z = 0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
        const Real lz = std::log(z) + mx;
        for (int64_t j = 0; j < n; ++j) out[j] = in[j] - lz;
    }

    template <class F>
    Tensor<Real> binary_elementwise(OpKind kind, const Tensor<Real>& a, const Tensor<Real>& b,
                                    F&& f, Real wa, Real wb) {
        check_same_shape(op_kind_name(kind), a, b);
        auto out = Tensor<Real>::zeros(a.shape());
        auto fwd = [a, b, out, f] {
            const auto& av = a.value();
            const auto& bv = b.value();
            auto& ov = out.value();
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
        };
        fwd();
        push(kind, {a.ptr(), b.ptr()}, out.ptr(), fwd, [a, b, out, wa, wb] {
            const auto& g = out.grad();
            if (has_grad(a)) {
                auto& ag = a.grad();
                for (size_t i = 0; i < g.size(); ++i) ag[i] += wa * g[i];
            }
            if (has_grad(b)) {
                auto& bg = b.grad();
                for (size_t i = 0; i < g.size(); ++i) bg[i] += wb * g[i];
            }
        });
        return out;
    }

    void push(OpKind kind, std::vector<TensorPtr<Real>> in, TensorPtr<Real> out,
              std::function<void()> fwd, std::function<void()> bwd) {
        nodes_.push_back(Node{kind, std::move(in), std::move(out), std::move(fwd), std::move(bwd)});
    }

    std::vector<Node> nodes_;
    uint64_t madds_ = 0;
    bool ran_backward_ = false;
};

// Central-difference gradient verification. `build` must construct the loss on
// the given fresh tape from the current parameter values. Reports the largest
// relative error |analytic - numeric| / (|numeric| + 1e-12) over every element
// of every parameter.
template <class Real>
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    bool all_finite = true;
};

template <class Real, class BuildFn>
GradCheckReport<Real> grad_check(BuildFn&& build, std::vector<Tensor<Real>> params, Real h) {
    GradCheckReport<Real> report;
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.ensure_grad();
        p.zero_grad();
    }
    std::vector<std::vector<Real>> analytic;
    {
        Tape<Real> tape;
        Tensor<Real> loss = build(tape);
        tape.backward(loss);
        for (auto& p : params) analytic.push_back(p.grad());
    }
    auto eval_loss = [&]() -> double {
        Tape<Real> tape;
        return static_cast<double>(build(tape).item());
    };
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].value();
        for (size_t i = 0; i < vals.size(); ++i) {
            const Real keep = vals[i];
            vals[i] = keep + h;
            const double up = eval_loss();
            vals[i] = keep - h;
            const double dn = eval_loss();
            vals[i] = keep;
            const double numeric = (up - dn) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic[pi][i]);
            if (!std::isfinite(numeric) || !std::isfinite(a)) report.all_finite = false;
            const double rel = std::abs(a - numeric) / (std::abs(numeric) + 1e-12);
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = params[pi].name().empty()
                                         ? ("param" + std::to_string(pi))
                                         : params[pi].name();
                report.worst_index = static_cast<int64_t>(i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

} // namespace elm
