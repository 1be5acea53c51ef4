#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "s4rec/common.hpp"
#include "s4rec/gemm.hpp"
#include "s4rec/parallel.hpp"
#include "s4rec/rng.hpp"
#include "s4rec/tensor.hpp"

namespace s4rec {

// Handle into a Graph. Cheap to copy; only meaningful together with the graph
// that produced it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Forward values are computed eagerly as ops are emitted;
// backward() replays the recorded closures in strict reverse order exactly
// once. Parent ids always precede child ids by construction.
template <typename S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(TensorData<S> value, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, needs_grad});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    // Emits a node; the backprop closure is attached afterwards so it can
    // capture the node's own id.
    Var emit(TensorData<S> value, bool needs_grad) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, needs_grad});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    void set_backprop(Var v, std::function<void()> fn) {
        nodes_[check(v)].backprop = std::move(fn);
    }

    const TensorData<S>& val(Var v) const { return nodes_[check(v)].value; }
    bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

    // Gradient buffer, zero-initialized on first touch; flat, same numel as
    // the node's value.
    std::vector<S>& grad(Var v) {
        Node& n = nodes_[check(v)];
        if (n.grad.empty()) n.grad.assign(n.value.data.size(), S{0});
        return n.grad;
    }

    bool grad_live(Var v) const { return !nodes_[check(v)].grad.empty(); }

    void backward(Var loss) {
        Node& ln = nodes_[check(loss)];
        if (ln.value.numel() != 1)
            throw ShapeError("backward requires a scalar loss, got shape " +
                             shape_str(ln.value.shape));
        grad(loss)[0] = S{1};
        for (int64_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backprop && n.needs_grad && !n.grad.empty()) n.backprop();
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorData<S> value;
        std::vector<S> grad;
        std::function<void()> backprop;
        bool needs_grad = false;
    };

    size_t check(Var v) const {
        if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
            throw ShapeError("invalid Var handle");
        return static_cast<size_t>(v.id);
    }

    std::vector<Node> nodes_;
};

namespace detail {

inline void check_suffix(const Shape& a, const Shape& b, const char* kernel) {
    bool ok = b.size() <= a.size();
    if (ok)
        for (size_t i = 0; i < b.size(); ++i)
            if (a[a.size() - b.size() + i] != b[i]) ok = false;
    if (!ok)
        throw ShapeError(std::string(kernel) + ": shape " + shape_str(b) +
                         " is not a trailing broadcast of " + shape_str(a));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast. b may be a trailing-shape (suffix) broadcast of a;
// no other broadcasting exists.
// ---------------------------------------------------------------------------

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    detail::check_suffix(av.shape, bv.shape, "add");
    const int64_t n = av.numel(), bn = bv.numel();
    TensorData<S> out(av.shape);
    for (int64_t i = 0; i < n; ++i) out.data[i] = av.data[i] + bv.data[i % bn];
    const Var y = g.emit(std::move(out), g.needs_grad(a) || g.needs_grad(b));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, b, y, n, bn] {
            const auto& gy = g.grad(y);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (int64_t i = 0; i < n; ++i) gb[i % bn] += gy[i];
            }
        });
    }
    return y;
}

template <typename S>
Var mul(Graph<S>& g, Var a, Var b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    detail::check_suffix(av.shape, bv.shape, "mul");
    const int64_t n = av.numel(), bn = bv.numel();
    TensorData<S> out(av.shape);
    for (int64_t i = 0; i < n; ++i) out.data[i] = av.data[i] * bv.data[i % bn];
    const Var y = g.emit(std::move(out), g.needs_grad(a) || g.needs_grad(b));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, b, y, n, bn] {
            const auto& gy = g.grad(y);
            const auto& av2 = g.val(a);
            const auto& bv2 = g.val(b);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv2.data[i % bn];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (int64_t i = 0; i < n; ++i) gb[i % bn] += gy[i] * av2.data[i];
            }
        });
    }
    return y;
}

template <typename S>
Var scale(Graph<S>& g, Var a, double c) {
    const auto& av = g.val(a);
    TensorData<S> out(av.shape);
    const int64_t n = av.numel();
    for (int64_t i = 0; i < n; ++i)
        out.data[i] = static_cast<S>(static_cast<double>(av.data[i]) * c);
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, c, n] {
            const auto& gy = g.grad(y);
            auto& ga = g.grad(a);
            for (int64_t i = 0; i < n; ++i)
                ga[i] += static_cast<S>(static_cast<double>(gy[i]) * c);
        });
    }
    return y;
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
    return add(g, a, scale(g, b, -1.0));
}

template <typename S>
Var log_op(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    TensorData<S> out(av.shape);
    const int64_t n = av.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!(av.data[i] > S{0}))
            throw NumericError("log: non-positive input at flat index " + std::to_string(i));
        out.data[i] = std::log(av.data[i]);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, n] {
            const auto& gy = g.grad(y);
            const auto& av2 = g.val(a);
            auto& ga = g.grad(a);
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] / av2.data[i];
        });
    }
    return y;
}

template <typename S>
Var exp_op(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    TensorData<S> out(av.shape);
    const int64_t n = av.numel();
    for (int64_t i = 0; i < n; ++i) out.data[i] = std::exp(av.data[i]);
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, n] {
            const auto& gy = g.grad(y);
            const auto& yv = g.val(y);
            auto& ga = g.grad(a);
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * yv.data[i];
        });
    }
    return y;
}

template <typename S>
Var gelu(Graph<S>& g, Var a) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const auto& av = g.val(a);
    TensorData<S> out(av.shape);
    const int64_t n = av.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(av.data[i]);
        out.data[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, n] {
            const auto& gy = g.grad(y);
            const auto& av2 = g.val(a);
            auto& ga = g.grad(a);
            for (int64_t i = 0; i < n; ++i) {
                const double x = static_cast<double>(av2.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ga[i] += static_cast<S>(static_cast<double>(gy[i]) * (cdf + x * pdf));
            }
        });
    }
    return y;
}

// Inverted dropout; mask drawn from the caller's stream so runs replay
// exactly. Eval mode is the identity (the input Var is returned unchanged).
template <typename S>
Var dropout(Graph<S>& g, Var a, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0)
        throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return a;
    const auto& av = g.val(a);
    const int64_t n = av.numel();
    auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
    const S keep = static_cast<S>(1.0 / (1.0 - p));
    for (int64_t i = 0; i < n; ++i)
        (*mask)[static_cast<size_t>(i)] = rng.uniform() >= p ? keep : S{0};
    TensorData<S> out(av.shape);
    for (int64_t i = 0; i < n; ++i) out.data[i] = av.data[i] * (*mask)[static_cast<size_t>(i)];
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, n, mask] {
            const auto& gy = g.grad(y);
            auto& ga = g.grad(a);
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * (*mask)[static_cast<size_t>(i)];
        });
    }
    return y;
}

// Identity forward; backward multiplies the upstream gradient by -lambda.
template <typename S>
Var grad_reverse(Graph<S>& g, Var a, double lambda) {
    if (lambda < 0.0)
        throw ConfigError("grad_reverse lambda must be >= 0, got " + std::to_string(lambda));
    TensorData<S> out = g.val(a);
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, lambda] {
            const auto& gy = g.grad(y);
            auto& ga = g.grad(a);
            const int64_t n = static_cast<int64_t>(gy.size());
            for (int64_t i = 0; i < n; ++i)
                ga[i] += static_cast<S>(-lambda * static_cast<double>(gy[i]));
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Matrix multiply. a is treated as (rows x K) with K = last axis; b must be
// 2-D: (K x N), or (N x K) with trans_b. Output shape: a's leading axes + N.
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b, bool trans_b = false) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    if (bv.ndim() != 2)
        throw ShapeError("matmul: second operand must be 2-D, got " + shape_str(bv.shape));
    const int64_t K = av.cols();
    const int64_t M = av.rows();
    const int64_t N = trans_b ? bv.dim(0) : bv.dim(1);
    const int64_t bk = trans_b ? bv.dim(1) : bv.dim(0);
    if (bk != K)
        throw ShapeError("matmul: inner extents differ, " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape) + (trans_b ? " (transposed)" : ""));
    Shape oshape(av.shape.begin(), av.shape.end() - 1);
    oshape.push_back(N);
    TensorData<S> out(std::move(oshape));
    if (trans_b) {
        gemm_nt(av.data.data(), M, K, bv.data.data(), N, out.data.data(), false);
    } else {
        std::vector<S> bt(static_cast<size_t>(K * N));
        transpose_pack(bv.data.data(), K, N, bt.data());
        gemm_nt(av.data.data(), M, K, bt.data(), N, out.data.data(), false);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a) || g.needs_grad(b));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, b, y, M, N, K, trans_b] {
            const auto& gy = g.grad(y);
            const auto& av2 = g.val(a);
            const auto& bv2 = g.val(b);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                if (trans_b) {
                    // dA += G (M x N) * B (N x K)
                    gemm_nn(gy.data(), M, N, bv2.data.data(), K, ga.data(), true);
                } else {
                    // dA += G (M x N) * B^T, B stored (K x N)
                    gemm_nt(gy.data(), M, N, bv2.data.data(), K, ga.data(), true);
                }
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                if (trans_b) {
                    // dB (N x K) += G^T (N x M) * A (M x K)
                    gemm_tn(gy.data(), M, N, av2.data.data(), K, gb.data(), true);
                } else {
                    // dB (K x N) += A^T (K x M) * G (M x N)
                    gemm_tn(av2.data.data(), M, K, gy.data(), N, gb.data(), true);
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Row gathers. `table` is treated as (R x C) with C = last axis; ids index
// rows. Output shape: ids_shape + [C]. Backward scatter-adds row gradients.
// ---------------------------------------------------------------------------

template <typename S>
Var gather_rows(Graph<S>& g, Var table, std::vector<int64_t> ids, Shape ids_shape = {}) {
    const auto& tv = g.val(table);
    const int64_t C = tv.cols();
    const int64_t R = tv.rows();
    if (ids_shape.empty()) ids_shape = {static_cast<int64_t>(ids.size())};
    if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size()))
        throw ShapeError("gather_rows: ids_shape does not match ids length");
    for (int64_t id : ids)
        if (id < 0 || id >= R)
            throw DataError("gather_rows: row index " + std::to_string(id) +
                            " out of range [0," + std::to_string(R) + ")");
    Shape oshape = ids_shape;
    oshape.push_back(C);
    TensorData<S> out(std::move(oshape));
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv.row(ids[i]), C, out.row(static_cast<int64_t>(i)));
    auto ids_ptr = std::make_shared<std::vector<int64_t>>(std::move(ids));
    const Var y = g.emit(std::move(out), g.needs_grad(table));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, table, y, ids_ptr, C] {
            const auto& gy = g.grad(y);
            auto& gt = g.grad(table);
            for (size_t i = 0; i < ids_ptr->size(); ++i) {
                const int64_t r = (*ids_ptr)[i];
                const S* src = gy.data() + static_cast<int64_t>(i) * C;
                S* dst = gt.data() + r * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
        });
    }
    return y;
}

template <typename S>
Var embedding_gather(Graph<S>& g, Var table, const std::vector<int64_t>& ids,
                     Shape ids_shape = {}) {
    return gather_rows(g, table, std::vector<int64_t>(ids), std::move(ids_shape));
}

// Vertical concatenation of two matrices with equal row width.
template <typename S>
Var concat_rows(Graph<S>& g, Var a, Var b) {
    const auto& av = g.val(a);
    const auto& bv = g.val(b);
    if (av.cols() != bv.cols())
        throw ShapeError("concat_rows: row widths differ, " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
    const int64_t C = av.cols(), ra = av.rows(), rb = bv.rows();
    TensorData<S> out({ra + rb, C});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + ra * C);
    const Var y = g.emit(std::move(out), g.needs_grad(a) || g.needs_grad(b));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, b, y, ra, rb, C] {
            const auto& gy = g.grad(y);
            if (g.needs_grad(a)) {
                auto& ga = g.grad(a);
                for (int64_t i = 0; i < ra * C; ++i) ga[i] += gy[i];
            }
            if (g.needs_grad(b)) {
                auto& gb = g.grad(b);
                for (int64_t i = 0; i < rb * C; ++i) gb[i] += gy[ra * C + i];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Row-wise (last axis) normalizations.
// ---------------------------------------------------------------------------

template <typename S>
Var softmax(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    const int64_t R = av.rows(), C = av.cols();
    TensorData<S> out(av.shape);
    for (int64_t r = 0; r < R; ++r) {
        const S* x = av.row(r);
        S* y = out.row(r);
        double m = -1e300;
        for (int64_t c = 0; c < C; ++c) m = std::max(m, static_cast<double>(x[c]));
        double sum = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double e = std::exp(static_cast<double>(x[c]) - m);
            y[c] = static_cast<S>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t c = 0; c < C; ++c) y[c] = static_cast<S>(static_cast<double>(y[c]) * inv);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, R, C] {
            const auto& gy = g.grad(y);
            const auto& yv = g.val(y);
            auto& ga = g.grad(a);
            for (int64_t r = 0; r < R; ++r) {
                const S* yr = yv.row(r);
                const S* gr = gy.data() + r * C;
                double dot = 0.0;
                for (int64_t c = 0; c < C; ++c)
                    dot += static_cast<double>(yr[c]) * static_cast<double>(gr[c]);
                S* gar = ga.data() + r * C;
                for (int64_t c = 0; c < C; ++c)
                    gar[c] += static_cast<S>(static_cast<double>(yr[c]) *
                                             (static_cast<double>(gr[c]) - dot));
            }
        });
    }
    return y;
}

template <typename S>
Var log_softmax(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    const int64_t R = av.rows(), C = av.cols();
    TensorData<S> out(av.shape);
    for (int64_t r = 0; r < R; ++r) {
        const S* x = av.row(r);
        S* y = out.row(r);
        double m = -1e300;
        for (int64_t c = 0; c < C; ++c) m = std::max(m, static_cast<double>(x[c]));
        double sum = 0.0;
        for (int64_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(x[c]) - m);
        const double lse = m + std::log(sum);
        for (int64_t c = 0; c < C; ++c) y[c] = static_cast<S>(static_cast<double>(x[c]) - lse);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, R, C] {
            const auto& gy = g.grad(y);
            const auto& yv = g.val(y);
            auto& ga = g.grad(a);
            for (int64_t r = 0; r < R; ++r) {
                const S* yr = yv.row(r);
                const S* gr = gy.data() + r * C;
                double gsum = 0.0;
                for (int64_t c = 0; c < C; ++c) gsum += static_cast<double>(gr[c]);
                S* gar = ga.data() + r * C;
                for (int64_t c = 0; c < C; ++c)
                    gar[c] += static_cast<S>(static_cast<double>(gr[c]) -
                                             std::exp(static_cast<double>(yr[c])) * gsum);
            }
        });
    }
    return y;
}

// Pre-affine layer norm over the last axis; gain/bias are applied by the
// caller via mul/add so their gradients ride the ordinary broadcast ops.
template <typename S>
Var layernorm(Graph<S>& g, Var a, double eps) {
    const auto& av = g.val(a);
    const int64_t R = av.rows(), C = av.cols();
    TensorData<S> out(av.shape);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* x = av.row(r);
        double mean = 0.0;
        for (int64_t c = 0; c < C; ++c) mean += static_cast<double>(x[c]);
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double d = static_cast<double>(x[c]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = inv;
        S* y = out.row(r);
        for (int64_t c = 0; c < C; ++c)
            y[c] = static_cast<S>((static_cast<double>(x[c]) - mean) * inv);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, R, C, inv_std] {
            const auto& gy = g.grad(y);
            const auto& yv = g.val(y);
            auto& ga = g.grad(a);
            for (int64_t r = 0; r < R; ++r) {
                const S* yr = yv.row(r);
                const S* gr = gy.data() + r * C;
                double gmean = 0.0, gymean = 0.0;
                for (int64_t c = 0; c < C; ++c) {
                    gmean += static_cast<double>(gr[c]);
                    gymean += static_cast<double>(gr[c]) * static_cast<double>(yr[c]);
                }
                gmean /= static_cast<double>(C);
                gymean /= static_cast<double>(C);
                const double inv = (*inv_std)[static_cast<size_t>(r)];
                S* gar = ga.data() + r * C;
                for (int64_t c = 0; c < C; ++c)
                    gar[c] += static_cast<S>(inv * (static_cast<double>(gr[c]) - gmean -
                                                    static_cast<double>(yr[c]) * gymean));
            }
        });
    }
    return y;
}

// Unit L2 norm per row. Rows with norm < 1e-12 map to zero and receive zero
// gradient.
template <typename S>
Var l2_normalize(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    const int64_t R = av.rows(), C = av.cols();
    TensorData<S> out(av.shape);
    auto inv_norm = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* x = av.row(r);
        double sq = 0.0;
        for (int64_t c = 0; c < C; ++c)
            sq += static_cast<double>(x[c]) * static_cast<double>(x[c]);
        const double norm = std::sqrt(sq);
        const double inv = norm < 1e-12 ? 0.0 : 1.0 / norm;
        (*inv_norm)[static_cast<size_t>(r)] = inv;
        S* y = out.row(r);
        for (int64_t c = 0; c < C; ++c) y[c] = static_cast<S>(static_cast<double>(x[c]) * inv);
    }
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, R, C, inv_norm] {
            const auto& gy = g.grad(y);
            const auto& yv = g.val(y);
            auto& ga = g.grad(a);
            for (int64_t r = 0; r < R; ++r) {
                const double inv = (*inv_norm)[static_cast<size_t>(r)];
                if (inv == 0.0) continue;
                const S* yr = yv.row(r);
                const S* gr = gy.data() + r * C;
                double dot = 0.0;
                for (int64_t c = 0; c < C; ++c)
                    dot += static_cast<double>(yr[c]) * static_cast<double>(gr[c]);
                S* gar = ga.data() + r * C;
                for (int64_t c = 0; c < C; ++c)
                    gar[c] += static_cast<S>(inv * (static_cast<double>(gr[c]) -
                                                    static_cast<double>(yr[c]) * dot));
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions and selections.
// ---------------------------------------------------------------------------

template <typename S>
Var reduce_sum(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    double acc = 0.0;
    for (S v : av.data) acc += static_cast<double>(v);
    const Var y = g.emit(TensorData<S>::scalar(static_cast<S>(acc)), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y] {
            const S gy = g.grad(y)[0];
            auto& ga = g.grad(a);
            for (auto& v : ga) v += gy;
        });
    }
    return y;
}

template <typename S>
Var reduce_mean(Graph<S>& g, Var a) {
    const auto& av = g.val(a);
    const int64_t n = av.numel();
    if (n == 0) throw ShapeError("reduce_mean of an empty tensor");
    double acc = 0.0;
    for (S v : av.data) acc += static_cast<double>(v);
    const Var y =
        g.emit(TensorData<S>::scalar(static_cast<S>(acc / static_cast<double>(n))), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, n] {
            const double gy = static_cast<double>(g.grad(y)[0]) / static_cast<double>(n);
            auto& ga = g.grad(a);
            for (auto& v : ga) v += static_cast<S>(gy);
        });
    }
    return y;
}

// One element per row: out[i] = x[i, idx[i]].
template <typename S>
Var pick(Graph<S>& g, Var a, std::vector<int64_t> idx) {
    const auto& av = g.val(a);
    const int64_t R = av.rows(), C = av.cols();
    if (static_cast<int64_t>(idx.size()) != R)
        throw ShapeError("pick: index count " + std::to_string(idx.size()) +
                         " does not match row count " + std::to_string(R));
    TensorData<S> out({R});
    for (int64_t r = 0; r < R; ++r) {
        const int64_t c = idx[static_cast<size_t>(r)];
        if (c < 0 || c >= C)
            throw ShapeError("pick: column " + std::to_string(c) + " out of range");
        out.data[r] = av.row(r)[c];
    }
    auto idx_ptr = std::make_shared<std::vector<int64_t>>(std::move(idx));
    const Var y = g.emit(std::move(out), g.needs_grad(a));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, a, y, idx_ptr, C] {
            const auto& gy = g.grad(y);
            auto& ga = g.grad(a);
            for (size_t r = 0; r < idx_ptr->size(); ++r)
                ga[static_cast<int64_t>(r) * C + (*idx_ptr)[r]] += gy[r];
        });
    }
    return y;
}

// Fused per-row cross-entropy with integer targets: out[i] =
// logsumexp(x[i,:]) - x[i, t_i]. Keeps only the row logsumexp for backward,
// so the full probability matrix is never materialized.
template <typename S>
Var softmax_xent(Graph<S>& g, Var logits, std::vector<int64_t> targets) {
    const auto& lv = g.val(logits);
    const int64_t R = lv.rows(), C = lv.cols();
    if (static_cast<int64_t>(targets.size()) != R)
        throw ShapeError("softmax_xent: target count does not match rows");
    TensorData<S> out({R});
    auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const int64_t t = targets[static_cast<size_t>(r)];
        if (t < 0 || t >= C)
            throw ShapeError("softmax_xent: target " + std::to_string(t) + " out of range");
        const S* x = lv.row(r);
        double m = -1e300;
        for (int64_t c = 0; c < C; ++c) m = std::max(m, static_cast<double>(x[c]));
        double sum = 0.0;
        for (int64_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(x[c]) - m);
        const double l = m + std::log(sum);
        (*lse)[static_cast<size_t>(r)] = l;
        out.data[r] = static_cast<S>(l - static_cast<double>(x[t]));
    }
    auto tgt = std::make_shared<std::vector<int64_t>>(std::move(targets));
    const Var y = g.emit(std::move(out), g.needs_grad(logits));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, logits, y, tgt, lse, R, C] {
            const auto& gy = g.grad(y);
            const auto& lv2 = g.val(logits);
            auto& gl = g.grad(logits);
            parallel_for(R, [&](int64_t r0, int64_t r1) {
                for (int64_t r = r0; r < r1; ++r) {
                    const double up = static_cast<double>(gy[r]);
                    if (up == 0.0) continue;
                    const S* x = lv2.row(r);
                    const double l = (*lse)[static_cast<size_t>(r)];
                    S* gr = gl.data() + r * C;
                    for (int64_t c = 0; c < C; ++c)
                        gr[c] += static_cast<S>(up * std::exp(static_cast<double>(x[c]) - l));
                    gr[(*tgt)[static_cast<size_t>(r)]] -= static_cast<S>(up);
                }
            });
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Fused causal multi-head self-attention over a packed ragged batch.
// q/k/v are (N_tok x d); segs delimits each sequence's token range. Query t
// attends to keys [segment start, t]; softmax runs over exactly that span, so
// positions outside a sequence carry zero weight by construction.
// ---------------------------------------------------------------------------

struct Segments {
    std::vector<int64_t> offsets;  // size rows+1, offsets[0] == 0

    int64_t rows() const { return static_cast<int64_t>(offsets.size()) - 1; }
    int64_t begin(int64_t r) const { return offsets[static_cast<size_t>(r)]; }
    int64_t end(int64_t r) const { return offsets[static_cast<size_t>(r) + 1]; }
    int64_t len(int64_t r) const { return end(r) - begin(r); }
    int64_t total() const { return offsets.back(); }

    static Segments from_lengths(const std::vector<int64_t>& lens) {
        Segments s;
        s.offsets.resize(lens.size() + 1);
        s.offsets[0] = 0;
        for (size_t i = 0; i < lens.size(); ++i) s.offsets[i + 1] = s.offsets[i] + lens[i];
        return s;
    }
};

template <typename S>
Var causal_attention(Graph<S>& g, Var q, Var k, Var v, int num_heads, const Segments& segs) {
    const auto& qv = g.val(q);
    const auto& kv = g.val(k);
    const auto& vv = g.val(v);
    const int64_t N = qv.rows(), d = qv.cols();
    if (kv.rows() != N || vv.rows() != N || kv.cols() != d || vv.cols() != d)
        throw ShapeError("causal_attention: q/k/v shapes differ: " + shape_str(qv.shape) + ", " +
                         shape_str(kv.shape) + ", " + shape_str(vv.shape));
    if (num_heads < 1 || d % num_heads != 0)
        throw ShapeError("causal_attention: head count " + std::to_string(num_heads) +
                         " must divide width " + std::to_string(d));
    if (segs.total() != N)
        throw ShapeError("causal_attention: segment total does not match token count");
    const int64_t H = num_heads, dh = d / H;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // triangular weight storage per segment, per head
    const int64_t B = segs.rows();
    auto tri_base = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(B + 1));
    for (int64_t b = 0; b < B; ++b) {
        const int64_t len = segs.len(b);
        if (len < 1) throw ShapeError("causal_attention: empty segment");
        (*tri_base)[static_cast<size_t>(b + 1)] =
            (*tri_base)[static_cast<size_t>(b)] + len * (len + 1) / 2;
    }
    const int64_t tri_total = (*tri_base)[static_cast<size_t>(B)];
    auto weights = std::make_shared<std::vector<S>>(static_cast<size_t>(H * tri_total));
    auto offsets = std::make_shared<std::vector<int64_t>>(segs.offsets);

    TensorData<S> out(qv.shape);
    parallel_for(B, [&](int64_t b0, int64_t b1) {
        std::vector<double> sc;
        for (int64_t b = b0; b < b1; ++b) {
            const int64_t o = (*offsets)[static_cast<size_t>(b)];
            const int64_t len = (*offsets)[static_cast<size_t>(b + 1)] - o;
            sc.resize(static_cast<size_t>(len));
            for (int64_t h = 0; h < H; ++h) {
                const int64_t hoff = h * dh;
                S* wbase = weights->data() + h * tri_total + (*tri_base)[static_cast<size_t>(b)];
                for (int64_t t = 0; t < len; ++t) {
                    const S* qrow = qv.row(o + t) + hoff;
                    double m = -1e300;
                    for (int64_t s = 0; s <= t; ++s) {
                        const double sv = dot_acc(qrow, kv.row(o + s) + hoff, dh) * att_scale;
                        sc[static_cast<size_t>(s)] = sv;
                        m = std::max(m, sv);
                    }
                    double sum = 0.0;
                    for (int64_t s = 0; s <= t; ++s) {
                        const double e = std::exp(sc[static_cast<size_t>(s)] - m);
                        sc[static_cast<size_t>(s)] = e;
                        sum += e;
                    }
                    const double inv = 1.0 / sum;
                    S* w = wbase + t * (t + 1) / 2;
                    S* orow = out.row(o + t) + hoff;
                    std::vector<double> acc(static_cast<size_t>(dh), 0.0);
                    for (int64_t s = 0; s <= t; ++s) {
                        const double ws = sc[static_cast<size_t>(s)] * inv;
                        w[s] = static_cast<S>(ws);
                        const S* vrow = vv.row(o + s) + hoff;
                        for (int64_t c = 0; c < dh; ++c)
                            acc[static_cast<size_t>(c)] += ws * static_cast<double>(vrow[c]);
                    }
                    for (int64_t c = 0; c < dh; ++c)
                        orow[c] = static_cast<S>(acc[static_cast<size_t>(c)]);
                }
            }
        }
    });

    const Var y = g.emit(std::move(out), g.needs_grad(q) || g.needs_grad(k) || g.needs_grad(v));
    if (g.needs_grad(y)) {
        g.set_backprop(y, [&g, q, k, v, y, offsets, tri_base, weights, H, dh, tri_total,
                           att_scale] {
            const auto& gy = g.grad(y);
            const auto& qv2 = g.val(q);
            const auto& kv2 = g.val(k);
            const auto& vv2 = g.val(v);
            auto& gq = g.grad(q);
            auto& gk = g.grad(k);
            auto& gv = g.grad(v);
            const int64_t d = qv2.cols();
            const int64_t B = static_cast<int64_t>(offsets->size()) - 1;
            parallel_for(B, [&](int64_t b0, int64_t b1) {
                std::vector<double> dw;
                for (int64_t b = b0; b < b1; ++b) {
                    const int64_t o = (*offsets)[static_cast<size_t>(b)];
                    const int64_t len = (*offsets)[static_cast<size_t>(b + 1)] - o;
                    dw.resize(static_cast<size_t>(len));
                    for (int64_t h = 0; h < H; ++h) {
                        const int64_t hoff = h * dh;
                        const S* wbase =
                            weights->data() + h * tri_total + (*tri_base)[static_cast<size_t>(b)];
                        for (int64_t t = 0; t < len; ++t) {
                            const S* go = gy.data() + (o + t) * d + hoff;
                            const S* w = wbase + t * (t + 1) / 2;
                            // dV and dw
                            double wdot = 0.0;
                            for (int64_t s = 0; s <= t; ++s) {
                                const S* vrow = vv2.row(o + s) + hoff;
                                double dws = 0.0;
                                S* gvrow = gv.data() + (o + s) * d + hoff;
                                for (int64_t c = 0; c < dh; ++c) {
                                    dws += static_cast<double>(go[c]) * static_cast<double>(vrow[c]);
                                    gvrow[c] += static_cast<S>(static_cast<double>(w[s]) *
                                                               static_cast<double>(go[c]));
                                }
                                dw[static_cast<size_t>(s)] = dws;
                                wdot += static_cast<double>(w[s]) * dws;
                            }
                            // dscore -> dQ, dK
                            const S* qrow = qv2.row(o + t) + hoff;
                            S* gqrow = gq.data() + (o + t) * d + hoff;
                            for (int64_t s = 0; s <= t; ++s) {
                                const double ds = static_cast<double>(w[s]) *
                                                  (dw[static_cast<size_t>(s)] - wdot) * att_scale;
                                const S* krow = kv2.row(o + s) + hoff;
                                S* gkrow = gk.data() + (o + s) * d + hoff;
                                for (int64_t c = 0; c < dh; ++c) {
                                    gqrow[c] += static_cast<S>(ds * static_cast<double>(krow[c]));
                                    gkrow[c] += static_cast<S>(ds * static_cast<double>(qrow[c]));
                                }
                            }
                        }
                    }
                }
            });
        });
    }
    return y;
}

}  // namespace s4rec
