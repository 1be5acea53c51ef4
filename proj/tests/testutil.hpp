#pragma once

// Shared test-side oracles: central finite differences, converged Sinkhorn
// (iterative proportional fitting), and synthetic data generators. Everything
// here is independent of the implementation paths it checks.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "s4rec/graph.hpp"
#include "s4rec/rng.hpp"
#include "s4rec/tensor.hpp"

namespace s4rec::test {

// Builds a scalar loss from leaf inputs. The builder must be a pure function
// of the inputs (any internal RNG must be re-seeded identically per call).
using BuildFn =
    std::function<Var(Graph<double>&, const std::vector<Var>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "input i, flat j"
};

inline double rel_err(double a, double b) {
    const double denom = std::max({1e-3, std::abs(a), std::abs(b)});
    return std::abs(a - b) / denom;
}

// Central finite differences at h on the 64-bit path vs the tape's analytic
// gradient for every element of every input.
inline GradCheckResult grad_check(std::vector<TensorData<double>> inputs, const BuildFn& build,
                                  double h = 1e-4) {
    Graph<double> g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& in : inputs) vars.push_back(g.leaf(in, true));
    const Var loss = build(g, vars);
    g.backward(loss);

    std::vector<std::vector<double>> analytic;
    for (Var v : vars)
        analytic.push_back(g.grad_live(v) ? g.grad(v)
                                          : std::vector<double>(g.val(v).data.size(), 0.0));

    auto eval = [&](const std::vector<TensorData<double>>& xs) {
        Graph<double> g2;
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(g2.leaf(x, false));
        return g2.val(build(g2, vs)).data[0];
    };

    GradCheckResult res;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (size_t j = 0; j < inputs[i].data.size(); ++j) {
            const double orig = inputs[i].data[j];
            inputs[i].data[j] = orig + h;
            const double lp = eval(inputs);
            inputs[i].data[j] = orig - h;
            const double lm = eval(inputs);
            inputs[i].data[j] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double re = rel_err(analytic[i][j], fd);
            if (re > res.max_rel_err) {
                res.max_rel_err = re;
                res.worst = "input " + std::to_string(i) + ", flat " + std::to_string(j) +
                            ": analytic " + std::to_string(analytic[i][j]) + " vs fd " +
                            std::to_string(fd);
            }
        }
    }
    return res;
}

// Weighted-sum head so every output element of a kernel influences the loss.
template <typename S>
Var weighted_sum(Graph<S>& g, Var y, uint64_t seed = 7) {
    Rng rng(seed);
    TensorData<S> w(g.val(y).shape);
    for (auto& x : w.data) x = static_cast<S>(rng.uniform() * 2.0 - 1.0);
    return reduce_sum(g, mul(g, y, g.leaf(std::move(w), false)));
}

// Converged balanced-transport codes by plain iterative proportional fitting,
// run to tolerance. Written directly from the marginal conditions; used as
// the oracle for the few-iteration training path.
inline TensorData<double> ipf_codes(const TensorData<double>& scores, double eps,
                                    double tol = 1e-9, int max_iters = 10000) {
    const int64_t B = scores.rows(), K = scores.cols();
    TensorData<double> q(scores.shape);
    double m = -1e300;
    for (double v : scores.data) m = std::max(m, v);
    for (int64_t i = 0; i < B * K; ++i) q.data[i] = std::exp((scores.data[i] - m) / eps);
    const double row_target = 1.0;
    const double col_target = static_cast<double>(B) / static_cast<double>(K);
    for (int it = 0; it < max_iters; ++it) {
        for (int64_t k = 0; k < K; ++k) {
            double s = 0.0;
            for (int64_t i = 0; i < B; ++i) s += q.data[i * K + k];
            const double f = col_target / s;
            for (int64_t i = 0; i < B; ++i) q.data[i * K + k] *= f;
        }
        double worst = 0.0;
        for (int64_t i = 0; i < B; ++i) {
            double s = 0.0;
            for (int64_t k = 0; k < K; ++k) s += q.data[i * K + k];
            worst = std::max(worst, std::abs(s - row_target));
            const double f = row_target / s;
            for (int64_t k = 0; k < K; ++k) q.data[i * K + k] *= f;
        }
        if (worst < tol) break;
    }
    return q;
}

// Unit-norm cluster centers with pairwise distance >= min_dist, then points
// center + sigma * gauss, re-normalized. Labels returned for NMI checks.
struct BlobData {
    TensorData<double> points;           // N x d
    std::vector<int> labels;             // N
    TensorData<double> centers;          // K x d
};

inline BlobData make_blobs(int64_t n_per, int k, int64_t d, double sigma, uint64_t seed,
                           double min_dist = 1.0) {
    Rng rng(seed);
    BlobData out;
    out.centers = TensorData<double>({k, d});
    for (int c = 0; c < k; ++c) {
        for (int attempt = 0;; ++attempt) {
            std::vector<double> cand(static_cast<size_t>(d));
            double sq = 0.0;
            for (auto& x : cand) {
                x = rng.gaussian();
                sq += x * x;
            }
            const double inv = 1.0 / std::sqrt(sq);
            for (auto& x : cand) x *= inv;
            bool ok = true;
            for (int p = 0; p < c && ok; ++p) {
                double dist = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double diff = cand[static_cast<size_t>(j)] - out.centers.row(p)[j];
                    dist += diff * diff;
                }
                if (std::sqrt(dist) < min_dist) ok = false;
            }
            if (ok || attempt > 10000) {
                for (int64_t j = 0; j < d; ++j) out.centers.row(c)[j] = cand[static_cast<size_t>(j)];
                break;
            }
        }
    }
    out.points = TensorData<double>({n_per * k, d});
    out.labels.resize(static_cast<size_t>(n_per * k));
    int64_t row = 0;
    for (int c = 0; c < k; ++c) {
        for (int64_t i = 0; i < n_per; ++i, ++row) {
            double sq = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double x = out.centers.row(c)[j] + sigma * rng.gaussian();
                out.points.row(row)[j] = x;
                sq += x * x;
            }
            const double inv = 1.0 / std::sqrt(sq);
            for (int64_t j = 0; j < d; ++j) out.points.row(row)[j] *= inv;
            out.labels[static_cast<size_t>(row)] = c;
        }
    }
    return out;
}

}  // namespace s4rec::test
