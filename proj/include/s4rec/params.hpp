#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "s4rec/common.hpp"
#include "s4rec/graph.hpp"
#include "s4rec/tensor.hpp"

namespace s4rec {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named trainable tensors plus their Adam moment state. std::map keeps
// iteration order deterministic for checkpoints and gradient maps.
template <typename S>
class ParamStore {
public:
    struct Entry {
        TensorData<S> value;
        std::vector<S> m;
        std::vector<S> v;
    };

    TensorData<S>& create(const std::string& name, TensorData<S> init) {
        if (entries_.count(name))
            throw ConfigError("parameter already registered: " + name);
        Entry e;
        e.m.assign(init.data.size(), S{0});
        e.v.assign(init.data.size(), S{0});
        e.value = std::move(init);
        auto [it, ok] = entries_.emplace(name, std::move(e));
        (void)ok;
        return it->second.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    TensorData<S>& value(const std::string& name) { return at(name).value; }
    const TensorData<S>& value(const std::string& name) const { return at(name).value; }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t t) { step_count_ = t; }

    // Bias-corrected Adam over a gradient map. Parameters missing from the
    // map are left untouched (their gradient this step was zero everywhere
    // and skipping the moment decay would change nothing the caller relies
    // on; the trainer always supplies a full map).
    void adam_step(const std::map<std::string, std::vector<S>>& grads, const AdamConfig& cfg) {
        ++step_count_;
        const double t = static_cast<double>(step_count_);
        const double bc1 = 1.0 - std::pow(cfg.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (auto& [name, entry] : entries_) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const auto& grad = git->second;
            if (grad.size() != entry.value.data.size())
                throw ShapeError("adam_step: gradient size mismatch for " + name);
            for (size_t i = 0; i < grad.size(); ++i) {
                const double gi = static_cast<double>(grad[i]);
                if (!std::isfinite(gi))
                    throw NumericError("non-finite gradient for parameter " + name);
                const double m = cfg.beta1 * static_cast<double>(entry.m[i]) + (1.0 - cfg.beta1) * gi;
                const double v =
                    cfg.beta2 * static_cast<double>(entry.v[i]) + (1.0 - cfg.beta2) * gi * gi;
                entry.m[i] = static_cast<S>(m);
                entry.v[i] = static_cast<S>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                entry.value.data[i] = static_cast<S>(static_cast<double>(entry.value.data[i]) -
                                                     cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
            }
        }
    }

private:
    std::map<std::string, Entry> entries_;
    int64_t step_count_ = 0;
};

// Binds parameters from a store into one Graph as gradient-tracked leaves and
// harvests their gradients after backward. One binding per graph.
template <typename S>
class ParamBinding {
public:
    ParamBinding(Graph<S>& g, ParamStore<S>& store) : g_(&g), store_(&store) {}

    Var operator()(const std::string& name) {
        for (const auto& [n, v] : bound_)
            if (n == name) return v;
        Var v = g_->leaf(store_->value(name), true);
        bound_.emplace_back(name, v);
        return v;
    }

    // Gradient map over every bound parameter; parameters the loss never
    // reached get explicit zeros.
    std::map<std::string, std::vector<S>> collect_grads() {
        std::map<std::string, std::vector<S>> out;
        for (const auto& [name, var] : bound_) {
            if (g_->grad_live(var)) {
                out[name] = g_->grad(var);
            } else {
                out[name] = std::vector<S>(g_->val(var).data.size(), S{0});
            }
        }
        return out;
    }

    const std::vector<std::pair<std::string, Var>>& bound() const { return bound_; }

private:
    Graph<S>* g_;
    ParamStore<S>* store_;
    std::vector<std::pair<std::string, Var>> bound_;
};

}  // namespace s4rec
