#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "simmc/errors.hpp"
#include "simmc/tensor.hpp"

namespace simmc {

// Named parameters in registration order, plus AdamW state. Registration
// order is the serialization order, so it must be deterministic.
class ParameterSet {
   public:
    struct Entry {
        std::string name;
        TensorPtr param;
        std::vector<double> m;  // first moment
        std::vector<double> v;  // second moment
    };

    TensorPtr add(const std::string& name, TensorPtr p) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        p->requires_grad = true;
        index_[name] = entries_.size();
        entries_.push_back({name, p, std::vector<double>(p->values.size(), 0.0),
                            std::vector<double>(p->values.size(), 0.0)});
        return p;
    }

    // Merge another set under a prefix; moments come along.
    void adopt(const std::string& prefix, ParameterSet& other) {
        for (auto& e : other.entries_) {
            std::string name = prefix + e.name;
            if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
            index_[name] = entries_.size();
            entries_.push_back({name, e.param, e.m, e.v});
        }
    }

    TensorPtr get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second].param;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    int64_t step_count = 0;

    void zero_grad() {
        for (auto& e : entries_) e.param->zero_grad();
    }

    int64_t numel() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.param->numel();
        return n;
    }

   private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 0.0;  // global gradient norm cap; 0 disables
};

// Scales every grad buffer so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm (which callers can also use, with a cap of 0,
// purely to measure gradients). Off by default: the matching losses run at
// norms in the hundreds, and capping them slows the early feature-forming
// phase more than it stabilizes anything.
inline double clip_gradients(ParameterSet& params, double max_norm) {
    if (max_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
    double sq = 0.0;
    for (const auto& e : params.entries())
        for (double g : e.param->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& e : params.entries())
            for (double& g : e.param->grad) g *= s;
    }
    return norm;
}

// One AdamW update over every parameter, from the gradients currently in the
// grad buffers. Decay is decoupled: it scales the pre-step weight and never
// touches the moments. A non-finite gradient aborts by name before any
// weight is modified.
inline void adamw_step(ParameterSet& params, const AdamConfig& cfg) {
    for (const auto& e : params.entries())
        for (double g : e.param->grad)
            if (!std::isfinite(g))
                throw TrainingAbort("non-finite gradient in parameter " + e.name);
    if (cfg.clip_norm > 0.0) clip_gradients(params, cfg.clip_norm);
    params.step_count += 1;
    const double t = static_cast<double>(params.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& e : params.entries()) {
        auto& w = e.param->values;
        const auto& g = e.param->grad;
        for (size_t i = 0; i < w.size(); ++i) {
            e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
            e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = e.m[i] / bc1;
            const double vhat = e.v[i] / bc2;
            w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps) + cfg.lr * cfg.weight_decay * w[i];
        }
    }
}

// Linear warmup from zero to base over [0, warmup), then linear decay back
// to zero at step == total.
inline double warmup_linear_lr(int64_t step, int64_t warmup, int64_t total, double base) {
    if (total <= 0) throw ConfigError("schedule needs total > 0");
    if (warmup < 0 || warmup > total) throw ConfigError("schedule needs 0 <= warmup <= total");
    if (step < 0) throw ConfigError("schedule step must be >= 0");
    if (step >= total) return 0.0;
    if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
    return base * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

}  // namespace simmc
