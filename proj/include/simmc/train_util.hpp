#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simmc/optim.hpp"
#include "simmc/tensor.hpp"

namespace simmc {

struct LossAcc {
    double loss = 0.0;
    double accuracy = 0.0;
};

// Full optimizer state capture, for last-good-epoch rollback on aborts.
struct ParamSnapshot {
    std::vector<std::vector<double>> values, m, v;
    int64_t step = 0;
};

inline ParamSnapshot snapshot(const ParameterSet& ps) {
    ParamSnapshot s;
    s.step = ps.step_count;
    for (const auto& e : ps.entries()) {
        s.values.push_back(e.param->values);
        s.m.push_back(e.m);
        s.v.push_back(e.v);
    }
    return s;
}

inline void restore(ParameterSet& ps, const ParamSnapshot& s) {
    if (s.values.size() != ps.size()) throw ContractError("snapshot/parameter-set mismatch");
    ps.step_count = s.step;
    for (size_t i = 0; i < ps.size(); ++i) {
        ps.entries()[i].param->values = s.values[i];
        ps.entries()[i].m = s.m[i];
        ps.entries()[i].v = s.v[i];
    }
}

// Line-delimited training log: {"epoch":..,"split":..,"loss":..,"accuracy":..}
class TrainLogger {
   public:
    explicit TrainLogger(const std::string& path) {
        if (!path.empty()) {
            out_.open(path, std::ios::app);
            if (!out_) throw DataError("cannot open training log '" + path + "'");
        }
    }
    void log(int epoch, const std::string& split, double loss, double accuracy) {
        if (!out_.is_open()) return;
        nlohmann::json j{{"epoch", epoch}, {"split", split}, {"loss", loss},
                         {"accuracy", accuracy}};
        out_ << j.dump() << "\n";
        out_.flush();
    }

   private:
    std::ofstream out_;
};

// Knobs shared by every training loop.
struct TrainOptions {
    int epochs = 10;
    double lr = 1e-3;
    int batch = 8;  // gradient-accumulation window
    double warmup_frac = 0.1;
    double weight_decay = 0.01;
    double clip_norm = 0.0;  // global gradient norm cap per step; 0 disables
    uint64_t seed = 7;
    std::string log_path;
};

// One accumulation window: mean-scaled losses from `fwd(index, tape)` over
// the given example indices, then a single AdamW update. Non-finite losses
// abort before the step so weights stay at their last consistent state.
template <typename F>
inline double accumulate_and_step(ParameterSet& ps, const std::vector<int>& window, F&& fwd,
                                  const AdamConfig& adam) {
    ps.zero_grad();
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(window.size());
    for (int idx : window) {
        Tape tape;
        TensorPtr l = fwd(idx, tape);
        if (!std::isfinite(l->values[0]))
            throw TrainingAbort("non-finite loss at example " + std::to_string(idx));
        total += l->values[0];
        backward(tape, scale(l, inv, &tape));
    }
    adamw_step(ps, adam);
    return total * inv;
}

inline int64_t steps_per_epoch(size_t examples, int batch) {
    return static_cast<int64_t>((examples + batch - 1) / batch);
}

// Deep copy for fine-tuning from a pretrained set: fresh tensors, fresh
// moments, so the source model is left untouched.
inline void adopt_copy(ParameterSet& dst, const std::string& prefix, const ParameterSet& src) {
    for (const auto& e : src.entries()) dst.add(prefix + e.name, tensor(e.param->shape, e.param->values));
}

}  // namespace simmc
