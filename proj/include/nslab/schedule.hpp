#pragma once

#include <cmath>
#include <stdexcept>

namespace nslab {

struct ScheduleConfig {
    int init_epochs = 100;
    int cycle_len = 10;      // T
    int num_cycles = 5;      // M
    double eta_max = 7e-3;
    double eta_min = 0.0;
    int warmup_epochs = 10;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    int batch_size = 8;
    int seed = 0;

    void validate() const {
        if (!(eta_max > eta_min) || eta_min < 0) throw std::invalid_argument("schedule: need eta_max > eta_min >= 0");
        if (cycle_len < 1 || num_cycles < 1) throw std::invalid_argument("schedule: need T >= 1 and M >= 1");
        if (init_epochs < 0 || warmup_epochs < 0 || warmup_epochs > init_epochs)
            throw std::invalid_argument("schedule: invalid init/warmup epochs");
        if (batch_size < 1) throw std::invalid_argument("schedule: batch_size must be >= 1");
    }
    int total_epochs() const { return init_epochs + num_cycles * cycle_len; }
};

enum class Phase { init, cycles };

struct CycleState {
    Phase phase = Phase::init;
    int m = 0;             // current cycle index (0 during init)
    int t_cur = 0;         // epochs since last restart (cycles phase)
    int global_epoch = 0;
};

inline double cosine_lr(double eta_max, double eta_min, int t_cur, int period) {
    if (period <= 0) return eta_max;
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(M_PI * static_cast<double>(t_cur) / period));
}

// Learning rate at an epoch: linear warm-up to eta_max, cosine decay over the
// remaining init span, then cosine annealing with a restart at each cycle.
inline double lr_at(const CycleState& st, const ScheduleConfig& cfg) {
    cfg.validate();
    if (st.phase == Phase::init) {
        int e = st.global_epoch;
        if (e < cfg.warmup_epochs) return cfg.eta_max * static_cast<double>(e + 1) / cfg.warmup_epochs;
        return cosine_lr(cfg.eta_max, cfg.eta_min, e - cfg.warmup_epochs, cfg.init_epochs - cfg.warmup_epochs);
    }
    if (st.t_cur < 0 || st.t_cur > cfg.cycle_len) throw std::invalid_argument("lr_at: t_cur out of range");
    return cosine_lr(cfg.eta_max, cfg.eta_min, st.t_cur, cfg.cycle_len);
}

}  // namespace nslab
