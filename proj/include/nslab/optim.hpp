#pragma once

#include "nslab/model.hpp"

namespace nslab {

// Momentum SGD with weight decay on conv/linear weights only (BN scale/shift
// and biases are not decayed). BN running statistics are never touched here.
class SgdOptimizer {
public:
    SgdOptimizer(float momentum, float weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(ModelWeights& w, const TensorMap& grads, double lr) {
        for (auto& [name, param] : w.t) {
            if (is_bn_running_stat(name)) continue;
            auto git = grads.find(name);
            if (git == grads.end()) throw std::runtime_error("sgd_step: missing gradient for '" + name + "'");
            const Tensor& g = git->second;
            if (!g.same_shape(param)) throw std::runtime_error("sgd_step: gradient shape mismatch for '" + name + "'");
            Tensor& vel = velocity_.try_emplace(name, Tensor(param.shape)).first->second;
            float wd = is_weight_decayed(name) ? weight_decay_ : 0.0f;
            for (int64_t i = 0; i < param.numel(); ++i) {
                float gi = g.v[static_cast<size_t>(i)];
                if (!std::isfinite(gi))
                    throw std::runtime_error("sgd_step: non-finite gradient in '" + name + "' at index " +
                                             std::to_string(i));
                gi += wd * param.v[static_cast<size_t>(i)];
                float v = momentum_ * vel.v[static_cast<size_t>(i)] + gi;
                vel.v[static_cast<size_t>(i)] = v;
                param.v[static_cast<size_t>(i)] -= static_cast<float>(lr) * v;
            }
        }
    }

    void reset() { velocity_.clear(); }

private:
    float momentum_, weight_decay_;
    TensorMap velocity_;
};

}  // namespace nslab
