#pragma once

#include <filesystem>
#include <functional>

#include "nslab/losses.hpp"
#include "nslab/optim.hpp"
#include "nslab/schedule.hpp"
#include "nslab/synth.hpp"

namespace nslab {

// Per-sample soft pseudo-labels plus the binary edge supervision derived
// from their argmax. Starts as the one-hot encoding of the noisy masks.
struct SoftLabelStore {
    int num_classes = 0, h = 0, w = 0;
    std::vector<Tensor> probs;          // per sample [K,H,W]
    std::vector<Tensor> edge;           // per sample [H,W], 0/1
};

inline SoftLabelStore init_label_store(const Dataset& ds) {
    SoftLabelStore st;
    st.num_classes = ds.num_classes;
    st.h = ds.h;
    st.w = ds.w;
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    for (const auto& s : ds.samples) {
        Tensor p({ds.num_classes, ds.h, ds.w});
        for (int64_t i = 0; i < hw; ++i) p.v[static_cast<size_t>(s.noisy_mask[static_cast<size_t>(i)]) * hw + i] = 1.0f;
        st.probs.push_back(std::move(p));
        Tensor e({ds.h, ds.w});
        for (int64_t i = 0; i < hw; ++i) e.v[static_cast<size_t>(i)] = s.edge_gt[static_cast<size_t>(i)];
        st.edge.push_back(std::move(e));
    }
    return st;
}

inline void check_store_simplex(const SoftLabelStore& st, double tol) {
    int64_t hw = static_cast<int64_t>(st.h) * st.w;
    for (const auto& p : st.probs)
        for (int64_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (int k = 0; k < st.num_classes; ++k) {
                float x = p.v[static_cast<size_t>(k) * hw + i];
                if (x < -tol) throw std::runtime_error("label store: negative probability");
                s += x;
            }
            if (std::abs(s - 1.0) > tol) throw std::runtime_error("label store: pixel is not a simplex");
        }
}

inline std::vector<uint8_t> store_argmax(const Tensor& probs, int K, int64_t hw) {
    std::vector<uint8_t> m(static_cast<size_t>(hw));
    for (int64_t i = 0; i < hw; ++i) {
        int best = 0;
        float bv = probs.v[static_cast<size_t>(i)];
        for (int k = 1; k < K; ++k)
            if (probs.v[static_cast<size_t>(k) * hw + i] > bv) {
                bv = probs.v[static_cast<size_t>(k) * hw + i];
                best = k;
            }
        m[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return m;
}

inline void save_label_store(const std::string& path, const SoftLabelStore& st) {
    TensorMap t;
    char buf[32];
    for (size_t i = 0; i < st.probs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "sample_%06zu", i);
        t.emplace(buf, st.probs[i]);
        std::snprintf(buf, sizeof buf, "edge_%06zu", i);
        t.emplace(buf, st.edge[i]);
    }
    save_tensors(path, t);
}

inline SoftLabelStore load_label_store(const std::string& path) {
    TensorMap t = load_tensors(path);
    SoftLabelStore st;
    char buf[32];
    for (size_t i = 0;; ++i) {
        std::snprintf(buf, sizeof buf, "sample_%06zu", i);
        auto it = t.find(buf);
        if (it == t.end()) break;
        st.probs.push_back(it->second);
        std::snprintf(buf, sizeof buf, "edge_%06zu", i);
        st.edge.push_back(t.at(buf));
    }
    if (st.probs.empty()) throw std::runtime_error("label store: no samples in " + path);
    st.num_classes = st.probs[0].dim(0);
    st.h = st.probs[0].dim(1);
    st.w = st.probs[0].dim(2);
    return st;
}

// Cycle-end model aggregation: convex running mean over every tensor,
// out = m/(m+1) * prev + 1/(m+1) * current. Unrolled from m = 1 this is the
// plain arithmetic mean of all inputs.
inline ModelWeights aggregate_weights(const ModelWeights& prev, const ModelWeights& current, int m) {
    if (m < 1) throw std::invalid_argument("aggregate_weights: m must be >= 1");
    if (prev.t.size() != current.t.size()) throw std::runtime_error("aggregate_weights: name set mismatch");
    ModelWeights out;
    out.cfg = current.cfg;
    double a = static_cast<double>(m) / (m + 1.0), b = 1.0 / (m + 1.0);
    for (const auto& [name, cur] : current.t) {
        auto pit = prev.t.find(name);
        if (pit == prev.t.end()) throw std::runtime_error("aggregate_weights: name set mismatch at '" + name + "'");
        // BN running stats are folded like everything else; re-estimation
        // replaces them before the aggregate is ever used for inference.
        const Tensor& pv = pit->second;
        if (!pv.same_shape(cur)) throw std::runtime_error("aggregate_weights: shape mismatch at '" + name + "'");
        Tensor t(cur.shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            t.v[static_cast<size_t>(i)] =
                static_cast<float>(a * static_cast<double>(pv.v[static_cast<size_t>(i)]) +
                                   b * static_cast<double>(cur.v[static_cast<size_t>(i)]));
        out.t.emplace(name, std::move(t));
    }
    return out;
}

namespace detail {
inline Tensor stack_images(const Dataset& ds, const std::vector<int>& idx, size_t lo, size_t hi) {
    int B = static_cast<int>(hi - lo);
    Tensor out = Tensor::uninit({B, 3, ds.h, ds.w});
    int64_t per = static_cast<int64_t>(3) * ds.h * ds.w;
    for (size_t b = lo; b < hi; ++b)
        std::copy(ds.samples[static_cast<size_t>(idx[b])].image.v.begin(),
                  ds.samples[static_cast<size_t>(idx[b])].image.v.end(),
                  out.v.begin() + static_cast<int64_t>(b - lo) * per);
    return out;
}
}  // namespace detail

// Reset BN running statistics and re-estimate them from one full pass over
// the training images (no gradients, no parameter update). Running mean/var
// become the exact per-channel moments of the pre-BN activations seen during
// the pass.
inline void reestimate_bn(ModelWeights& w, const Dataset& ds, int batch_size) {
    if (ds.samples.empty()) throw std::invalid_argument("reestimate_bn: empty dataset");
    std::map<std::string, BnAccum> accums;
    std::vector<int> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(batch_size)) {
        size_t hi = std::min(idx.size(), lo + static_cast<size_t>(batch_size));
        Tape tape;
        ModelRunner runner(tape, w, BnMode::reestimate, &accums);
        runner.forward(detail::stack_images(ds, idx, lo, hi));
    }
    for (auto& [layer, acc] : accums) {
        Tensor& rm = w.t.at(layer + ".bn.running_mean");
        Tensor& rv = w.t.at(layer + ".bn.running_var");
        for (int64_t c = 0; c < rm.numel(); ++c) {
            double mu = acc.sum[static_cast<size_t>(c)] / acc.count;
            double var = std::max(0.0, acc.sumsq[static_cast<size_t>(c)] / acc.count - mu * mu);
            rm.v[static_cast<size_t>(c)] = static_cast<float>(mu);
            rv.v[static_cast<size_t>(c)] = static_cast<float>(var);
        }
    }
}

// Eval-mode pseudo-masks (softmax of fused logits) for every training sample.
inline std::vector<Tensor> predict_pseudo_masks(ModelWeights& w, const Dataset& ds, int batch_size) {
    std::vector<Tensor> preds;
    preds.reserve(ds.samples.size());
    std::vector<int> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(batch_size)) {
        size_t hi = std::min(idx.size(), lo + static_cast<size_t>(batch_size));
        Tape tape;
        ModelRunner runner(tape, w, BnMode::eval);
        ForwardOutput out = runner.forward(detail::stack_images(ds, idx, lo, hi));
        const Tensor& p = tape.val(softmax_channel(out.fused_logits));
        int K = p.dim(1);
        for (size_t b = lo; b < hi; ++b) {
            Tensor one({K, ds.h, ds.w});
            std::copy(p.v.begin() + static_cast<int64_t>(b - lo) * K * hw,
                      p.v.begin() + static_cast<int64_t>(b - lo + 1) * K * hw, one.v.begin());
            preds.push_back(std::move(one));
        }
    }
    return preds;
}

// Online label refinement: per-pixel convex combination of the previous store
// with fresh pseudo-masks, y_m = m/(m+1) * y_{m-1} + 1/(m+1) * y. Edge ground
// truth is recomputed from the argmax of the refined store.
inline void refine_labels(SoftLabelStore& st, const std::vector<Tensor>& preds, int m) {
    if (m < 1) throw std::invalid_argument("refine_labels: m must be >= 1");
    if (preds.size() != st.probs.size()) throw std::invalid_argument("refine_labels: prediction count mismatch");
    double a = static_cast<double>(m) / (m + 1.0), b = 1.0 / (m + 1.0);
    int64_t hw = static_cast<int64_t>(st.h) * st.w;
    for (size_t i = 0; i < st.probs.size(); ++i) {
        Tensor& p = st.probs[i];
        const Tensor& q = preds[i];
        if (!p.same_shape(q)) throw std::invalid_argument("refine_labels: prediction shape mismatch");
        for (int64_t j = 0; j < p.numel(); ++j)
            p.v[static_cast<size_t>(j)] = static_cast<float>(a * static_cast<double>(p.v[static_cast<size_t>(j)]) +
                                                             b * static_cast<double>(q.v[static_cast<size_t>(j)]));
        std::vector<uint8_t> am = store_argmax(p, st.num_classes, hw);
        std::vector<uint8_t> eg = edge_gt_from_mask(am, st.h, st.w);
        for (int64_t j = 0; j < hw; ++j) st.edge[i].v[static_cast<size_t>(j)] = eg[static_cast<size_t>(j)];
    }
    check_store_simplex(st, 1e-4);
}

struct SchpOptions {
    bool model_aggregation = true;
    bool label_refinement = true;
    LossWeights loss_weights;
    std::string out_dir;  // checkpoints/label stores written here when non-empty
};

struct EpochLog {
    std::string phase;  // "init" or "cycle"
    int cycle = 0;
    int epoch = 0;       // global epoch index
    double lr = 0.0;
    LossBreakdown mean_loss;
};

struct RunLog {
    std::vector<std::string> events;  // "train", "aggregate", "bn-reestimate", "predict", "refine"
    std::vector<EpochLog> epochs;
};

struct RunHooks {
    // called after init and after each cycle with the weights used for evaluation
    std::function<void(int cycle, ModelWeights& eval_weights, const SoftLabelStore& store)> on_eval;
    // raw per-cycle pseudo-mask predictions, before blending into the store
    std::function<void(int cycle, const std::vector<Tensor>& preds)> on_predictions;
};

struct SchpResult {
    ModelWeights final_weights;  // aggregated weights when MA is on, raw otherwise
    SoftLabelStore store;
    RunLog log;
};

namespace detail {

inline LossBreakdown train_one_epoch(ModelWeights& w, SgdOptimizer& opt, const Dataset& ds,
                                     const SoftLabelStore& store, const LossWeights& lw, double lr, int batch_size,
                                     Rng& order_rng) {
    std::vector<int> idx(ds.samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[static_cast<size_t>(order_rng.uniform_int(static_cast<int>(i)))]);

    int K = store.num_classes;
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    LossBreakdown mean;
    int n_batches = 0;
    for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(batch_size)) {
        size_t hi = std::min(idx.size(), lo + static_cast<size_t>(batch_size));
        int B = static_cast<int>(hi - lo);
        Tensor target = Tensor::uninit({B, K, ds.h, ds.w});
        Tensor gt_edge = Tensor::uninit({B, ds.h, ds.w});
        for (size_t b = lo; b < hi; ++b) {
            int si = idx[b];
            std::copy(store.probs[static_cast<size_t>(si)].v.begin(), store.probs[static_cast<size_t>(si)].v.end(),
                      target.v.begin() + static_cast<int64_t>(b - lo) * K * hw);
            std::copy(store.edge[static_cast<size_t>(si)].v.begin(), store.edge[static_cast<size_t>(si)].v.end(),
                      gt_edge.v.begin() + static_cast<int64_t>(b - lo) * hw);
        }
        Tape tape;
        ModelRunner runner(tape, w, BnMode::train);
        ForwardOutput out = runner.forward(stack_images(ds, idx, lo, hi));
        TotalLoss loss = total_loss(out, target, gt_edge, lw);
        tape.backward(loss.total);
        TensorMap grads;
        for (const auto& [name, var] : runner.params()) grads.emplace(name, std::move(tape.grad(var)));
        opt.step(w, grads, lr);
        mean.cls += loss.breakdown.cls;
        mean.miou += loss.breakdown.miou;
        mean.edge += loss.breakdown.edge;
        mean.consistency += loss.breakdown.consistency;
        mean.total += loss.breakdown.total;
        ++n_batches;
    }
    mean.cls /= n_batches;
    mean.miou /= n_batches;
    mean.edge /= n_batches;
    mean.consistency /= n_batches;
    mean.total /= n_batches;
    return mean;
}

}  // namespace detail

// Algorithm driver: init_epochs of standard training on the one-hot noisy
// labels, then num_cycles cycles of {T epochs of cosine-annealed training on
// the current label store -> model aggregation -> BN re-estimation ->
// pseudo-mask regeneration -> label refinement}. Training always continues on
// the raw weights; the aggregate is the evaluation/pseudo-mask model.
inline SchpResult run_schp(const ScheduleConfig& cfg, const ModelConfig& model_cfg, const Dataset& train,
                           const SchpOptions& opt, const RunHooks* hooks = nullptr) {
    cfg.validate();
    model_cfg.validate();
    opt.loss_weights.validate();
    if (train.samples.empty()) throw std::invalid_argument("run_schp: empty dataset");

    namespace fs = std::filesystem;
    auto ckpt_path = [&](const std::string& name) { return (fs::path(opt.out_dir) / name).string(); };
    bool persist = !opt.out_dir.empty();
    if (persist) fs::create_directories(opt.out_dir);

    ModelWeights w_train = build_model(model_cfg, cfg.seed);
    SoftLabelStore store = init_label_store(train);
    SgdOptimizer sgd(cfg.momentum, cfg.weight_decay);
    Rng order_rng(static_cast<uint64_t>(cfg.seed) * 0x51ed2701u + 17u);
    RunLog log;
    CycleState st;

    auto run_epoch = [&](const char* phase, int cycle) {
        double lr = lr_at(st, cfg);
        LossBreakdown mean;
        try {
            mean = detail::train_one_epoch(w_train, sgd, train, store, opt.loss_weights, lr, cfg.batch_size, order_rng);
        } catch (const std::exception& e) {
            throw std::runtime_error("run_schp: failure at phase=" + std::string(phase) + " cycle=" +
                                     std::to_string(cycle) + " epoch=" + std::to_string(st.global_epoch) + ": " + e.what());
        }
        log.events.emplace_back("train");
        log.epochs.push_back(EpochLog{phase, cycle, st.global_epoch, lr, mean});
        st.global_epoch++;
    };

    for (int e = 0; e < cfg.init_epochs; ++e) run_epoch("init", 0);
    if (persist) save_tensors(ckpt_path("ckpt_init.nslb"), w_train.t);
    ModelWeights w_agg = w_train;  // w_hat_0
    if (hooks && hooks->on_eval) hooks->on_eval(0, w_train, store);

    st.phase = Phase::cycles;
    for (int m = 1; m <= cfg.num_cycles; ++m) {
        st.m = m;
        for (st.t_cur = 0; st.t_cur < cfg.cycle_len; ++st.t_cur) run_epoch("cycle", m);
        if (persist) save_tensors(ckpt_path("ckpt_cycle_" + std::to_string(m) + "_raw.nslb"), w_train.t);

        ModelWeights* eval_w = &w_train;
        ModelWeights w_eval;
        if (opt.model_aggregation) {
            // w_agg stays the pure running mean; BN stats are re-estimated on
            // a copy so the fold is never contaminated by batch statistics.
            w_agg = aggregate_weights(w_agg, w_train, m);
            log.events.emplace_back("aggregate");
            if (persist) save_tensors(ckpt_path("ckpt_cycle_" + std::to_string(m) + "_agg.nslb"), w_agg.t);
            w_eval = w_agg;
            reestimate_bn(w_eval, train, cfg.batch_size);
            log.events.emplace_back("bn-reestimate");
            eval_w = &w_eval;
        }
        if (opt.label_refinement) {
            std::vector<Tensor> preds = predict_pseudo_masks(*eval_w, train, cfg.batch_size);
            log.events.emplace_back("predict");
            if (hooks && hooks->on_predictions) hooks->on_predictions(m, preds);
            refine_labels(store, preds, m);
            log.events.emplace_back("refine");
            if (persist) save_label_store(ckpt_path("labels_cycle_" + std::to_string(m) + ".nslb"), store);
        }
        if (hooks && hooks->on_eval) hooks->on_eval(m, *eval_w, store);
    }

    SchpResult res;
    if (opt.model_aggregation) {
        reestimate_bn(w_agg, train, cfg.batch_size);  // same stats the last cycle's eval copy had
        res.final_weights = std::move(w_agg);
    } else {
        res.final_weights = std::move(w_train);
    }
    res.store = std::move(store);
    res.log = std::move(log);
    if (persist) {
        save_tensors(ckpt_path("ckpt_final.nslb"), res.final_weights.t);
        save_model_config(ckpt_path("model.cfg"), model_cfg);
    }
    return res;
}

}  // namespace nslab
