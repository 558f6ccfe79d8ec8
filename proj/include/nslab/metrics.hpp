#pragma once

#include "nslab/selfcorrect.hpp"

namespace nslab {

struct MetricsReport {
    double pixel_acc = 0.0;
    double mean_acc = 0.0;
    double miou = 0.0;
    std::vector<double> per_class_iou;   // NaN for classes absent from both pred and gt
    std::vector<int64_t> confusion;      // K*K, row = ground truth, col = prediction
    int num_classes = 0;
};

// Confusion-matrix accumulator; metrics are derived once all pixels are in.
class ConfusionAccumulator {
public:
    explicit ConfusionAccumulator(int num_classes)
        : k_(num_classes), counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
        if (num_classes < 2) throw std::invalid_argument("metrics: need at least 2 classes");
    }

    void add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
        if (pred.size() != gt.size()) throw std::invalid_argument("metrics: prediction/ground truth size mismatch");
        for (size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] >= k_ || gt[i] >= k_) throw std::invalid_argument("metrics: label out of range");
            counts_[static_cast<size_t>(gt[i]) * k_ + pred[i]]++;
        }
    }

    MetricsReport report() const {
        MetricsReport r;
        r.num_classes = k_;
        r.confusion = counts_;
        r.per_class_iou.assign(static_cast<size_t>(k_), std::numeric_limits<double>::quiet_NaN());
        int64_t total = 0, correct = 0;
        double iou_sum = 0.0, acc_sum = 0.0;
        int iou_n = 0, acc_n = 0;
        for (int c = 0; c < k_; ++c) {
            int64_t tp = counts_[static_cast<size_t>(c) * k_ + c];
            int64_t gt_c = 0, pred_c = 0;
            for (int j = 0; j < k_; ++j) {
                gt_c += counts_[static_cast<size_t>(c) * k_ + j];
                pred_c += counts_[static_cast<size_t>(j) * k_ + c];
            }
            total += gt_c;
            correct += tp;
            int64_t uni = gt_c + pred_c - tp;
            if (uni > 0) {  // classes absent from both pred and gt are excluded
                r.per_class_iou[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(uni);
                iou_sum += r.per_class_iou[static_cast<size_t>(c)];
                ++iou_n;
            }
            if (gt_c > 0) {
                acc_sum += static_cast<double>(tp) / static_cast<double>(gt_c);
                ++acc_n;
            }
        }
        r.pixel_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
        r.mean_acc = acc_n > 0 ? acc_sum / acc_n : 0.0;
        r.miou = iou_n > 0 ? iou_sum / iou_n : 0.0;
        return r;
    }

private:
    int k_;
    std::vector<int64_t> counts_;
};

inline MetricsReport compute_metrics(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int K) {
    ConfusionAccumulator acc(K);
    acc.add(pred, gt);
    return acc.report();
}

// Argmax predictions of the fused head over a dataset, eval mode.
inline std::vector<std::vector<uint8_t>> predict_masks(ModelWeights& w, const Dataset& ds, int batch_size) {
    std::vector<Tensor> probs = predict_pseudo_masks(w, ds, batch_size);
    std::vector<std::vector<uint8_t>> out;
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    out.reserve(probs.size());
    for (const auto& p : probs) out.push_back(store_argmax(p, p.dim(0), hw));
    return out;
}

inline MetricsReport evaluate_model(ModelWeights& w, const Dataset& ds, int batch_size, bool against_clean = true) {
    ConfusionAccumulator acc(ds.num_classes);
    auto preds = predict_masks(w, ds, batch_size);
    for (size_t i = 0; i < preds.size(); ++i)
        acc.add(preds[i], against_clean ? ds.samples[i].clean_mask : ds.samples[i].noisy_mask);
    return acc.report();
}

struct LabelAudit {
    double corrected_frac = 0.0;  // originally-corrupted pixels whose store argmax now matches the clean label
    double damage_frac = 0.0;     // originally-clean pixels flipped away from the clean label
    int64_t corrupted_pixels = 0;
    int64_t clean_pixels = 0;
};

inline LabelAudit label_noise_audit(const SoftLabelStore& store, const Dataset& ds) {
    if (store.probs.size() != ds.samples.size()) throw std::invalid_argument("audit: store/dataset size mismatch");
    LabelAudit a;
    int64_t corrected = 0, damaged = 0;
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        std::vector<uint8_t> am = store_argmax(store.probs[i], store.num_classes, hw);
        const auto& clean = ds.samples[i].clean_mask;
        const auto& noisy = ds.samples[i].noisy_mask;
        for (int64_t j = 0; j < hw; ++j) {
            if (noisy[static_cast<size_t>(j)] != clean[static_cast<size_t>(j)]) {
                a.corrupted_pixels++;
                corrected += (am[static_cast<size_t>(j)] == clean[static_cast<size_t>(j)]);
            } else {
                a.clean_pixels++;
                damaged += (am[static_cast<size_t>(j)] != clean[static_cast<size_t>(j)]);
            }
        }
    }
    a.corrected_frac = a.corrupted_pixels > 0 ? static_cast<double>(corrected) / a.corrupted_pixels : 0.0;
    a.damage_frac = a.clean_pixels > 0 ? static_cast<double>(damaged) / a.clean_pixels : 0.0;
    return a;
}

}  // namespace nslab
