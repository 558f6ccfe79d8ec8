#pragma once

#include <cstring>
#include <numeric>

#include "nslab/model.hpp"

namespace nslab {

struct LossWeights {
    float lambda1 = 1.0f;   // edge
    float lambda2 = 1.0f;   // parsing (cls + miou)
    float lambda3 = 0.1f;   // consistency

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
            throw std::invalid_argument("loss weights must be nonnegative");
    }
};

struct LossBreakdown {
    double cls = 0, miou = 0, edge = 0, consistency = 0, total = 0;
};

inline Tensor argmax_labels(const Tensor& probs) {
    if (probs.rank() != 4) throw std::invalid_argument("argmax_labels expects [N,K,H,W]");
    int N = probs.dim(0), K = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    Tensor out({N, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int64_t p = 0; p < plane; ++p) {
            int best = 0;
            float bv = probs.v[static_cast<size_t>(n) * K * plane + p];
            for (int k = 1; k < K; ++k) {
                float x = probs.v[(static_cast<size_t>(n) * K + k) * plane + p];
                if (x > bv) {
                    bv = x;
                    best = k;
                }
            }
            out.v[static_cast<size_t>(n) * plane + p] = static_cast<float>(best);
        }
    return out;
}

// Soft-target cross-entropy over logits: -(1/Npix) sum_pixels sum_k t * log softmax(z).
// Reduces to hard cross-entropy when targets are one-hot.
inline Var cross_entropy_soft(Var logits, const Tensor& target_probs) {
    Tape& t = *logits.tape;
    const Tensor& z = t.val(logits);
    if (!z.same_shape(target_probs))
        throw std::invalid_argument("cross_entropy_soft: logits/target shape mismatch");
    int N = z.dim(0), K = z.dim(1), H = z.dim(2), W = z.dim(3);
    int64_t plane = static_cast<int64_t>(H) * W;
    int64_t npix = static_cast<int64_t>(N) * plane;

    auto probs = std::make_shared<Tensor>(Tensor::uninit(z.shape));
    double loss = 0.0;
    // Plane-major passes: every inner loop is contiguous and vectorizable.
    std::vector<float> mx(static_cast<size_t>(plane)), acc(static_cast<size_t>(plane)),
        logz(static_cast<size_t>(plane)), tsum(static_cast<size_t>(plane)), lsum(static_cast<size_t>(plane)),
        tmin(static_cast<size_t>(plane));
    for (int n = 0; n < N; ++n) {
        int64_t base = static_cast<int64_t>(n) * K * plane;
        const float* zn = z.v.data() + base;
        const float* tn = target_probs.v.data() + base;
        float* pn = probs->v.data() + base;
        std::copy(zn, zn + plane, mx.data());
        for (int k = 1; k < K; ++k) {
            const float* zk = zn + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) mx[q] = std::max(mx[q], zk[q]);
        }
        std::fill(acc.begin(), acc.end(), 0.0f);
        for (int k = 0; k < K; ++k) {
            const float* zk = zn + static_cast<int64_t>(k) * plane;
            float* pk = pn + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) {
                float e = detail::fast_expf(zk[q] - mx[q]);
                pk[q] = e;
                acc[q] += e;
            }
        }
        for (int64_t q = 0; q < plane; ++q) {
            logz[q] = detail::fast_logf(acc[q]) + mx[q];
            acc[q] = 1.0f / acc[q];
        }
        std::fill(tsum.begin(), tsum.end(), 0.0f);
        std::fill(lsum.begin(), lsum.end(), 0.0f);
        std::fill(tmin.begin(), tmin.end(), 0.0f);
        for (int k = 0; k < K; ++k) {
            const float* zk = zn + static_cast<int64_t>(k) * plane;
            const float* tk = tn + static_cast<int64_t>(k) * plane;
            float* pk = pn + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) {
                pk[q] *= acc[q];
                tmin[q] = std::min(tmin[q], tk[q]);
                tsum[q] += tk[q];
                lsum[q] += tk[q] * (zk[q] - logz[q]);
            }
        }
        double part = 0.0;
        for (int64_t q = 0; q < plane; ++q) part += lsum[q];
        loss -= part;
        for (int64_t q = 0; q < plane; ++q) {
            if (tmin[q] < -1e-6f) throw std::invalid_argument("cross_entropy_soft: negative target probability");
            if (std::abs(tsum[q] - 1.0f) > 1e-4f)
                throw std::invalid_argument("cross_entropy_soft: target pixel is not a probability simplex");
        }
    }
    loss /= static_cast<double>(npix);

    int self = static_cast<int>(t.size()), iz = logits.id;
    Tensor tgt = target_probs;
    return t.push(Tensor::scalar(static_cast<float>(loss)), [self, iz, probs, tgt, npix](Tape& tp) {
        float g = tp.grad(Var{&tp, self}).v[0];
        Tensor& gz = tp.grad(Var{&tp, iz});
        float scale = g / static_cast<float>(npix);
        for (int64_t i = 0; i < gz.numel(); ++i) gz.v[i] += scale * (probs->v[i] - tgt.v[i]);
    });
}

namespace detail {
struct LovaszResult {
    double loss = 0.0;
    std::shared_ptr<Tensor> dprobs;
};

// Total-order key for floats (handles negatives; -0.0 sorts below +0.0).
inline uint32_t float_order_key(float f) {
    uint32_t b;
    std::memcpy(&b, &f, sizeof b);
    return b ^ (static_cast<uint32_t>(-static_cast<int32_t>(b >> 31)) | 0x80000000u);
}

inline float float_from_order_key(uint32_t u) {
    uint32_t b = (u & 0x80000000u) ? (u & 0x7fffffffu) : ~u;
    float f;
    std::memcpy(&f, &b, sizeof f);
    return f;
}

// LSD radix sort of 64-bit keys in 16-bit passes; sorted data lands back in `a`.
inline void radix_sort64(std::vector<uint64_t>& a, std::vector<uint64_t>& tmp, std::vector<uint32_t>& count,
                         int passes) {
    size_t n = a.size();
    tmp.resize(n);
    count.resize(65536);
    uint64_t* src = a.data();
    uint64_t* dst = tmp.data();
    for (int pass = 0; pass < passes; ++pass) {
        int sh = pass * 16;
        std::fill(count.begin(), count.end(), 0u);
        for (size_t i = 0; i < n; ++i) ++count[(src[i] >> sh) & 0xffff];
        uint32_t run = 0;
        for (uint32_t& c : count) {
            uint32_t t = c;
            c = run;
            run += t;
        }
        for (size_t i = 0; i < n; ++i) dst[count[(src[i] >> sh) & 0xffff]++] = src[i];
        std::swap(src, dst);
    }
    if (src != a.data()) std::copy(src, src + n, a.data());
}

// Core of the Lovasz-softmax surrogate in double precision; shared by the
// differentiable op and by lovasz_miou_value.
inline LovaszResult lovasz_core(const Tensor& p, const Tensor& hard_labels) {
    if (p.rank() != 4) throw std::invalid_argument("lovasz_miou expects probs [N,K,H,W]");
    int N = p.dim(0), K = p.dim(1), H = p.dim(2), W = p.dim(3);
    if (hard_labels.rank() != 3 || hard_labels.dim(0) != N || hard_labels.dim(1) != H || hard_labels.dim(2) != W)
        throw std::invalid_argument("lovasz_miou: labels must be [N,H,W] matching probs");
    int64_t plane = static_cast<int64_t>(H) * W;
    int64_t npix = static_cast<int64_t>(N) * plane;
    if (npix == 0) throw std::invalid_argument("lovasz_miou: empty image");
    if (npix > 0xffffffffLL) throw std::invalid_argument("lovasz_miou: batch too large");

    std::vector<char> present(static_cast<size_t>(K), 0);
    std::vector<int> lab(static_cast<size_t>(npix));
    for (int64_t i = 0; i < npix; ++i) {
        int y = static_cast<int>(hard_labels.v[static_cast<size_t>(i)]);
        if (y < 0 || y >= K) throw std::invalid_argument("lovasz_miou: label out of range");
        lab[static_cast<size_t>(i)] = y;
        present[static_cast<size_t>(y)] = 1;
    }
    int n_present = std::accumulate(present.begin(), present.end(), 0);

    auto dprobs = std::make_shared<Tensor>(p.shape);
    double loss = 0.0;
    // Each pixel's sort key carries its error value, foreground flag and index,
    // so the ranking sweep below never gathers from side arrays. Equal errors
    // keep index order.
    int idx_bits = 1;
    while ((int64_t{1} << idx_bits) < npix) ++idx_bits;
    const uint64_t idx_mask = (uint64_t{1} << idx_bits) - 1;
    const int passes = (33 + idx_bits + 15) / 16;
    std::vector<uint64_t> keys(static_cast<size_t>(npix)), scratch;
    std::vector<uint32_t> count;
    for (int c = 0; c < K; ++c) {
        if (!present[static_cast<size_t>(c)]) continue;
        int64_t fg = 0;
        for (int n = 0; n < N; ++n) {
            const float* pc = p.v.data() + (static_cast<int64_t>(n) * K + c) * plane;
            const int* lb = lab.data() + static_cast<int64_t>(n) * plane;
            uint64_t* kk = keys.data() + static_cast<int64_t>(n) * plane;
            for (int64_t q = 0; q < plane; ++q) {
                bool is_c = lb[q] == c;
                fg += is_c;
                float err = is_c ? 1.0f - pc[q] : pc[q];
                uint64_t i = static_cast<uint64_t>(n) * plane + static_cast<uint64_t>(q);
                kk[q] = (static_cast<uint64_t>(~float_order_key(err)) << (idx_bits + 1)) |
                        (static_cast<uint64_t>(is_c) << idx_bits) | i;
            }
        }
        radix_sort64(keys, scratch, count, passes);
        double inter = static_cast<double>(fg), uni = static_cast<double>(fg);
        double prev_jacc = 0.0;
        for (int64_t r = 0; r < npix; ++r) {
            uint64_t key = keys[static_cast<size_t>(r)];
            int64_t i = static_cast<int64_t>(key & idx_mask);
            bool is_c = (key >> idx_bits) & 1;
            float err = float_from_order_key(~static_cast<uint32_t>(key >> (idx_bits + 1)));
            inter -= is_c ? 1.0 : 0.0;
            uni += is_c ? 0.0 : 1.0;
            double jacc = 1.0 - (uni > 0.0 ? inter / uni : 1.0);
            double g = jacc - prev_jacc;
            prev_jacc = jacc;
            loss += static_cast<double>(err) * g;
            // d m_i / d p_i(c) = -1 on foreground pixels, +1 elsewhere
            int n = static_cast<int>(i / plane);
            dprobs->v[(static_cast<int64_t>(n) * K + c) * plane + (i % plane)] +=
                static_cast<float>((is_c ? -1.0 : 1.0) * g / n_present);
        }
    }
    loss /= static_cast<double>(n_present);
    return LovaszResult{loss, dprobs};
}
}  // namespace detail

// Double-precision loss value (the op's forward before f32 storage).
inline double lovasz_miou_value(const Tensor& probs, const Tensor& hard_labels) {
    return detail::lovasz_core(probs, hard_labels).loss;
}

// Lovasz-softmax mIoU surrogate. For each class present in the hard labels,
// per-pixel errors are sorted descending and weighted by the gradient of the
// Jaccard-loss Lovasz extension; the result is the mean over present classes.
inline Var lovasz_miou(Var probs, const Tensor& hard_labels) {
    Tape& t = *probs.tape;
    detail::LovaszResult res = detail::lovasz_core(t.val(probs), hard_labels);
    auto dprobs = res.dprobs;
    int self = static_cast<int>(t.size()), ip = probs.id;
    return t.push(Tensor::scalar(static_cast<float>(res.loss)), [self, ip, dprobs](Tape& tp) {
        float g = tp.grad(Var{&tp, self}).v[0];
        Tensor& gp = tp.grad(Var{&tp, ip});
        for (int64_t i = 0; i < gp.numel(); ++i) gp.v[i] += g * dprobs->v[i];
    });
}

// Sigmoid cross-entropy with per-batch class balancing: positive pixels are
// weighted by |neg|/|total|, negative by |pos|/|total|. Degenerate all-one or
// all-zero ground truth falls back to unweighted BCE.
inline Var balanced_edge_bce(Var edge_logits, const Tensor& edge_gt) {
    Tape& t = *edge_logits.tape;
    const Tensor& z = t.val(edge_logits);
    if (z.rank() != 4 || z.dim(1) != 1) throw std::invalid_argument("balanced_edge_bce expects [N,1,H,W] logits");
    if (edge_gt.numel() != z.numel()) throw std::invalid_argument("balanced_edge_bce: gt size mismatch");
    int64_t n = z.numel();
    int64_t pos = 0;
    for (int64_t i = 0; i < n; ++i) {
        float y = edge_gt.v[static_cast<size_t>(i)];
        if (y != 0.0f && y != 1.0f) throw std::invalid_argument("balanced_edge_bce: ground truth must be binary");
        pos += (y == 1.0f);
    }
    int64_t neg = n - pos;
    double wpos = 1.0, wneg = 1.0;
    if (pos > 0 && neg > 0) {
        wpos = static_cast<double>(neg) / static_cast<double>(n);
        wneg = static_cast<double>(pos) / static_cast<double>(n);
    }
    auto softplus = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double zz = z.v[static_cast<size_t>(i)];
        if (edge_gt.v[static_cast<size_t>(i)] == 1.0f) loss += wpos * softplus(-zz);
        else loss += wneg * softplus(zz);
    }
    loss /= static_cast<double>(n);

    int self = static_cast<int>(t.size()), iz = edge_logits.id;
    Tensor gt = edge_gt;
    return t.push(Tensor::scalar(static_cast<float>(loss)), [self, iz, gt, wpos, wneg, n](Tape& tp) {
        float g = tp.grad(Var{&tp, self}).v[0];
        const Tensor& z = tp.val(Var{&tp, iz});
        Tensor& gz = tp.grad(Var{&tp, iz});
        for (int64_t i = 0; i < n; ++i) {
            double s = 1.0 / (1.0 + std::exp(-static_cast<double>(z.v[static_cast<size_t>(i)])));
            double d = (gt.v[static_cast<size_t>(i)] == 1.0f) ? wpos * (s - 1.0) : wneg * s;
            gz.v[static_cast<size_t>(i)] += static_cast<float>(g * d / static_cast<double>(n));
        }
    });
}

// Differentiable boundary map from parsing probabilities: at each pixel, the
// maximum over in-bounds 4-neighbors of the total-variation distance
// (1/2) sum_k |p_k(x) - p_k(q)|, clamped to [0,1].
inline Var edge_from_parsing(Var parsing_probs) {
    Tape& t = *parsing_probs.tape;
    const Tensor& p = t.val(parsing_probs);
    if (p.rank() != 4) throw std::invalid_argument("edge_from_parsing expects [N,K,H,W]");
    int N = p.dim(0), K = p.dim(1), H = p.dim(2), W = p.dim(3);
    int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out = Tensor::uninit({N, 1, H, W});
    // Directions are encoded as 0=up, 1=down, 2=left, 3=right; ties pick the
    // first in that order (strict > below).
    auto best_nbr = std::make_shared<std::vector<int8_t>>(static_cast<size_t>(N) * plane, int8_t{-1});
    // Per-pair total-variation maps: tv_d[h*W+w] spans (h,w)-(h+1,w),
    // tv_r[h*(W-1)+w] spans (h,w)-(h,w+1). Channel-major accumulation keeps
    // the inner loops contiguous.
    std::vector<float> tv_d(static_cast<size_t>((H - 1) * W)), tv_r(static_cast<size_t>(H * (W - 1)));
    for (int n = 0; n < N; ++n) {
        std::fill(tv_d.begin(), tv_d.end(), 0.0f);
        std::fill(tv_r.begin(), tv_r.end(), 0.0f);
        for (int k = 0; k < K; ++k) {
            const float* pk = p.v.data() + (static_cast<int64_t>(n) * K + k) * plane;
            for (int64_t q = 0; q < static_cast<int64_t>(H - 1) * W; ++q) tv_d[q] += std::abs(pk[q] - pk[q + W]);
            for (int h = 0; h < H; ++h) {
                const float* row = pk + static_cast<int64_t>(h) * W;
                float* tr = tv_r.data() + static_cast<int64_t>(h) * (W - 1);
                for (int w = 0; w < W - 1; ++w) tr[w] += std::abs(row[w] - row[w + 1]);
            }
        }
        int8_t* dirs = best_nbr->data() + static_cast<int64_t>(n) * plane;
        float* on = out.v.data() + static_cast<int64_t>(n) * plane;
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                float best = 0.0f;
                int8_t bdir = -1;
                float tv;
                if (h > 0 && (tv = 0.5f * tv_d[static_cast<int64_t>(h - 1) * W + w]) > best) best = tv, bdir = 0;
                if (h < H - 1 && (tv = 0.5f * tv_d[static_cast<int64_t>(h) * W + w]) > best) best = tv, bdir = 1;
                if (w > 0 && (tv = 0.5f * tv_r[static_cast<int64_t>(h) * (W - 1) + w - 1]) > best) best = tv, bdir = 2;
                if (w < W - 1 && (tv = 0.5f * tv_r[static_cast<int64_t>(h) * (W - 1) + w]) > best) best = tv, bdir = 3;
                int64_t q = static_cast<int64_t>(h) * W + w;
                dirs[q] = bdir;
                on[q] = std::min(best, 1.0f);
            }
    }

    int self = static_cast<int>(t.size()), ip = parsing_probs.id;
    return t.push(std::move(out), [self, ip, best_nbr, N, K, H, W, plane](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& p = tp.val(Var{&tp, ip});
        const Tensor& e = tp.val(Var{&tp, self});
        Tensor& gp = tp.grad(Var{&tp, ip});
        // A pixel whose max-TV neighbor lies in direction d contributes g to
        // the oriented pair it shares with that neighbor; the per-channel
        // sign pass below then distributes the pair weights contiguously.
        std::vector<float> pair_d(static_cast<size_t>((H - 1) * W)), pair_r(static_cast<size_t>(H * (W - 1)));
        for (int n = 0; n < N; ++n) {
            std::fill(pair_d.begin(), pair_d.end(), 0.0f);
            std::fill(pair_r.begin(), pair_r.end(), 0.0f);
            const float* gn = go.v.data() + static_cast<int64_t>(n) * plane;
            const float* en = e.v.data() + static_cast<int64_t>(n) * plane;
            const int8_t* dirs = best_nbr->data() + static_cast<int64_t>(n) * plane;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    int64_t q = static_cast<int64_t>(h) * W + w;
                    int8_t d = dirs[q];
                    if (d < 0) continue;
                    if (en[q] >= 1.0f) continue;  // clamped: zero subgradient
                    float g = 0.5f * gn[q];
                    if (d == 0) pair_d[q - W] += g;
                    else if (d == 1) pair_d[q] += g;
                    else if (d == 2) pair_r[static_cast<int64_t>(h) * (W - 1) + w - 1] += g;
                    else pair_r[static_cast<int64_t>(h) * (W - 1) + w] += g;
                }
            for (int k = 0; k < K; ++k) {
                const float* pk = p.v.data() + (static_cast<int64_t>(n) * K + k) * plane;
                float* gk = gp.v.data() + (static_cast<int64_t>(n) * K + k) * plane;
                for (int64_t q = 0; q < static_cast<int64_t>(H - 1) * W; ++q) {
                    float diff = pk[q] - pk[q + W];
                    float s = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
                    float gs = pair_d[q] * s;
                    gk[q] += gs;
                    gk[q + W] -= gs;
                }
                for (int h = 0; h < H; ++h) {
                    const float* row = pk + static_cast<int64_t>(h) * W;
                    float* grow = gk + static_cast<int64_t>(h) * W;
                    const float* pr = pair_r.data() + static_cast<int64_t>(h) * (W - 1);
                    for (int w = 0; w < W - 1; ++w) {
                        float diff = row[w] - row[w + 1];
                        float s = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
                        float gs = pr[w] * s;
                        grow[w] += gs;
                        grow[w + 1] -= gs;
                    }
                }
            }
        }
    });
}

// Mean absolute mismatch between the parsing-derived edge map and the edge
// branch's probability, restricted to positive ground-truth edge pixels.
inline Var consistency_loss(Var e_tilde, Var edge_probs, const Tensor& gt_edge) {
    Tape& t = *e_tilde.tape;
    const Tensor& a = t.val(e_tilde);
    const Tensor& b = t.val(edge_probs);
    if (!a.same_shape(b)) throw std::invalid_argument("consistency_loss: shape mismatch");
    if (a.numel() != gt_edge.numel()) throw std::invalid_argument("consistency_loss: gt size mismatch");
    int64_t n = a.numel();
    int64_t npos = 0;
    for (int64_t i = 0; i < n; ++i) npos += (gt_edge.v[static_cast<size_t>(i)] == 1.0f);
    if (npos == 0) return t.leaf(Tensor::scalar(0.0f));
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i)
        if (gt_edge.v[static_cast<size_t>(i)] == 1.0f)
            loss += std::abs(static_cast<double>(a.v[static_cast<size_t>(i)]) - b.v[static_cast<size_t>(i)]);
    loss /= static_cast<double>(npos);

    int self = static_cast<int>(t.size()), ia = e_tilde.id, ib = edge_probs.id;
    Tensor gt = gt_edge;
    return t.push(Tensor::scalar(static_cast<float>(loss)), [self, ia, ib, gt, npos](Tape& tp) {
        float g = tp.grad(Var{&tp, self}).v[0] / static_cast<float>(npos);
        const Tensor& a = tp.val(Var{&tp, ia});
        const Tensor& b = tp.val(Var{&tp, ib});
        Tensor& ga = tp.grad(Var{&tp, ia});
        Tensor& gb = tp.grad(Var{&tp, ib});
        for (int64_t i = 0; i < a.numel(); ++i) {
            if (gt.v[static_cast<size_t>(i)] != 1.0f) continue;
            float diff = a.v[static_cast<size_t>(i)] - b.v[static_cast<size_t>(i)];
            float s = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
            ga.v[static_cast<size_t>(i)] += g * s;
            gb.v[static_cast<size_t>(i)] -= g * s;
        }
    });
}

struct TotalLoss {
    Var total;
    LossBreakdown breakdown;
};

// Weighted objective: lambda1 * edge + lambda2 * (cls + miou) + lambda3 * consistency.
// cls and miou each supervise BOTH the pre-fusion and the fused parsing head.
inline TotalLoss total_loss(const ForwardOutput& out, const Tensor& target_probs, const Tensor& gt_edge,
                            const LossWeights& lw) {
    lw.validate();
    Tape& t = *out.fused_logits.tape;
    Tensor hard = argmax_labels(target_probs);

    Var cls = add(cross_entropy_soft(out.parsing_logits, target_probs),
                  cross_entropy_soft(out.fused_logits, target_probs));
    Var probs_p = softmax_channel(out.parsing_logits);
    Var probs_f = softmax_channel(out.fused_logits);
    Var miou = add(lovasz_miou(probs_p, hard), lovasz_miou(probs_f, hard));
    Var edge = balanced_edge_bce(out.edge_logits, gt_edge);
    Var e_tilde = edge_from_parsing(probs_f);
    Var e_prob = sigmoid(out.edge_logits);
    Var cons = consistency_loss(e_tilde, e_prob, gt_edge);

    Var total = add(add(scale(edge, lw.lambda1), scale(add(cls, miou), lw.lambda2)), scale(cons, lw.lambda3));

    LossBreakdown b;
    b.cls = t.val(cls).v[0];
    b.miou = t.val(miou).v[0];
    b.edge = t.val(edge).v[0];
    b.consistency = t.val(cons).v[0];
    b.total = t.val(total).v[0];
    return TotalLoss{total, b};
}

}  // namespace nslab
