#pragma once

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>

#include "nslab/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace nslab {

namespace detail {
inline void blas_init() {
    // Pin BLAS to one thread; all per-run arithmetic stays deterministic.
    static bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

// Branch-free polynomial expf (Cephes-style range reduction, relative error
// ~2e-7); inlines and auto-vectorizes where libm's expf cannot.
inline float fast_expf(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    float n = std::floor(x * 1.44269504088896341f + 0.5f);
    float r = x - n * 0.693359375f - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    uint32_t bits = static_cast<uint32_t>(static_cast<int32_t>(n) + 127) << 23;
    float s;
    std::memcpy(&s, &bits, sizeof s);
    return p * s;
}

// Lane-wise float reductions that auto-vectorize; lanes are combined in
// double so long sums keep sub-1e-5 relative accuracy.
inline double vsum(const float* a, int64_t n) {
    float lane[8] = {0};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lane[l] += a[i + l];
    double s = 0.0;
    for (int l = 0; l < 8; ++l) s += lane[l];
    for (; i < n; ++i) s += a[i];
    return s;
}

inline double vdot(const float* a, const float* b, int64_t n) {
    float lane[8] = {0};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
    double s = 0.0;
    for (int l = 0; l < 8; ++l) s += lane[l];
    for (; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

// Companion logf for positive finite inputs, same precision class.
inline float fast_logf(float x) {
    uint32_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    int32_t e = static_cast<int32_t>(bits >> 23) - 126;
    bits = (bits & 0x007fffffu) | 0x3f000000u;  // mantissa in [0.5, 1)
    float m;
    std::memcpy(&m, &bits, sizeof m);
    // fold into [sqrt(0.5), sqrt(2)) so the polynomial stays accurate
    if (m < 0.707106781186547524f) {
        m += m;
        e -= 1;
    }
    float f = m - 1.0f;
    float p = 7.0376836292e-2f;
    p = p * f + -1.1514610310e-1f;
    p = p * f + 1.1676998740e-1f;
    p = p * f + -1.2420140846e-1f;
    p = p * f + 1.4249322787e-1f;
    p = p * f + -1.6668057665e-1f;
    p = p * f + 2.0000714765e-1f;
    p = p * f + -2.4999993993e-1f;
    p = p * f + 3.3333331174e-1f;
    float f2 = f * f;
    float r = p * f2 * f - 0.5f * f2 + f;
    return r + static_cast<float>(e) * 0.693147180559945f;
}
}  // namespace detail

class Tape;

// Handle to a tensor recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Record of executed differentiable operations. Nodes are appended in
// execution order, so the record is already topologically sorted and the
// backward pass is a single reverse sweep.
class Tape {
public:
    Var leaf(Tensor t) { return push(std::move(t), nullptr); }

    Var push(Tensor value, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(back)});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& val(Var v) const { return node(v).value; }

    Tensor& grad(Var v) {
        Node& n = node(v);
        if (n.grad.v.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    void backward(Var loss) {
        if (!loss.valid() || loss.tape != this)
            throw std::runtime_error("backward: loss is not a node of this tape");
        if (nodes_.empty()) throw std::runtime_error("backward called before any forward op");
        if (val(loss).numel() != 1) throw std::runtime_error("backward: loss must be scalar");
        grad(loss).v[0] = 1.0f;
        for (int i = loss.id; i >= 0; --i)
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this);
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back;
    };

    Node& node(Var v) {
        if (!v.valid() || v.tape != this) throw std::runtime_error("var does not belong to this tape");
        return nodes_.at(static_cast<size_t>(v.id));
    }
    const Node& node(Var v) const {
        if (!v.valid() || v.tape != this) throw std::runtime_error("var does not belong to this tape");
        return nodes_.at(static_cast<size_t>(v.id));
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    const Tensor& y = t.val(b);
    if (!x.same_shape(y)) throw std::invalid_argument("add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += y.v[i];
    int self = static_cast<int>(t.size()), ia = a.id, ib = b.id;
    return t.push(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        Tensor& gb = tp.grad(Var{&tp, ib});
        for (int64_t i = 0; i < go.numel(); ++i) {
            ga.v[i] += go.v[i];
            gb.v[i] += go.v[i];
        }
    });
}

inline Var scale(Var a, float c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x *= c;
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia, c](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += c * go.v[i];
    });
}

inline Var elem_mul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    const Tensor& y = t.val(b);
    if (!x.same_shape(y)) throw std::invalid_argument("elem_mul: shape mismatch");
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] *= y.v[i];
    int self = static_cast<int>(t.size()), ia = a.id, ib = b.id;
    return t.push(std::move(out), [self, ia, ib](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor xa = tp.val(Var{&tp, ia});
        const Tensor xb = tp.val(Var{&tp, ib});
        Tensor& ga = tp.grad(Var{&tp, ia});
        Tensor& gb = tp.grad(Var{&tp, ib});
        for (int64_t i = 0; i < go.numel(); ++i) {
            ga.v[i] += go.v[i] * xb.v[i];
            gb.v[i] += go.v[i] * xa.v[i];
        }
    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    double acc = 0.0;
    for (float e : x.v) acc += e;
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(Tensor::scalar(static_cast<float>(acc)), [self, ia](Tape& tp) {
        float g = tp.grad(Var{&tp, self}).v[0];
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (auto& e : ga.v) e += g;
    });
}

inline Var relu(Var a) {
    // Subgradient at 0 is taken as 0; grad checks must avoid the kink.
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x = x > 0.0f ? x : 0.0f;
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& x = tp.val(Var{&tp, ia});
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += x.v[i] > 0.0f ? go.v[i] : 0.0f;
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x = 1.0f / (1.0f + detail::fast_expf(-x));
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& s = tp.val(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (int64_t i = 0; i < go.numel(); ++i) ga.v[i] += go.v[i] * s.v[i] * (1.0f - s.v[i]);
    });
}

// Softmax over the channel axis of [N,K,H,W].
inline Var softmax_channel(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (x.rank() != 4) throw std::invalid_argument("softmax_channel expects [N,K,H,W]");
    int N = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out = Tensor::uninit(x.shape);
    int64_t plane = static_cast<int64_t>(H) * W;
    // Plane-major passes keep every inner loop contiguous and vectorizable.
    std::vector<float> mx(static_cast<size_t>(plane)), acc(static_cast<size_t>(plane));
    for (int n = 0; n < N; ++n) {
        const float* xn = x.v.data() + static_cast<int64_t>(n) * K * plane;
        float* on = out.v.data() + static_cast<int64_t>(n) * K * plane;
        std::copy(xn, xn + plane, mx.data());
        for (int k = 1; k < K; ++k) {
            const float* xk = xn + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) mx[q] = std::max(mx[q], xk[q]);
        }
        std::fill(acc.begin(), acc.end(), 0.0f);
        for (int k = 0; k < K; ++k) {
            const float* xk = xn + static_cast<int64_t>(k) * plane;
            float* ok = on + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) {
                float e = detail::fast_expf(xk[q] - mx[q]);
                ok[q] = e;
                acc[q] += e;
            }
        }
        for (int64_t q = 0; q < plane; ++q) acc[q] = 1.0f / acc[q];
        for (int k = 0; k < K; ++k) {
            float* ok = on + static_cast<int64_t>(k) * plane;
            for (int64_t q = 0; q < plane; ++q) ok[q] *= acc[q];
        }
    }
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia, N, K, plane](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& p = tp.val(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        std::vector<float> dot(static_cast<size_t>(plane));
        for (int n = 0; n < N; ++n) {
            int64_t base = static_cast<int64_t>(n) * K * plane;
            std::fill(dot.begin(), dot.end(), 0.0f);
            for (int k = 0; k < K; ++k) {
                const float* gk = go.v.data() + base + static_cast<int64_t>(k) * plane;
                const float* pk = p.v.data() + base + static_cast<int64_t>(k) * plane;
                for (int64_t q = 0; q < plane; ++q) dot[q] += gk[q] * pk[q];
            }
            for (int k = 0; k < K; ++k) {
                const float* gk = go.v.data() + base + static_cast<int64_t>(k) * plane;
                const float* pk = p.v.data() + base + static_cast<int64_t>(k) * plane;
                float* ak = ga.v.data() + base + static_cast<int64_t>(k) * plane;
                for (int64_t q = 0; q < plane; ++q) ak[q] += pk[q] * (gk[q] - dot[q]);
            }
        }
    });
}

// Adaptive average pooling of [N,C,H,W] to a gh x gw grid.
inline Var avg_pool(Var a, int gh, int gw) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (x.rank() != 4) throw std::invalid_argument("avg_pool expects [N,C,H,W]");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gh <= 0 || gw <= 0) throw std::invalid_argument("avg_pool: degenerate target size");
    if (gh > H || gw > W) throw std::invalid_argument("avg_pool: grid exceeds feature size");
    auto lo = [](int i, int n, int g) { return (i * n) / g; };
    auto hi = [](int i, int n, int g) { return ((i + 1) * n + g - 1) / g; };
    Tensor out = Tensor::uninit({N, C, gh, gw});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < gh; ++i)
                for (int j = 0; j < gw; ++j) {
                    double acc = 0.0;
                    int h0 = lo(i, H, gh), h1 = hi(i, H, gh), w0 = lo(j, W, gw), w1 = hi(j, W, gw);
                    for (int h = h0; h < h1; ++h)
                        for (int w = w0; w < w1; ++w) acc += x.at4(n, c, h, w);
                    out.at4(n, c, i, j) = static_cast<float>(acc / ((h1 - h0) * (w1 - w0)));
                }
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia, N, C, H, W, gh, gw, lo, hi](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < gh; ++i)
                    for (int j = 0; j < gw; ++j) {
                        int h0 = lo(i, H, gh), h1 = hi(i, H, gh), w0 = lo(j, W, gw), w1 = hi(j, W, gw);
                        float g = go.at4(n, c, i, j) / ((h1 - h0) * (w1 - w0));
                        for (int h = h0; h < h1; ++h)
                            for (int w = w0; w < w1; ++w) ga.at4(n, c, h, w) += g;
                    }
    });
}

// Bilinear upsampling of [N,C,H,W] to target Ho x Wo (half-pixel centers).
inline Var bilinear_upsample(Var a, int Ho, int Wo) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (x.rank() != 4) throw std::invalid_argument("bilinear_upsample expects [N,C,H,W]");
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("bilinear_upsample: degenerate target size");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    struct Coef {
        int i0, i1;
        float w0, w1;
    };
    auto coeffs = [](int out, int in, int n_out) {
        std::vector<Coef> cs(static_cast<size_t>(n_out));
        (void)out;
        for (int o = 0; o < n_out; ++o) {
            float src = (o + 0.5f) * static_cast<float>(in) / static_cast<float>(n_out) - 0.5f;
            src = std::max(0.0f, std::min(src, static_cast<float>(in - 1)));
            int i0 = static_cast<int>(std::floor(src));
            int i1 = std::min(i0 + 1, in - 1);
            float f = src - static_cast<float>(i0);
            cs[static_cast<size_t>(o)] = Coef{i0, i1, 1.0f - f, f};
        }
        return cs;
    };
    auto ch = std::make_shared<std::vector<Coef>>(coeffs(0, H, Ho));
    auto cw = std::make_shared<std::vector<Coef>>(coeffs(0, W, Wo));

    Tensor out = Tensor::uninit({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xp = x.v.data() + (static_cast<int64_t>(n) * C + c) * H * W;
            float* op = out.v.data() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
            for (int i = 0; i < Ho; ++i) {
                const Coef& ci = (*ch)[static_cast<size_t>(i)];
                const float* r0 = xp + static_cast<int64_t>(ci.i0) * W;
                const float* r1 = xp + static_cast<int64_t>(ci.i1) * W;
                float* orow = op + static_cast<int64_t>(i) * Wo;
                for (int j = 0; j < Wo; ++j) {
                    const Coef& cj = (*cw)[static_cast<size_t>(j)];
                    orow[j] = ci.w0 * (cj.w0 * r0[cj.i0] + cj.w1 * r0[cj.i1]) +
                              ci.w1 * (cj.w0 * r1[cj.i0] + cj.w1 * r1[cj.i1]);
                }
            }
        }
    int self = static_cast<int>(t.size()), ia = a.id;
    return t.push(std::move(out), [self, ia, N, C, H, W, Ho, Wo, ch, cw](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        Tensor& ga = tp.grad(Var{&tp, ia});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float* gp = ga.v.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                const float* op = go.v.data() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
                for (int i = 0; i < Ho; ++i) {
                    const Coef& ci = (*ch)[static_cast<size_t>(i)];
                    float* r0 = gp + static_cast<int64_t>(ci.i0) * W;
                    float* r1 = gp + static_cast<int64_t>(ci.i1) * W;
                    const float* orow = op + static_cast<int64_t>(i) * Wo;
                    for (int j = 0; j < Wo; ++j) {
                        const Coef& cj = (*cw)[static_cast<size_t>(j)];
                        float g = orow[j];
                        r0[cj.i0] += g * ci.w0 * cj.w0;
                        r0[cj.i1] += g * ci.w0 * cj.w1;
                        r1[cj.i0] += g * ci.w1 * cj.w0;
                        r1[cj.i1] += g * ci.w1 * cj.w1;
                    }
                }
            }
    });
}

inline Var concat_channels(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    Tape& t = *parts[0].tape;
    const Tensor& first = t.val(parts[0]);
    if (first.rank() != 4) throw std::invalid_argument("concat_channels expects [N,C,H,W]");
    int N = first.dim(0), H = first.dim(2), W = first.dim(3);
    int Cout = 0;
    for (Var p : parts) {
        const Tensor& x = t.val(p);
        if (x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
            throw std::invalid_argument("concat_channels: incompatible shapes");
        Cout += x.dim(1);
    }
    Tensor out = Tensor::uninit({N, Cout, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    int coff = 0;
    std::vector<int> ids, chans, offs;
    for (Var p : parts) {
        const Tensor& x = t.val(p);
        int C = x.dim(1);
        for (int n = 0; n < N; ++n)
            std::copy(x.v.begin() + n * C * plane, x.v.begin() + (n + 1) * C * plane,
                      out.v.begin() + (static_cast<int64_t>(n) * Cout + coff) * plane);
        ids.push_back(p.id);
        chans.push_back(C);
        offs.push_back(coff);
        coff += C;
    }
    int self = static_cast<int>(t.size());
    return t.push(std::move(out), [self, ids, chans, offs, N, Cout, plane](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        for (size_t k = 0; k < ids.size(); ++k) {
            Tensor& ga = tp.grad(Var{&tp, ids[k]});
            int C = chans[k];
            for (int n = 0; n < N; ++n)
                for (int64_t i = 0; i < C * plane; ++i)
                    ga.v[n * C * plane + i] += go.v[(static_cast<int64_t>(n) * Cout + offs[k]) * plane + i];
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation via im2col + sgemm
// ---------------------------------------------------------------------------

namespace detail {
inline void im2col(const float* img, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* col) {
    // col is [C*kh*kw, Ho*Wo]
    int64_t L = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                float* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * L;
                for (int i = 0; i < Ho; ++i) {
                    int h = i * stride + ki - pad;
                    if (h < 0 || h >= H) {
                        std::fill(row + static_cast<int64_t>(i) * Wo, row + static_cast<int64_t>(i + 1) * Wo, 0.0f);
                        continue;
                    }
                    const float* src = img + (static_cast<int64_t>(c) * H + h) * W;
                    for (int j = 0; j < Wo; ++j) {
                        int w = j * stride + kj - pad;
                        row[static_cast<int64_t>(i) * Wo + j] = (w < 0 || w >= W) ? 0.0f : src[w];
                    }
                }
            }
}

inline void col2im(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* img) {
    int64_t L = static_cast<int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const float* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * L;
                for (int i = 0; i < Ho; ++i) {
                    int h = i * stride + ki - pad;
                    if (h < 0 || h >= H) continue;
                    float* dst = img + (static_cast<int64_t>(c) * H + h) * W;
                    for (int j = 0; j < Wo; ++j) {
                        int w = j * stride + kj - pad;
                        if (w >= 0 && w < W) dst[w] += row[static_cast<int64_t>(i) * Wo + j];
                    }
                }
            }
}
}  // namespace detail

inline Var conv2d(Var input, Var kernel, Var bias, int stride, int pad) {
    detail::blas_init();
    Tape& t = *input.tape;
    const Tensor& x = t.val(input);
    const Tensor& w = t.val(kernel);
    const Tensor& b = t.val(bias);
    if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d expects 4-d input and kernel");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw std::invalid_argument("conv2d: input has " + std::to_string(C) + " channels but kernel expects " +
                                    std::to_string(w.dim(1)));
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (b.numel() != F) throw std::invalid_argument("conv2d: bias length must equal output channels");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: output dimensions are not positive");

    int64_t K = static_cast<int64_t>(C) * kh * kw;
    int64_t L = static_cast<int64_t>(Ho) * Wo;
    // A 1x1 stride-1 convolution's im2col matrix is the input itself, so the
    // copy (and the col2im scatter on the way back) can be skipped.
    const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
    auto cols = std::make_shared<std::vector<float, detail::uninit_alloc<float>>>();
    if (!pointwise) cols->resize(static_cast<size_t>(N * K * L));
    Tensor out = Tensor::uninit({N, F, Ho, Wo});
    for (int n = 0; n < N; ++n) {
        const float* col;
        if (pointwise) {
            col = x.v.data() + static_cast<int64_t>(n) * C * H * W;
        } else {
            float* c = cols->data() + static_cast<int64_t>(n) * K * L;
            detail::im2col(x.v.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, c);
            col = c;
        }
        float* y = out.v.data() + static_cast<int64_t>(n) * F * L;
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, F, static_cast<int>(L), static_cast<int>(K), 1.0f,
                    w.v.data(), static_cast<int>(K), col, static_cast<int>(L), 0.0f, y, static_cast<int>(L));
        for (int f = 0; f < F; ++f) {
            float bf = b.v[static_cast<size_t>(f)];
            float* row = y + static_cast<int64_t>(f) * L;
            for (int64_t i = 0; i < L; ++i) row[i] += bf;
        }
    }

    int self = static_cast<int>(t.size()), ix = input.id, iw = kernel.id, ib = bias.id;
    return t.push(std::move(out), [self, ix, iw, ib, N, C, H, W, F, kh, kw, stride, pad, Ho, Wo, K, L, cols,
                                   pointwise](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& w = tp.val(Var{&tp, iw});
        const Tensor& x = tp.val(Var{&tp, ix});
        Tensor& gx = tp.grad(Var{&tp, ix});
        Tensor& gw = tp.grad(Var{&tp, iw});
        Tensor& gb = tp.grad(Var{&tp, ib});
        std::vector<float, detail::uninit_alloc<float>> dcol;
        if (!pointwise) dcol.resize(static_cast<size_t>(K * L));
        for (int n = 0; n < N; ++n) {
            const float* dy = go.v.data() + static_cast<int64_t>(n) * F * L;
            const float* col = pointwise ? x.v.data() + static_cast<int64_t>(n) * C * H * W
                                         : cols->data() + static_cast<int64_t>(n) * K * L;
            // dW += dY * col^T
            cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, F, static_cast<int>(K), static_cast<int>(L), 1.0f,
                        dy, static_cast<int>(L), col, static_cast<int>(L), 1.0f, gw.v.data(), static_cast<int>(K));
            // db += rowsum(dY)
            for (int f = 0; f < F; ++f) {
                double acc = 0.0;
                const float* row = dy + static_cast<int64_t>(f) * L;
                for (int64_t i = 0; i < L; ++i) acc += row[i];
                gb.v[static_cast<size_t>(f)] += static_cast<float>(acc);
            }
            // dX += W^T * dY (directly for 1x1, else via dcol and col2im)
            if (pointwise) {
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K), static_cast<int>(L), F,
                            1.0f, w.v.data(), static_cast<int>(K), dy, static_cast<int>(L), 1.0f,
                            gx.v.data() + static_cast<int64_t>(n) * C * H * W, static_cast<int>(L));
            } else {
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K), static_cast<int>(L), F,
                            1.0f, w.v.data(), static_cast<int>(K), dy, static_cast<int>(L), 0.0f, dcol.data(),
                            static_cast<int>(L));
                detail::col2im(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               gx.v.data() + static_cast<int64_t>(n) * C * H * W);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { train, eval, reestimate };

// Per-layer activation-statistics accumulator used by BN re-estimation.
struct BnAccum {
    std::vector<double> sum, sumsq;
    double count = 0.0;
};

// Batch norm over [N,C,H,W]. `train` normalizes by batch statistics and
// updates the running stats by EMA; `eval` uses running stats; `reestimate`
// normalizes by batch statistics and accumulates raw sums into `acc` instead
// of touching the EMA.
inline Var batchnorm(Var input, Var scale, Var shift, Tensor& running_mean, Tensor& running_var,
                     float momentum, float eps, BnMode mode, BnAccum* acc = nullptr) {
    Tape& t = *input.tape;
    const Tensor& x = t.val(input);
    if (x.rank() != 4) throw std::invalid_argument("batchnorm expects [N,C,H,W]");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Tensor& g = t.val(scale);
    const Tensor& be = t.val(shift);
    if (g.numel() != C || be.numel() != C || running_mean.numel() != C || running_var.numel() != C)
        throw std::invalid_argument("batchnorm: per-channel parameter length mismatch");
    int64_t plane = static_cast<int64_t>(H) * W;
    int64_t per_chan = static_cast<int64_t>(N) * plane;
    bool use_batch = (mode != BnMode::eval);
    if (use_batch && per_chan < 2)
        throw std::invalid_argument("batchnorm: train mode needs at least 2 elements per channel");

    auto mean = std::make_shared<std::vector<float>>(static_cast<size_t>(C));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(C));
    if (use_batch) {
        if (mode == BnMode::reestimate && acc && acc->sum.empty()) {
            acc->sum.assign(static_cast<size_t>(C), 0.0);
            acc->sumsq.assign(static_cast<size_t>(C), 0.0);
        }
        for (int c = 0; c < C; ++c) {
            double s = 0.0, sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                s += detail::vsum(p, plane);
                sq += detail::vdot(p, p, plane);
            }
            double mu = s / static_cast<double>(per_chan);
            double var = std::max(0.0, sq / static_cast<double>(per_chan) - mu * mu);
            (*mean)[static_cast<size_t>(c)] = static_cast<float>(mu);
            (*inv_std)[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            if (mode == BnMode::train) {
                running_mean.v[static_cast<size_t>(c)] =
                    momentum * running_mean.v[static_cast<size_t>(c)] + (1.0f - momentum) * static_cast<float>(mu);
                running_var.v[static_cast<size_t>(c)] =
                    momentum * running_var.v[static_cast<size_t>(c)] + (1.0f - momentum) * static_cast<float>(var);
            } else if (acc) {
                acc->sum[static_cast<size_t>(c)] += s;
                acc->sumsq[static_cast<size_t>(c)] += sq;
            }
        }
        if (mode == BnMode::reestimate && acc) acc->count += static_cast<double>(per_chan);
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[static_cast<size_t>(c)] = running_mean.v[static_cast<size_t>(c)];
            (*inv_std)[static_cast<size_t>(c)] =
                static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var.v[static_cast<size_t>(c)]) + eps));
        }
    }

    Tensor out = Tensor::uninit(x.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
            float* q = out.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
            float mu = (*mean)[static_cast<size_t>(c)], is = (*inv_std)[static_cast<size_t>(c)];
            float gm = g.v[static_cast<size_t>(c)], bt = be.v[static_cast<size_t>(c)];
            for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * gm + bt;
        }

    int self = static_cast<int>(t.size()), ix = input.id, ig = scale.id, ibt = shift.id;
    return t.push(std::move(out), [self, ix, ig, ibt, N, C, plane, per_chan, use_batch, mean, inv_std](Tape& tp) {
        const Tensor& go = tp.grad(Var{&tp, self});
        const Tensor& x = tp.val(Var{&tp, ix});
        const Tensor& g = tp.val(Var{&tp, ig});
        Tensor& gx = tp.grad(Var{&tp, ix});
        Tensor& gg = tp.grad(Var{&tp, ig});
        Tensor& gb = tp.grad(Var{&tp, ibt});
        for (int c = 0; c < C; ++c) {
            float mu = (*mean)[static_cast<size_t>(c)], is = (*inv_std)[static_cast<size_t>(c)];
            float gm = g.v[static_cast<size_t>(c)];
            double sum_dy = 0.0, dot_dy_x = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* dy = go.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                const float* px = x.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                sum_dy += detail::vsum(dy, plane);
                dot_dy_x += detail::vdot(dy, px, plane);
            }
            double sum_dy_xhat = (dot_dy_x - mu * sum_dy) * is;
            gg.v[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
            gb.v[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
            float mean_dy = static_cast<float>(sum_dy / static_cast<double>(per_chan));
            float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(per_chan));
            for (int n = 0; n < N; ++n) {
                const float* dy = go.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                const float* px = x.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                float* dx = gx.v.data() + (static_cast<int64_t>(n) * C + c) * plane;
                if (use_batch) {
                    for (int64_t i = 0; i < plane; ++i) {
                        float xhat = (px[i] - mu) * is;
                        dx[i] += gm * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                } else {
                    for (int64_t i = 0; i < plane; ++i) dx[i] += gm * is * dy[i];
                }
            }
        }
    });
}

// Standalone BN state bundle for callers outside the model (tests, experiments).
struct BatchNormState {
    Tensor running_mean, running_var;  // [C]
    Tensor scale, shift;               // [C]
    float momentum = 0.9f;
    float epsilon = 1e-5f;

    explicit BatchNormState(int channels = 1)
        : running_mean({channels}),
          running_var(Tensor::full({channels}, 1.0f)),
          scale(Tensor::full({channels}, 1.0f)),
          shift({channels}) {}
};

inline Var batchnorm(Var input, BatchNormState& st, BnMode mode, BnAccum* acc = nullptr) {
    Tape& t = *input.tape;
    if (st.epsilon <= 0.0f) throw std::invalid_argument("batchnorm: epsilon must be positive");
    Var g = t.leaf(st.scale);
    Var b = t.leaf(st.shift);
    return batchnorm(input, g, b, st.running_mean, st.running_var, st.momentum, st.epsilon, mode, acc);
}

}  // namespace nslab
