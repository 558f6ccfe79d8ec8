#pragma once

#include <array>
#include <cstring>
#include <fstream>

#include "nslab/tensor.hpp"

namespace nslab {

// Class layout: 0 background, 1 head, 2 torso, 3/4 left/right arm,
// 5/6 left/right leg. Mirror pairs are (3,4) and (5,6).
enum PartClass : uint8_t { kBackground = 0, kHead = 1, kTorso = 2, kLeftArm = 3, kRightArm = 4, kLeftLeg = 5, kRightLeg = 6 };
inline constexpr int kNumClasses = 7;

struct Sample {
    int h = 0, w = 0;
    Tensor image;                      // [3,H,W], values in [0,1]
    std::vector<uint8_t> clean_mask;   // H*W
    std::vector<uint8_t> noisy_mask;   // H*W
    std::vector<uint8_t> edge_gt;      // H*W, derived from noisy_mask
};

struct Dataset {
    int num_classes = kNumClasses;
    int h = 0, w = 0;
    std::vector<Sample> samples;
};

struct SceneSpec {
    int canvas_h = 64, canvas_w = 64;
    int num_classes = kNumClasses;     // fixed body plan needs exactly 7
    float clutter = 0.6f;              // expected background blob count scale
    float bg_frac_min = 0.45f;
    float bg_frac_max = 0.92f;

    void validate() const {
        if (canvas_h < 16 || canvas_w < 16) throw std::invalid_argument("scene: canvas too small");
        if (num_classes != kNumClasses) throw std::invalid_argument("scene: body plan is fixed at 7 classes");
        if (!(bg_frac_min < bg_frac_max)) throw std::invalid_argument("scene: bad background fraction range");
    }
};

struct ClassConfusion {
    int from = 0, to = 0;
    float prob = 0.0f;
};

struct NoiseSpec {
    float jitter_radius = 0.0f;        // px
    float jitter_frac = 0.0f;          // fraction of boundary pixels affected
    std::vector<ClassConfusion> confusion;
    float mirror_swap = 0.0f;
    float drop_region = 0.0f;

    void validate() const {
        auto p01 = [](float p) { return p >= 0.0f && p <= 1.0f; };
        if (jitter_radius < 0 || !p01(jitter_frac) || !p01(mirror_swap) || !p01(drop_region))
            throw std::invalid_argument("noise: probabilities must be in [0,1], radius >= 0");
        for (const auto& c : confusion) {
            if (!p01(c.prob)) throw std::invalid_argument("noise: confusion prob out of range");
            if (c.from < 1 || c.from >= kNumClasses || c.to < 0 || c.to >= kNumClasses || c.from == c.to)
                throw std::invalid_argument("noise: confusion classes out of range");
        }
    }
    bool is_identity() const {
        if (jitter_frac > 0 && jitter_radius >= 1) return false;
        if (mirror_swap > 0 || drop_region > 0) return false;
        for (const auto& c : confusion)
            if (c.prob > 0) return false;
        return true;
    }
};

// Pixel is an edge iff any in-bounds 4-neighbor carries a different label.
inline std::vector<uint8_t> edge_gt_from_mask(const std::vector<uint8_t>& mask, int H, int W) {
    if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(H) * W)
        throw std::invalid_argument("edge_gt_from_mask: size mismatch");
    std::vector<uint8_t> edge(mask.size(), 0);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            uint8_t c = mask[static_cast<size_t>(h) * W + w];
            bool e = (h > 0 && mask[static_cast<size_t>(h - 1) * W + w] != c) ||
                     (h + 1 < H && mask[static_cast<size_t>(h + 1) * W + w] != c) ||
                     (w > 0 && mask[static_cast<size_t>(h) * W + w - 1] != c) ||
                     (w + 1 < W && mask[static_cast<size_t>(h) * W + w + 1] != c);
            edge[static_cast<size_t>(h) * W + w] = e ? 1 : 0;
        }
    return edge;
}

namespace detail {

inline void paint_ellipse(std::vector<uint8_t>& mask, int H, int W, double cx, double cy, double rx, double ry,
                          uint8_t label) {
    int h0 = std::max(0, static_cast<int>(std::floor(cy - ry))), h1 = std::min(H - 1, static_cast<int>(std::ceil(cy + ry)));
    int w0 = std::max(0, static_cast<int>(std::floor(cx - rx))), w1 = std::min(W - 1, static_cast<int>(std::ceil(cx + rx)));
    for (int h = h0; h <= h1; ++h)
        for (int w = w0; w <= w1; ++w) {
            double dx = (w - cx) / rx, dy = (h - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) mask[static_cast<size_t>(h) * W + w] = label;
        }
}

inline void paint_capsule(std::vector<uint8_t>& mask, int H, int W, double x0, double y0, double x1, double y1,
                          double thick, uint8_t label) {
    double dx = x1 - x0, dy = y1 - y0;
    double len2 = dx * dx + dy * dy;
    int h0 = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - thick)));
    int h1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(y0, y1) + thick)));
    int w0 = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - thick)));
    int w1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(x0, x1) + thick)));
    for (int h = h0; h <= h1; ++h)
        for (int w = w0; w <= w1; ++w) {
            double t = len2 > 0 ? ((w - x0) * dx + (h - y0) * dy) / len2 : 0.0;
            t = std::max(0.0, std::min(1.0, t));
            double px = x0 + t * dx, py = y0 + t * dy;
            double d2 = (w - px) * (w - px) + (h - py) * (h - py);
            if (d2 <= thick * thick) mask[static_cast<size_t>(h) * W + w] = label;
        }
}

inline std::array<float, 3> class_color(int c) {
    static constexpr std::array<std::array<float, 3>, kNumClasses> base = {{
        {0.15f, 0.35f, 0.20f},  // background
        {0.85f, 0.70f, 0.55f},  // head
        {0.75f, 0.20f, 0.25f},  // torso
        {0.90f, 0.75f, 0.30f},  // left arm
        {0.90f, 0.55f, 0.15f},  // right arm
        {0.25f, 0.35f, 0.80f},  // left leg
        {0.35f, 0.60f, 0.85f},  // right leg
    }};
    return base[static_cast<size_t>(c)];
}

}  // namespace detail

// Deterministic procedural scene: torso ellipse, head, two arm capsules and
// two leg capsules on a cluttered background. Retries with derived seeds
// until all six part classes are visible and the background fraction falls
// inside the configured range.
inline Sample generate_scene(const SceneSpec& spec, uint64_t seed) {
    spec.validate();
    int H = spec.canvas_h, W = spec.canvas_w;
    for (int attempt = 0; attempt < 32; ++attempt) {
        Rng rng(seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(attempt));
        std::vector<uint8_t> mask(static_cast<size_t>(H) * W, kBackground);

        double cx = W * rng.uniform(0.40, 0.60), cy = H * rng.uniform(0.44, 0.56);
        double trx = W * rng.uniform(0.10, 0.16), try_ = H * rng.uniform(0.15, 0.21);
        double head_r = H * rng.uniform(0.07, 0.10);
        double arm_len = H * rng.uniform(0.18, 0.27), arm_th = rng.uniform(1.6, 3.2);
        double leg_len = H * rng.uniform(0.20, 0.30), leg_th = rng.uniform(2.0, 3.6);

        // limbs first, torso and head paint over the attachment points
        for (int side = 0; side < 2; ++side) {
            double sgn = side == 0 ? -1.0 : 1.0;
            double sx = cx + sgn * trx * 0.95, sy = cy - try_ * 0.55 + rng.uniform(-1.5, 1.5);
            double ang = rng.uniform(0.15, 1.25);  // radians from straight down, swung outward
            double ex = sx + sgn * arm_len * std::sin(ang), ey = sy + arm_len * std::cos(ang);
            detail::paint_capsule(mask, H, W, sx, sy, ex, ey, arm_th, side == 0 ? kLeftArm : kRightArm);
        }
        for (int side = 0; side < 2; ++side) {
            double sgn = side == 0 ? -1.0 : 1.0;
            double sx = cx + sgn * trx * 0.45, sy = cy + try_ * 0.8;
            double ang = rng.uniform(0.0, 0.35);
            double ex = sx + sgn * leg_len * std::sin(ang), ey = sy + leg_len * std::cos(ang);
            detail::paint_capsule(mask, H, W, sx, sy, ex, ey, leg_th, side == 0 ? kLeftLeg : kRightLeg);
        }
        detail::paint_ellipse(mask, H, W, cx, cy, trx, try_, kTorso);
        detail::paint_ellipse(mask, H, W, cx + rng.uniform(-1.0, 1.0), cy - try_ - head_r * 0.9, head_r, head_r, kHead);

        std::array<int64_t, kNumClasses> hist{};
        for (uint8_t c : mask) hist[c]++;
        double bg_frac = static_cast<double>(hist[kBackground]) / (static_cast<double>(H) * W);
        bool ok = bg_frac >= spec.bg_frac_min && bg_frac <= spec.bg_frac_max;
        for (int c = 1; c < kNumClasses; ++c) ok = ok && hist[static_cast<size_t>(c)] >= 4;
        if (!ok) continue;

        // render: class colors with per-sample jitter, background clutter
        // blobs (image only), per-pixel noise
        Sample s;
        s.h = H;
        s.w = W;
        s.image = Tensor({3, H, W});
        std::array<std::array<float, 3>, kNumClasses> color;
        for (int c = 0; c < kNumClasses; ++c) {
            color[static_cast<size_t>(c)] = detail::class_color(c);
            for (int ch = 0; ch < 3; ++ch)
                color[static_cast<size_t>(c)][static_cast<size_t>(ch)] += static_cast<float>(rng.uniform(-0.08, 0.08));
        }
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const auto& col = color[mask[static_cast<size_t>(h) * W + w]];
                for (int ch = 0; ch < 3; ++ch) s.image.v[(static_cast<size_t>(ch) * H + h) * W + w] = col[static_cast<size_t>(ch)];
            }
        int n_blobs = static_cast<int>(spec.clutter * 6.0f);
        for (int b = 0; b < n_blobs; ++b) {
            double bx = rng.uniform(0.0, W), by = rng.uniform(0.0, H);
            double br = rng.uniform(2.0, 6.0);
            std::array<float, 3> bc = {static_cast<float>(rng.uniform(0.0, 1.0)), static_cast<float>(rng.uniform(0.0, 1.0)),
                                       static_cast<float>(rng.uniform(0.0, 1.0))};
            int h0 = std::max(0, static_cast<int>(by - br)), h1 = std::min(H - 1, static_cast<int>(by + br));
            int w0 = std::max(0, static_cast<int>(bx - br)), w1 = std::min(W - 1, static_cast<int>(bx + br));
            for (int h = h0; h <= h1; ++h)
                for (int w = w0; w <= w1; ++w) {
                    if (mask[static_cast<size_t>(h) * W + w] != kBackground) continue;
                    double d2 = (w - bx) * (w - bx) + (h - by) * (h - by);
                    if (d2 > br * br) continue;
                    for (int ch = 0; ch < 3; ++ch)
                        s.image.v[(static_cast<size_t>(ch) * H + h) * W + w] =
                            0.5f * s.image.v[(static_cast<size_t>(ch) * H + h) * W + w] + 0.5f * bc[static_cast<size_t>(ch)];
                }
        }
        for (auto& x : s.image.v) x = std::min(1.0f, std::max(0.0f, x + static_cast<float>(rng.normal() * 0.04)));

        s.clean_mask = mask;
        s.noisy_mask = mask;
        s.edge_gt = edge_gt_from_mask(mask, H, W);
        return s;
    }
    throw std::runtime_error("generate_scene: grammar failed after bounded retries, seed " + std::to_string(seed));
}

// Label-noise injectors, composed in order: boundary jitter, pairwise class
// confusion, mirror swap, small-region drop. Pure function of (mask, spec, seed).
inline std::vector<uint8_t> inject_noise(const std::vector<uint8_t>& clean, int H, int W, const NoiseSpec& spec,
                                         uint64_t seed) {
    spec.validate();
    std::vector<uint8_t> mask = clean;
    Rng rng(seed ^ 0xa5a5a5a55a5a5a5aull);

    if (spec.jitter_frac > 0.0f && spec.jitter_radius >= 1.0f) {
        std::vector<uint8_t> boundary = edge_gt_from_mask(mask, H, W);
        std::vector<uint8_t> src = mask;  // jitter reads the pre-jitter labels
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                if (!boundary[static_cast<size_t>(h) * W + w]) continue;
                if (!rng.bernoulli(spec.jitter_frac)) continue;
                int r = 1 + rng.uniform_int(static_cast<int>(spec.jitter_radius));
                uint8_t label = src[static_cast<size_t>(h) * W + w];
                for (int dh = -r; dh <= r; ++dh)
                    for (int dw = -r; dw <= r; ++dw) {
                        if (dh * dh + dw * dw > r * r) continue;
                        int h2 = h + dh, w2 = w + dw;
                        if (h2 < 0 || h2 >= H || w2 < 0 || w2 >= W) continue;
                        mask[static_cast<size_t>(h2) * W + w2] = label;
                    }
            }
    }

    for (const auto& c : spec.confusion)
        if (rng.bernoulli(c.prob))
            for (auto& x : mask)
                if (x == c.from) x = static_cast<uint8_t>(c.to);

    if (rng.bernoulli(spec.mirror_swap))
        for (auto& x : mask) {
            if (x == kLeftArm) x = kRightArm;
            else if (x == kRightArm) x = kLeftArm;
            else if (x == kLeftLeg) x = kRightLeg;
            else if (x == kRightLeg) x = kLeftLeg;
        }

    if (rng.bernoulli(spec.drop_region)) {
        std::array<int64_t, 256> hist{};
        for (uint8_t x : mask) hist[x]++;
        int smallest = -1;
        for (int c = 1; c < kNumClasses; ++c)
            if (hist[static_cast<size_t>(c)] > 0 && (smallest < 0 || hist[static_cast<size_t>(c)] < hist[static_cast<size_t>(smallest)]))
                smallest = c;
        if (smallest > 0)
            for (auto& x : mask)
                if (x == smallest) x = kBackground;
    }
    return mask;
}

inline Dataset make_dataset(int count, const SceneSpec& scene, const NoiseSpec& noise, uint64_t seed) {
    Dataset ds;
    ds.num_classes = scene.num_classes;
    ds.h = scene.canvas_h;
    ds.w = scene.canvas_w;
    ds.samples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        uint64_t s = seed * 1000003ull + static_cast<uint64_t>(i);
        Sample smp = generate_scene(scene, s);
        smp.noisy_mask = inject_noise(smp.clean_mask, ds.h, ds.w, noise, s);
        smp.edge_gt = edge_gt_from_mask(smp.noisy_mask, ds.h, ds.w);
        ds.samples.push_back(std::move(smp));
    }
    return ds;
}

// Dataset container "NSDS1":
//   magic "NSDS1" (5 bytes), u32 count, u32 num_classes, u32 H, u32 W
//   per sample: 3*H*W f32 image, H*W u8 clean mask, H*W u8 noisy mask,
//               H*W u8 edge map (0/1)
// All values little-endian.
inline void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot open for writing: " + path);
    auto put_u32 = [&](uint32_t x) {
        unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                              static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    os.write("NSDS1", 5);
    put_u32(static_cast<uint32_t>(ds.samples.size()));
    put_u32(static_cast<uint32_t>(ds.num_classes));
    put_u32(static_cast<uint32_t>(ds.h));
    put_u32(static_cast<uint32_t>(ds.w));
    for (const auto& s : ds.samples) {
        os.write(reinterpret_cast<const char*>(s.image.v.data()), static_cast<std::streamsize>(s.image.v.size() * 4));
        os.write(reinterpret_cast<const char*>(s.clean_mask.data()), static_cast<std::streamsize>(s.clean_mask.size()));
        os.write(reinterpret_cast<const char*>(s.noisy_mask.data()), static_cast<std::streamsize>(s.noisy_mask.size()));
        os.write(reinterpret_cast<const char*>(s.edge_gt.data()), static_cast<std::streamsize>(s.edge_gt.size()));
    }
    if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "NSDS1", 5) != 0) throw std::runtime_error("dataset: bad magic in " + path);
    auto get_u32 = [&]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        if (!is) throw std::runtime_error("dataset: truncated file: " + path);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
               (static_cast<uint32_t>(b[3]) << 24);
    };
    uint32_t count = get_u32();
    Dataset ds;
    ds.num_classes = static_cast<int>(get_u32());
    ds.h = static_cast<int>(get_u32());
    ds.w = static_cast<int>(get_u32());
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    for (uint32_t i = 0; i < count; ++i) {
        Sample s;
        s.h = ds.h;
        s.w = ds.w;
        s.image = Tensor({3, ds.h, ds.w});
        s.clean_mask.resize(static_cast<size_t>(hw));
        s.noisy_mask.resize(static_cast<size_t>(hw));
        s.edge_gt.resize(static_cast<size_t>(hw));
        is.read(reinterpret_cast<char*>(s.image.v.data()), static_cast<std::streamsize>(s.image.v.size() * 4));
        is.read(reinterpret_cast<char*>(s.clean_mask.data()), static_cast<std::streamsize>(hw));
        is.read(reinterpret_cast<char*>(s.noisy_mask.data()), static_cast<std::streamsize>(hw));
        is.read(reinterpret_cast<char*>(s.edge_gt.data()), static_cast<std::streamsize>(hw));
        if (!is) throw std::runtime_error("dataset: truncated sample in " + path);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace nslab
