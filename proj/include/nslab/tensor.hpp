#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nslab {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + std::to_string(e));
        n *= e;
    }
    return n;
}

namespace detail {
// std::allocator that default-initializes on resize, so buffers an op fully
// overwrites are not zero-filled first.
template <class T>
struct uninit_alloc : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = uninit_alloc<U>;
    };
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    void construct(U* p) {
        ::new (static_cast<void*>(p)) U;
    }
};

inline bool operator==(const std::vector<float, uninit_alloc<float>>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
inline bool operator==(const std::vector<float>& a, const std::vector<float, uninit_alloc<float>>& b) { return b == a; }
}  // namespace detail

// Dense row-major float tensor. Gradients live on the tape, not here.
struct Tensor {
    std::vector<int> shape;
    std::vector<float, detail::uninit_alloc<float>> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(static_cast<size_t>(numel_of(shape)), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> data) : shape(std::move(s)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor data length does not match shape");
        v.assign(data.begin(), data.end());
    }
    static Tensor scalar(float x) { return Tensor({1}, {x}); }
    static Tensor full(std::vector<int> s, float x) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    // Contents are indeterminate; caller must write every element.
    static Tensor uninit(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.v.resize(static_cast<size_t>(numel_of(t.shape)));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return v[static_cast<size_t>(i)]; }

    // 4-d accessors for the common N,C,H,W case
    int64_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
    }
    float& at4(int n, int c, int h, int w) { return v[static_cast<size_t>(idx4(n, c, h, w))]; }
    float at4(int n, int c, int h, int w) const { return v[static_cast<size_t>(idx4(n, c, h, w))]; }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Deterministic RNG. Distributions are hand-rolled on top of mt19937 so
// sequences do not depend on libstdc++'s distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(static_cast<uint32_t>(seed ^ (seed >> 32) ^ 0x9e3779b9u)) {}

    uint32_t next_u32() { return eng_(); }

    double uniform() { return (static_cast<double>(eng_()) + 0.5) * (1.0 / 4294967296.0); }  // (0,1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) {  // [0, n)
        if (n <= 0) throw std::invalid_argument("uniform_int needs n > 0");
        return static_cast<int>(eng_() % static_cast<uint32_t>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        cached_ = r * std::sin(2.0 * M_PI * u2);
        has_cached_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    Rng fork(uint64_t stream) { return Rng((static_cast<uint64_t>(eng_()) << 32) ^ stream); }

private:
    std::mt19937 eng_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace nslab
