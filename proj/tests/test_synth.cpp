#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nslab/synth.hpp"
#include "test_util.hpp"

using namespace nslab;

TEST_CASE("edge_gt_from_mask: handcrafted oracle") {
    // 3x4 mask: left half class 1, right half class 2
    std::vector<uint8_t> m = {1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2};
    std::vector<uint8_t> e = edge_gt_from_mask(m, 3, 4);
    std::vector<uint8_t> want = {0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0};
    CHECK(e == want);
    // uniform mask has no edges; image border alone is not an edge
    std::vector<uint8_t> flat(12, 3);
    std::vector<uint8_t> zero(12, 0);
    CHECK(edge_gt_from_mask(flat, 3, 4) == zero);
}

TEST_CASE("generate_scene: determinism and part census") {
    SceneSpec spec;
    Sample a = generate_scene(spec, 7), b = generate_scene(spec, 7), c = generate_scene(spec, 8);
    CHECK(a.clean_mask == b.clean_mask);
    CHECK(a.image.v == b.image.v);
    CHECK(a.clean_mask != c.clean_mask);

    int bg_violations = 0;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        Sample s = generate_scene(spec, seed);
        std::array<int, kNumClasses> hist{};
        for (uint8_t x : s.clean_mask) hist[x]++;
        for (int cls = 0; cls < kNumClasses; ++cls) {
            INFO("seed ", seed, " class ", cls);
            CHECK(hist[static_cast<size_t>(cls)] >= 4);  // every part visible
        }
        double bg = static_cast<double>(hist[0]) / s.clean_mask.size();
        bg_violations += !(bg >= spec.bg_frac_min && bg <= spec.bg_frac_max);
        CHECK(s.image.all_finite());
        for (float v : s.image.v) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(s.edge_gt == edge_gt_from_mask(s.clean_mask, s.h, s.w));
    }
    CHECK(bg_violations == 0);
}

TEST_CASE("noise spec: validation and identity") {
    NoiseSpec n;
    CHECK(n.is_identity());
    CHECK_NOTHROW(n.validate());
    n.jitter_frac = 1.5f;
    CHECK_THROWS(n.validate());
    n = NoiseSpec{};
    n.confusion.push_back({3, 5, -0.2f});
    CHECK_THROWS(n.validate());
    n = NoiseSpec{};
    n.confusion.push_back({9, 5, 0.5f});
    CHECK_THROWS(n.validate());
    n = NoiseSpec{};
    n.mirror_swap = 0.15f;
    CHECK(!n.is_identity());
}

TEST_CASE("inject_noise: identity spec leaves mask untouched") {
    Sample s = generate_scene(SceneSpec{}, 3);
    CHECK(inject_noise(s.clean_mask, s.h, s.w, NoiseSpec{}, 123) == s.clean_mask);
}

TEST_CASE("inject_noise: mirror swap with probability 1 is an involution") {
    Sample s = generate_scene(SceneSpec{}, 5);
    NoiseSpec n;
    n.mirror_swap = 1.0f;
    auto once = inject_noise(s.clean_mask, s.h, s.w, n, 9);
    CHECK(once != s.clean_mask);
    for (size_t i = 0; i < once.size(); ++i) {
        uint8_t c = s.clean_mask[i], o = once[i];
        if (c == kLeftArm) CHECK(o == kRightArm);
        else if (c == kRightArm) CHECK(o == kLeftArm);
        else if (c == kLeftLeg) CHECK(o == kRightLeg);
        else if (c == kRightLeg) CHECK(o == kLeftLeg);
        else CHECK(o == c);
    }
    auto twice = inject_noise(once, s.h, s.w, n, 9);
    CHECK(twice == s.clean_mask);
}

TEST_CASE("inject_noise: class confusion with probability 1 relabels whole region") {
    Sample s = generate_scene(SceneSpec{}, 11);
    NoiseSpec n;
    n.confusion.push_back({kLeftArm, kLeftLeg, 1.0f});
    auto out = inject_noise(s.clean_mask, s.h, s.w, n, 2);
    for (size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] != kLeftArm);
        if (s.clean_mask[i] == kLeftArm) CHECK(out[i] == kLeftLeg);
        else CHECK(out[i] == s.clean_mask[i]);
    }
}

TEST_CASE("inject_noise: boundary jitter hit rate tracks jitter_frac") {
    NoiseSpec n;
    n.jitter_radius = 1.0f;
    n.jitter_frac = 0.5f;
    // with radius 1 a jittered boundary pixel paints a 5-px disk; count how
    // many boundary pixels were dissent sources via per-seed aggregate
    int64_t boundary_total = 0, changed_total = 0;
    for (uint64_t seed = 0; seed < 60; ++seed) {
        Sample s = generate_scene(SceneSpec{}, 100 + seed);
        auto noisy = inject_noise(s.clean_mask, s.h, s.w, n, seed);
        for (size_t i = 0; i < noisy.size(); ++i) changed_total += noisy[i] != s.clean_mask[i];
        for (uint8_t b : s.edge_gt) boundary_total += b;
    }
    CHECK(boundary_total > 0);
    double per_boundary = static_cast<double>(changed_total) / static_cast<double>(boundary_total);
    // each flip recolors part of a disk; changed pixels per boundary pixel
    // must be positive and bounded by frac * disk area
    CHECK(per_boundary > 0.1);
    CHECK(per_boundary < 0.5 * 5.0);
    // jitter_frac = 0 with positive radius changes nothing
    NoiseSpec n0;
    n0.jitter_radius = 2.0f;
    Sample s = generate_scene(SceneSpec{}, 42);
    CHECK(inject_noise(s.clean_mask, s.h, s.w, n0, 1) == s.clean_mask);
}

TEST_CASE("inject_noise: drop_region removes the smallest part") {
    Sample s = generate_scene(SceneSpec{}, 17);
    NoiseSpec n;
    n.drop_region = 1.0f;
    auto out = inject_noise(s.clean_mask, s.h, s.w, n, 3);
    std::array<int, kNumClasses> before{}, after{};
    for (uint8_t x : s.clean_mask) before[x]++;
    for (uint8_t x : out) after[x]++;
    int smallest = -1;
    for (int c = 1; c < kNumClasses; ++c)
        if (before[static_cast<size_t>(c)] > 0 && (smallest < 0 || before[static_cast<size_t>(c)] < before[static_cast<size_t>(smallest)]))
            smallest = c;
    REQUIRE(smallest > 0);
    CHECK(after[static_cast<size_t>(smallest)] == 0);
    CHECK(after[0] == before[0] + before[static_cast<size_t>(smallest)]);
}

TEST_CASE("make_dataset: determinism and noisy/clean divergence") {
    SceneSpec spec;
    NoiseSpec noise;
    noise.jitter_radius = 2.0f;
    noise.jitter_frac = 0.5f;
    noise.mirror_swap = 0.15f;
    Dataset a = make_dataset(12, spec, noise, 77);
    Dataset b = make_dataset(12, spec, noise, 77);
    REQUIRE(a.samples.size() == 12);
    bool identical = true;
    int noisy_samples = 0;
    for (size_t i = 0; i < a.samples.size(); ++i) {
        identical = identical && a.samples[i].image.v == b.samples[i].image.v &&
                    a.samples[i].clean_mask == b.samples[i].clean_mask &&
                    a.samples[i].noisy_mask == b.samples[i].noisy_mask;
        noisy_samples += a.samples[i].noisy_mask != a.samples[i].clean_mask;
    }
    CHECK(identical);
    CHECK(noisy_samples > 6);  // jitter at 50% of boundary corrupts nearly every sample
    // different seed, different data
    Dataset c = make_dataset(12, spec, noise, 78);
    CHECK(c.samples[0].image.v != a.samples[0].image.v);
}

TEST_CASE("dataset file: round trip, size calculus, corruption") {
    SceneSpec spec;
    NoiseSpec noise;
    noise.mirror_swap = 0.5f;
    Dataset ds = make_dataset(5, spec, noise, 31);
    std::string dir = testutil::temp_dir("nsds");
    std::string p = dir + "/d.nsds";
    write_dataset(p, ds);

    // header 5 + 4*4 bytes; per sample 3*H*W floats + 3 u8 planes
    int64_t hw = static_cast<int64_t>(ds.h) * ds.w;
    int64_t want_size = 21 + 5 * (3 * hw * 4 + 3 * hw);
    CHECK(static_cast<int64_t>(std::filesystem::file_size(p)) == want_size);

    Dataset r = read_dataset(p);
    REQUIRE(r.samples.size() == ds.samples.size());
    CHECK(r.num_classes == ds.num_classes);
    CHECK(r.h == ds.h);
    CHECK(r.w == ds.w);
    for (size_t i = 0; i < r.samples.size(); ++i) {
        CHECK(r.samples[i].image.v == ds.samples[i].image.v);
        CHECK(r.samples[i].clean_mask == ds.samples[i].clean_mask);
        CHECK(r.samples[i].noisy_mask == ds.samples[i].noisy_mask);
        CHECK(r.samples[i].edge_gt == ds.samples[i].edge_gt);
    }

    std::string bytes;
    {
        std::ifstream is(p, std::ios::binary);
        bytes.assign((std::istreambuf_iterator<char>(is)), {});
    }
    {
        std::ofstream os(dir + "/bad.nsds", std::ios::binary);
        os << "WRONG" << bytes.substr(5);
    }
    CHECK_THROWS_WITH(read_dataset(dir + "/bad.nsds"), doctest::Contains("magic"));
    {
        std::ofstream os(dir + "/trunc.nsds", std::ios::binary);
        os << bytes.substr(0, bytes.size() - 64);
    }
    CHECK_THROWS(read_dataset(dir + "/trunc.nsds"));
    CHECK_THROWS(read_dataset(dir + "/missing.nsds"));
}
