#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nslab/losses.hpp"
#include "test_util.hpp"

using namespace nslab;
using testutil::random_probs;
using testutil::random_tensor;

namespace {
ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.input_h = 16;
    cfg.input_w = 16;
    cfg.num_classes = 4;
    cfg.base_channels = 4;
    cfg.proj_channels = 4;
    cfg.pyramid_grids = {1, 2};
    cfg.backbone_depth = 2;
    return cfg;
}
}  // namespace

TEST_CASE("model config: validation") {
    CHECK_NOTHROW(ModelConfig{}.validate());
    ModelConfig c = tiny_cfg();
    c.num_classes = 1;
    CHECK_THROWS(c.validate());
    c = tiny_cfg();
    c.input_h = 15;
    CHECK_THROWS(c.validate());
    c = tiny_cfg();
    c.pyramid_grids = {2, 2};
    CHECK_THROWS(c.validate());
    c = tiny_cfg();
    c.pyramid_grids = {64};  // exceeds 4x4 feature map
    CHECK_THROWS(c.validate());
}

TEST_CASE("model config: file round trip and unknown key") {
    ModelConfig c = tiny_cfg();
    std::string dir = testutil::temp_dir("modelcfg");
    save_model_config(dir + "/m.cfg", c);
    ModelConfig r = load_model_config(dir + "/m.cfg");
    CHECK(r.input_h == c.input_h);
    CHECK(r.num_classes == c.num_classes);
    CHECK(r.base_channels == c.base_channels);
    CHECK(r.pyramid_grids == c.pyramid_grids);
    {
        std::ofstream os(dir + "/bad.cfg");
        os << "input_h=16\nbogus_key=3\n";
    }
    CHECK_THROWS_WITH(load_model_config(dir + "/bad.cfg"), doctest::Contains("bogus_key"));
}

TEST_CASE("build_model: deterministic, census, init invariants") {
    ModelConfig cfg = tiny_cfg();
    ModelWeights a = build_model(cfg, 9), b = build_model(cfg, 9), c = build_model(cfg, 10);
    CHECK_NOTHROW(check_name_census(cfg, a.t));
    REQUIRE(a.t.size() == b.t.size());
    bool identical = true, differs = false;
    for (auto& [k, v] : a.t) {
        identical = identical && (b.t.at(k).v == v.v);
        differs = differs || (c.t.at(k).v != v.v);
    }
    CHECK(identical);
    CHECK(differs);
    // BN init: scale 1, shift 0, running mean 0, running var 1; head biases 0
    for (auto& [k, v] : a.t) {
        auto all_equal = [&](float x) {
            for (float y : v.v)
                if (y != x) return false;
            return true;
        };
        if (k.ends_with(".bn.scale")) CHECK(all_equal(1.0f));
        if (k.ends_with(".bn.shift")) CHECK(all_equal(0.0f));
        if (k.ends_with(".bn.running_mean")) CHECK(all_equal(0.0f));
        if (k.ends_with(".bn.running_var")) CHECK(all_equal(1.0f));
        if (k.ends_with(".b")) CHECK(all_equal(0.0f));
    }
    // census catches missing/extra names
    TensorMap broken = a.t;
    broken.erase("parsing.head.w");
    CHECK_THROWS(check_name_census(cfg, broken));
    broken = a.t;
    broken["extra.w"] = Tensor({1});
    CHECK_THROWS(check_name_census(cfg, broken));
}

TEST_CASE("is_bn_running_stat / is_weight_decayed") {
    CHECK(is_bn_running_stat("backbone.0.bn.running_mean"));
    CHECK(is_bn_running_stat("context.out.bn.running_var"));
    CHECK(!is_bn_running_stat("backbone.0.bn.scale"));
    CHECK(is_weight_decayed("fusion.conv.w"));
    CHECK(!is_weight_decayed("fusion.head.b"));
    CHECK(!is_weight_decayed("backbone.0.bn.shift"));
}

TEST_CASE("forward: output shapes at full input resolution") {
    ModelConfig cfg = tiny_cfg();
    ModelWeights w = build_model(cfg, 1);
    Rng rng(2);
    Tensor img = random_tensor({3, 3, 16, 16}, rng);
    Tape t;
    ForwardOutput out = forward(t, w, img, BnMode::train);
    CHECK(t.val(out.parsing_logits).shape == std::vector<int>{3, 4, 16, 16});
    CHECK(t.val(out.fused_logits).shape == std::vector<int>{3, 4, 16, 16});
    CHECK(t.val(out.edge_logits).shape == std::vector<int>{3, 1, 16, 16});
    CHECK(t.val(out.parsing_logits).all_finite());
    CHECK(t.val(out.fused_logits).all_finite());
    // wrong geometry rejected
    Tape t2;
    CHECK_THROWS(forward(t2, w, random_tensor({1, 3, 8, 8}, rng), BnMode::train));
    CHECK_THROWS(forward(t2, w, random_tensor({1, 1, 16, 16}, rng), BnMode::train));
}

TEST_CASE("forward: eval mode is deterministic and per-sample independent") {
    ModelConfig cfg = tiny_cfg();
    ModelWeights w = build_model(cfg, 3);
    // give the running stats non-trivial values
    for (auto& [k, v] : w.t) {
        if (k.ends_with(".bn.running_mean"))
            for (size_t i = 0; i < v.v.size(); ++i) v.v[i] = 0.01f * static_cast<float>(i);
        if (k.ends_with(".bn.running_var"))
            for (size_t i = 0; i < v.v.size(); ++i) v.v[i] = 1.0f + 0.1f * static_cast<float>(i);
    }
    Rng rng(4);
    Tensor batch = random_tensor({2, 3, 16, 16}, rng);
    Tape ta, tb;
    Tensor ya = ta.val(forward(ta, w, batch, BnMode::eval).fused_logits);
    Tensor yb = tb.val(forward(tb, w, batch, BnMode::eval).fused_logits);
    CHECK(ya.v == yb.v);  // bitwise repeatable
    // batch equivariance in eval mode: sample 1 alone gives the same logits
    Tensor single({1, 3, 16, 16});
    std::copy(batch.v.begin() + 3 * 16 * 16, batch.v.end(), single.v.begin());
    Tape ts;
    Tensor ys = ts.val(forward(ts, w, single, BnMode::eval).fused_logits);
    for (int64_t i = 0; i < ys.numel(); ++i)
        CHECK(ys.v[static_cast<size_t>(i)] ==
              doctest::Approx(ya.v[static_cast<size_t>(i) + static_cast<size_t>(ya.numel() / 2)]).epsilon(2e-5));
}

TEST_CASE("forward: train mode uses batch stats and updates running stats") {
    ModelConfig cfg = tiny_cfg();
    ModelWeights w = build_model(cfg, 5);
    Rng rng(6);
    Tensor batch = random_tensor({4, 3, 16, 16}, rng);
    Tensor rm_before = w.t.at("backbone.0.bn.running_mean");
    Tape t;
    Tensor y_train = t.val(forward(t, w, batch, BnMode::train).fused_logits);
    Tensor rm_after = w.t.at("backbone.0.bn.running_mean");
    CHECK(rm_before.v != rm_after.v);  // EMA moved
    // fresh model, eval mode with untouched stats: different output
    ModelWeights w2 = build_model(cfg, 5);
    Tape t2;
    Tensor y_eval = t2.val(forward(t2, w2, batch, BnMode::eval).fused_logits);
    CHECK(y_train.v != y_eval.v);
}

TEST_CASE("backward: every parameter receives gradient (no dead branch)") {
    ModelConfig cfg = tiny_cfg();
    for (int seed : {1, 2, 3, 4, 5}) {
        ModelWeights w = build_model(cfg, seed);
        Rng rng(static_cast<uint64_t>(seed) + 100);
        Tensor img = random_tensor({2, 3, 16, 16}, rng);
        Tensor tgt = random_probs(2, 4, 16, 16, rng);
        Tensor gt({2, 1, 16, 16});
        for (auto& v : gt.v) v = rng.bernoulli(0.2) ? 1.0f : 0.0f;
        Tape t;
        ModelRunner runner(t, w, BnMode::train);
        ForwardOutput out = runner.forward(img);
        TotalLoss tl = total_loss(out, tgt, gt, LossWeights{});
        t.backward(tl.total);
        for (const auto& [name, var] : runner.params()) {
            double nrm = 0;
            for (float g : t.grad(var).v) nrm += std::abs(g);
            INFO("param ", name, " seed ", seed);
            CHECK(nrm > 0);
        }
        // gradient map covers every learnable parameter
        size_t learnable = 0;
        for (auto& [k, v] : w.t)
            if (!is_bn_running_stat(k)) learnable++;
        CHECK(runner.params().size() == learnable);
    }
}

TEST_CASE("fused head depends on the edge branch") {
    ModelConfig cfg = tiny_cfg();
    ModelWeights w = build_model(cfg, 7);
    Rng rng(8);
    Tensor img = random_tensor({1, 3, 16, 16}, rng);
    Tape t;
    Tensor base = t.val(forward(t, w, img, BnMode::eval).fused_logits);
    ModelWeights w2 = w;
    for (auto& x : w2.t.at("edge.conv.w").v) x += 0.25f;
    Tape t2;
    Tensor bumped = t2.val(forward(t2, w2, img, BnMode::eval).fused_logits);
    CHECK(base.v != bumped.v);
    // parsing (pre-fusion) head must NOT depend on the edge branch
    Tape t3, t4;
    CHECK(t3.val(forward(t3, w, img, BnMode::eval).parsing_logits).v ==
          t4.val(forward(t4, w2, img, BnMode::eval).parsing_logits).v);
}

TEST_CASE("context encoder: pyramid shapes propagate") {
    // feature map 4x4 with grids {1,2,4} exercises pooling to each scale
    ModelConfig cfg = tiny_cfg();
    cfg.pyramid_grids = {1, 2, 4};
    cfg.validate();
    ModelWeights w = build_model(cfg, 11);
    Rng rng(12);
    Tape t;
    // N=2: the 1x1 pyramid cell leaves one element per sample, and train-mode
    // BN needs at least two per channel
    ForwardOutput out = forward(t, w, random_tensor({2, 3, 16, 16}, rng), BnMode::train);
    CHECK(t.val(out.parsing_logits).shape == std::vector<int>{2, 4, 16, 16});
    Tape t1;
    CHECK_THROWS_WITH(forward(t1, w, random_tensor({1, 3, 16, 16}, rng), BnMode::train),
                      doctest::Contains("at least 2 elements"));
}
