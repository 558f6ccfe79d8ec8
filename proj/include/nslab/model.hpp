#pragma once

#include <fstream>
#include <sstream>

#include "nslab/autodiff.hpp"
#include "nslab/checkpoint.hpp"

namespace nslab {

// Miniature three-branch parsing network: a small strided conv backbone,
// pyramid-pooling context module and decoder (parsing branch), a
// class-agnostic edge branch tapping the two backbone stages, and a fusion
// branch that concatenates parsing and edge features to emit refined logits.
struct ModelConfig {
    int input_h = 64, input_w = 64;
    int num_classes = 7;
    int base_channels = 8;
    int proj_channels = 8;               // pyramid-branch projection width
    std::vector<int> pyramid_grids{1, 2, 4};
    int backbone_depth = 3;              // conv-bn-relu blocks; first two are stride 2

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
        if (backbone_depth < 2) throw std::invalid_argument("model: backbone_depth must be >= 2");
        if (input_h % 4 != 0 || input_w % 4 != 0)
            throw std::invalid_argument("model: input size must be divisible by 4");
        if (base_channels < 1 || proj_channels < 1) throw std::invalid_argument("model: channel widths must be positive");
        if (pyramid_grids.empty()) throw std::invalid_argument("model: pyramid_grids must not be empty");
        int prev = 0;
        for (int g : pyramid_grids) {
            if (g <= prev) throw std::invalid_argument("model: pyramid_grids must be strictly increasing");
            if (g > feat_h() || g > feat_w()) throw std::invalid_argument("model: pyramid grid exceeds feature size");
            prev = g;
        }
    }
    int feat_h() const { return input_h / 4; }
    int feat_w() const { return input_w / 4; }
};

struct ConvSpec {
    std::string name;
    int in_ch, out_ch, k, stride, pad;
    bool bn;  // conv-bn-relu block if true, logits head (with bias) if false
};

inline std::vector<ConvSpec> layer_specs(const ModelConfig& cfg) {
    cfg.validate();
    int C = cfg.base_channels, C2 = 2 * cfg.base_channels, P = cfg.proj_channels, K = cfg.num_classes;
    std::vector<ConvSpec> specs;
    specs.push_back({"backbone.0", 3, C, 3, 2, 1, true});
    specs.push_back({"backbone.1", C, C2, 3, 2, 1, true});
    for (int i = 2; i < cfg.backbone_depth; ++i)
        specs.push_back({"backbone." + std::to_string(i), C2, C2, 3, 1, 1, true});
    for (int g : cfg.pyramid_grids) specs.push_back({"context.pool" + std::to_string(g), C2, P, 1, 1, 0, true});
    specs.push_back({"context.out", C2 + static_cast<int>(cfg.pyramid_grids.size()) * P, C2, 1, 1, 0, true});
    specs.push_back({"parsing.conv", C2, C2, 3, 1, 1, true});
    specs.push_back({"parsing.head", C2, K, 1, 1, 0, false});
    specs.push_back({"edge.tap0", C, C, 1, 1, 0, true});
    specs.push_back({"edge.tap1", C2, C, 1, 1, 0, true});
    specs.push_back({"edge.conv", 2 * C, C, 3, 1, 1, true});
    specs.push_back({"edge.head", C, 1, 1, 1, 0, false});
    specs.push_back({"fusion.conv", C2 + C, C2, 3, 1, 1, true});
    specs.push_back({"fusion.head", C2, K, 1, 1, 0, false});
    return specs;
}

inline std::vector<std::string> param_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (const auto& s : layer_specs(cfg)) {
        names.push_back(s.name + ".w");
        if (s.bn) {
            names.push_back(s.name + ".bn.scale");
            names.push_back(s.name + ".bn.shift");
            names.push_back(s.name + ".bn.running_mean");
            names.push_back(s.name + ".bn.running_var");
        } else {
            names.push_back(s.name + ".b");
        }
    }
    return names;
}

inline bool is_bn_running_stat(const std::string& name) {
    return name.ends_with(".bn.running_mean") || name.ends_with(".bn.running_var");
}
inline bool is_weight_decayed(const std::string& name) { return name.ends_with(".w"); }

struct ModelWeights {
    ModelConfig cfg;
    TensorMap t;
};

inline ModelWeights build_model(const ModelConfig& cfg, int seed) {
    cfg.validate();
    Rng rng(static_cast<uint64_t>(seed));
    ModelWeights w;
    w.cfg = cfg;
    for (const auto& s : layer_specs(cfg)) {
        Tensor k({s.out_ch, s.in_ch, s.k, s.k});
        double std_dev = std::sqrt(2.0 / (static_cast<double>(s.in_ch) * s.k * s.k));
        for (auto& x : k.v) x = static_cast<float>(rng.normal() * std_dev);
        w.t.emplace(s.name + ".w", std::move(k));
        if (s.bn) {
            w.t.emplace(s.name + ".bn.scale", Tensor::full({s.out_ch}, 1.0f));
            w.t.emplace(s.name + ".bn.shift", Tensor({s.out_ch}));
            w.t.emplace(s.name + ".bn.running_mean", Tensor({s.out_ch}));
            w.t.emplace(s.name + ".bn.running_var", Tensor::full({s.out_ch}, 1.0f));
        } else {
            w.t.emplace(s.name + ".b", Tensor({s.out_ch}));
        }
    }
    return w;
}

inline void check_name_census(const ModelConfig& cfg, const TensorMap& t) {
    auto names = param_names(cfg);
    if (names.size() != t.size()) throw std::runtime_error("model weights: name census mismatch");
    for (const auto& n : names)
        if (!t.count(n)) throw std::runtime_error("model weights: missing tensor '" + n + "'");
}

struct ForwardOutput {
    Var parsing_logits;  // pre-fusion decoder head, [N,K,H,W]
    Var fused_logits;    // fusion-branch head, [N,K,H,W]
    Var edge_logits;     // [N,1,H,W]
};

// Binds weights onto a tape and runs the network. Parameter vars are cached
// so gradients can be read back after backward(). BN running stats are
// mutated in-place in the ModelWeights (train mode only).
class ModelRunner {
public:
    ModelRunner(Tape& tape, ModelWeights& weights, BnMode mode, std::map<std::string, BnAccum>* accums = nullptr)
        : tape_(tape), w_(weights), mode_(mode), accums_(accums) {
        check_name_census(w_.cfg, w_.t);
        for (const auto& s : layer_specs(w_.cfg)) specs_.emplace(s.name, s);
    }

    Var param(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        auto wt = w_.t.find(name);
        if (wt == w_.t.end()) throw std::runtime_error("model: unknown parameter '" + name + "'");
        Var v = tape_.leaf(wt->second);
        vars_.emplace(name, v);
        return v;
    }

    Var conv_block(Var x, const std::string& name) {
        const ConvSpec& s = specs_.at(name);
        Var zb = tape_.leaf(Tensor({s.out_ch}));  // conv-bn blocks carry no bias
        Var y = conv2d(x, param(name + ".w"), zb, s.stride, s.pad);
        BnAccum* acc = nullptr;
        if (accums_) acc = &(*accums_)[name];
        y = batchnorm(y, param(name + ".bn.scale"), param(name + ".bn.shift"), w_.t.at(name + ".bn.running_mean"),
                      w_.t.at(name + ".bn.running_var"), 0.9f, 1e-5f, mode_, acc);
        return relu(y);
    }

    Var head(Var x, const std::string& name) {
        const ConvSpec& s = specs_.at(name);
        return conv2d(x, param(name + ".w"), param(name + ".b"), s.stride, s.pad);
    }

    // Pyramid pooling: per grid size, average-pool, project, upsample back,
    // concatenate with the input features and project to the output width.
    Var context_encode(Var features) {
        const Tensor& f = tape_.val(features);
        int fh = f.dim(2), fw = f.dim(3);
        std::vector<Var> branches{features};
        for (int g : w_.cfg.pyramid_grids) {
            if (g > fh || g > fw) throw std::invalid_argument("context_encode: grid exceeds feature size");
            Var b = avg_pool(features, g, g);
            b = conv_block(b, "context.pool" + std::to_string(g));
            branches.push_back(bilinear_upsample(b, fh, fw));
        }
        return conv_block(concat_channels(branches), "context.out");
    }

    ForwardOutput forward(const Tensor& image) {
        if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != w_.cfg.input_h || image.dim(3) != w_.cfg.input_w)
            throw std::invalid_argument("forward: image shape " + shape_str(image.shape) + " does not match config");
        int H = w_.cfg.input_h, W = w_.cfg.input_w;
        Var x = tape_.leaf(image);

        Var s0 = conv_block(x, "backbone.0");   // C  @ 1/2
        Var s1 = conv_block(s0, "backbone.1");  // 2C @ 1/4
        Var f = s1;
        for (int i = 2; i < w_.cfg.backbone_depth; ++i) f = conv_block(f, "backbone." + std::to_string(i));

        Var ctx = context_encode(f);
        Var pfeat = conv_block(ctx, "parsing.conv");
        Var parsing_logits = bilinear_upsample(head(pfeat, "parsing.head"), H, W);

        Var e0 = avg_pool(conv_block(s0, "edge.tap0"), w_.cfg.feat_h(), w_.cfg.feat_w());
        Var e1 = conv_block(s1, "edge.tap1");
        Var efeat = conv_block(concat_channels({e0, e1}), "edge.conv");
        Var edge_logits = bilinear_upsample(head(efeat, "edge.head"), H, W);

        Var ffeat = conv_block(concat_channels({pfeat, efeat}), "fusion.conv");
        Var fused_logits = bilinear_upsample(head(ffeat, "fusion.head"), H, W);

        return ForwardOutput{parsing_logits, fused_logits, edge_logits};
    }

    const std::map<std::string, Var>& params() const { return vars_; }
    Tape& tape() { return tape_; }

private:
    Tape& tape_;
    ModelWeights& w_;
    BnMode mode_;
    std::map<std::string, BnAccum>* accums_;
    std::map<std::string, Var> vars_;
    std::map<std::string, ConvSpec> specs_;
};

inline ForwardOutput forward(Tape& tape, ModelWeights& weights, const Tensor& image, BnMode mode) {
    ModelRunner r(tape, weights, mode);
    return r.forward(image);
}

// Plain-text key=value model config serialization.
inline void save_model_config(const std::string& path, const ModelConfig& cfg) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write model config: " + path);
    os << "input_h=" << cfg.input_h << "\ninput_w=" << cfg.input_w << "\nnum_classes=" << cfg.num_classes
       << "\nbase_channels=" << cfg.base_channels << "\nproj_channels=" << cfg.proj_channels
       << "\nbackbone_depth=" << cfg.backbone_depth << "\npyramid_grids=";
    for (size_t i = 0; i < cfg.pyramid_grids.size(); ++i) os << (i ? "," : "") << cfg.pyramid_grids[i];
    os << "\n";
}

inline ModelConfig load_model_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read model config: " + path);
    ModelConfig cfg;
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos || line.empty() || line[0] == '#') continue;
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "input_h") cfg.input_h = std::stoi(val);
        else if (key == "input_w") cfg.input_w = std::stoi(val);
        else if (key == "num_classes") cfg.num_classes = std::stoi(val);
        else if (key == "base_channels") cfg.base_channels = std::stoi(val);
        else if (key == "proj_channels") cfg.proj_channels = std::stoi(val);
        else if (key == "backbone_depth") cfg.backbone_depth = std::stoi(val);
        else if (key == "pyramid_grids") {
            cfg.pyramid_grids.clear();
            std::stringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, ',')) cfg.pyramid_grids.push_back(std::stoi(tok));
        } else throw std::runtime_error("model config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

}  // namespace nslab
