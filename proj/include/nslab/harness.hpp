#pragma once

#include <cstdio>

#include "nslab/metrics.hpp"

namespace nslab {

struct ExperimentConfig {
    std::string data_dir;             // expects train.nsds and val.nsds
    ModelConfig model;
    ScheduleConfig schedule;
    LossWeights loss;
    bool model_aggregation = true;
    bool label_refinement = true;
    std::string eval_against = "clean";  // or "noisy"
    std::string out_dir;
    std::string run_id = "run";

    void validate() const {
        model.validate();
        schedule.validate();
        loss.validate();
        if (eval_against != "clean" && eval_against != "noisy")
            throw std::invalid_argument("experiment: eval_against must be clean or noisy");
        if (data_dir.empty() || out_dir.empty()) throw std::invalid_argument("experiment: data_dir and out_dir required");
    }
};

struct CyclePoint {
    int cycle = 0;
    MetricsReport metrics;
    LabelAudit audit;
};

struct ExperimentResult {
    std::vector<CyclePoint> series;  // post-init (cycle 0) plus each cycle
    RunLog log;
    std::string csv_path;
};

namespace detail {
inline std::string fmt_g(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}
}  // namespace detail

inline const char* kCsvHeader =
    "run_id,phase,cycle,epoch,lr,loss_cls,loss_miou,loss_edge,loss_consistency,loss_total,"
    "pixel_acc,mean_acc,miou,corrected_frac,damage_frac";

// Trains per config, evaluates on the held-out validation split after the
// init phase and after every cycle, and writes one CSV row per training
// epoch plus one "eval" row per evaluation point.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    Dataset train = read_dataset((fs::path(cfg.data_dir) / "train.nsds").string());
    Dataset val = read_dataset((fs::path(cfg.data_dir) / "val.nsds").string());
    if (train.num_classes != cfg.model.num_classes || train.h != cfg.model.input_h || train.w != cfg.model.input_w)
        throw std::invalid_argument("experiment: dataset geometry does not match model config");
    fs::create_directories(cfg.out_dir);

    ExperimentResult res;
    bool against_clean = cfg.eval_against == "clean";
    RunHooks hooks;
    hooks.on_eval = [&](int cycle, ModelWeights& w, const SoftLabelStore& store) {
        CyclePoint pt;
        pt.cycle = cycle;
        pt.metrics = evaluate_model(w, val, cfg.schedule.batch_size, against_clean);
        pt.audit = label_noise_audit(store, train);
        res.series.push_back(std::move(pt));
    };

    SchpOptions opt;
    opt.model_aggregation = cfg.model_aggregation;
    opt.label_refinement = cfg.label_refinement;
    opt.loss_weights = cfg.loss;
    opt.out_dir = cfg.out_dir;
    SchpResult run = run_schp(cfg.schedule, cfg.model, train, opt, &hooks);
    res.log = std::move(run.log);

    // CSV: per-epoch loss rows in global order, with the eval row for the
    // init phase / each cycle inserted right after that span's last epoch.
    res.csv_path = (fs::path(cfg.out_dir) / (cfg.run_id + ".csv")).string();
    std::ofstream os(res.csv_path, std::ios::binary);
    if (!os) throw std::runtime_error("experiment: cannot write CSV: " + res.csv_path);
    os << kCsvHeader << "\n";
    auto eval_row = [&](const CyclePoint& pt) {
        os << cfg.run_id << ",eval," << pt.cycle << ",,,,,,,," << detail::fmt_g(pt.metrics.pixel_acc) << ','
           << detail::fmt_g(pt.metrics.mean_acc) << ',' << detail::fmt_g(pt.metrics.miou) << ','
           << detail::fmt_g(pt.audit.corrected_frac) << ',' << detail::fmt_g(pt.audit.damage_frac) << "\n";
    };
    size_t next_eval = 0;
    int prev_cycle = 0;
    std::string prev_phase = "init";
    for (const auto& ep : res.log.epochs) {
        if ((ep.phase != prev_phase || ep.cycle != prev_cycle) && next_eval < res.series.size()) {
            eval_row(res.series[next_eval]);
            ++next_eval;
        }
        prev_phase = ep.phase;
        prev_cycle = ep.cycle;
        os << cfg.run_id << ',' << ep.phase << ',' << ep.cycle << ',' << ep.epoch << ',' << detail::fmt_g(ep.lr) << ','
           << detail::fmt_g(ep.mean_loss.cls) << ',' << detail::fmt_g(ep.mean_loss.miou) << ','
           << detail::fmt_g(ep.mean_loss.edge) << ',' << detail::fmt_g(ep.mean_loss.consistency) << ','
           << detail::fmt_g(ep.mean_loss.total) << ",,,,,\n";
    }
    while (next_eval < res.series.size()) {
        eval_row(res.series[next_eval]);
        ++next_eval;
    }
    if (!os) throw std::runtime_error("experiment: CSV write failed");
    return res;
}

// ---------------------------------------------------------------------------
// Plain-text key=value config file with [sections]
// ---------------------------------------------------------------------------

inline ExperimentConfig parse_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    ExperimentConfig cfg;
    std::string line, section;
    int lineno = 0;
    auto on_off = [&](const std::string& v) {
        if (v == "on" || v == "true" || v == "1") return true;
        if (v == "off" || v == "false" || v == "0") return false;
        throw std::runtime_error("config: expected on/off at line " + std::to_string(lineno));
    };
    while (std::getline(is, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("config: bad line " + std::to_string(lineno));
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (section == "model") {
            if (key == "input_h") cfg.model.input_h = std::stoi(val);
            else if (key == "input_w") cfg.model.input_w = std::stoi(val);
            else if (key == "num_classes") cfg.model.num_classes = std::stoi(val);
            else if (key == "base_channels") cfg.model.base_channels = std::stoi(val);
            else if (key == "proj_channels") cfg.model.proj_channels = std::stoi(val);
            else if (key == "backbone_depth") cfg.model.backbone_depth = std::stoi(val);
            else if (key == "pyramid_grids") {
                cfg.model.pyramid_grids.clear();
                std::stringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ',')) cfg.model.pyramid_grids.push_back(std::stoi(tok));
            } else throw std::runtime_error("config: unknown model key '" + key + "'");
        } else if (section == "schedule") {
            if (key == "init_epochs") cfg.schedule.init_epochs = std::stoi(val);
            else if (key == "cycle_len") cfg.schedule.cycle_len = std::stoi(val);
            else if (key == "num_cycles") cfg.schedule.num_cycles = std::stoi(val);
            else if (key == "eta_max") cfg.schedule.eta_max = std::stod(val);
            else if (key == "eta_min") cfg.schedule.eta_min = std::stod(val);
            else if (key == "warmup_epochs") cfg.schedule.warmup_epochs = std::stoi(val);
            else if (key == "momentum") cfg.schedule.momentum = std::stof(val);
            else if (key == "weight_decay") cfg.schedule.weight_decay = std::stof(val);
            else if (key == "batch_size") cfg.schedule.batch_size = std::stoi(val);
            else if (key == "seed") cfg.schedule.seed = std::stoi(val);
            else throw std::runtime_error("config: unknown schedule key '" + key + "'");
        } else if (section == "loss") {
            if (key == "lambda1") cfg.loss.lambda1 = std::stof(val);
            else if (key == "lambda2") cfg.loss.lambda2 = std::stof(val);
            else if (key == "lambda3") cfg.loss.lambda3 = std::stof(val);
            else throw std::runtime_error("config: unknown loss key '" + key + "'");
        } else if (section == "run") {
            if (key == "data_dir") cfg.data_dir = val;
            else if (key == "out_dir") cfg.out_dir = val;
            else if (key == "run_id") cfg.run_id = val;
            else if (key == "ma") cfg.model_aggregation = on_off(val);
            else if (key == "lr_refine") cfg.label_refinement = on_off(val);
            else if (key == "eval_against") cfg.eval_against = val;
            else throw std::runtime_error("config: unknown run key '" + key + "'");
        } else {
            throw std::runtime_error("config: key outside a known section at line " + std::to_string(lineno));
        }
    }
    return cfg;
}

}  // namespace nslab
