// nslab: synthetic noisy-label segmentation lab.
// Subcommands: synth, train, eval, average-checkpoints, audit-labels, plot-data.

#include <CLI11.hpp>
#include <iostream>

#include "nslab/harness.hpp"

namespace {

nslab::NoiseSpec parse_confusion(nslab::NoiseSpec spec, const std::string& confusion) {
    if (confusion.empty()) return spec;
    std::stringstream ss(confusion);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        int a = 0, b = 0;
        float p = 0.0f;
        if (std::sscanf(tok.c_str(), "%d:%d:%f", &a, &b, &p) != 3)
            throw CLI::ValidationError("--confusion", "expected a:b:p entries, e.g. 3:5:0.15");
        spec.confusion.push_back({a, b, p});
    }
    return spec;
}

int cmd_synth(const std::string& out_dir, int count, int val_count, int seed, int height, int width,
              float clutter, float jitter_radius, float jitter_frac, float mirror_swap, float drop_region,
              const std::string& confusion) {
    nslab::SceneSpec scene;
    scene.canvas_h = height;
    scene.canvas_w = width;
    scene.clutter = clutter;
    nslab::NoiseSpec noise;
    noise.jitter_radius = jitter_radius;
    noise.jitter_frac = jitter_frac;
    noise.mirror_swap = mirror_swap;
    noise.drop_region = drop_region;
    noise = parse_confusion(noise, confusion);
    noise.validate();

    std::filesystem::create_directories(out_dir);
    nslab::Dataset train = nslab::make_dataset(count, scene, noise, static_cast<uint64_t>(seed));
    nslab::write_dataset(out_dir + "/train.nsds", train);
    nslab::NoiseSpec clean;  // validation labels stay clean
    nslab::Dataset val = nslab::make_dataset(val_count, scene, clean, static_cast<uint64_t>(seed) + 0x76616cull);
    nslab::write_dataset(out_dir + "/val.nsds", val);
    std::cout << "wrote " << count << " train / " << val_count << " val samples to " << out_dir << "\n";
    return 0;
}

void print_metrics(const nslab::MetricsReport& m) {
    std::printf("pixel_acc=%.4f mean_acc=%.4f miou=%.4f\n", m.pixel_acc, m.mean_acc, m.miou);
    for (int c = 0; c < m.num_classes; ++c)
        if (!std::isnan(m.per_class_iou[static_cast<size_t>(c)]))
            std::printf("  class %d iou=%.4f\n", c, m.per_class_iou[static_cast<size_t>(c)]);
}

int cmd_average_checkpoints(const std::string& out, const std::vector<std::string>& inputs) {
    // Same fold as the in-loop aggregation: running mean over every tensor.
    nslab::TensorMap agg = nslab::load_tensors(inputs.at(0));
    for (size_t i = 1; i < inputs.size(); ++i) {
        nslab::TensorMap cur = nslab::load_tensors(inputs[i]);
        if (cur.size() != agg.size()) throw std::runtime_error("average-checkpoints: name set mismatch in " + inputs[i]);
        int m = static_cast<int>(i);
        double a = static_cast<double>(m) / (m + 1.0), b = 1.0 / (m + 1.0);
        for (auto& [name, t] : agg) {
            auto it = cur.find(name);
            if (it == cur.end()) throw std::runtime_error("average-checkpoints: missing '" + name + "' in " + inputs[i]);
            for (int64_t j = 0; j < t.numel(); ++j)
                t.v[static_cast<size_t>(j)] = static_cast<float>(a * static_cast<double>(t.v[static_cast<size_t>(j)]) +
                                                                 b * static_cast<double>(it->second.v[static_cast<size_t>(j)]));
        }
    }
    nslab::save_tensors(out, agg);
    std::cout << "averaged " << inputs.size() << " checkpoints into " << out << "\n";
    return 0;
}

int cmd_plot_data(const std::string& csv_path, const std::string& out_path) {
    std::ifstream is(csv_path);
    if (!is) throw std::runtime_error("plot-data: cannot open " + csv_path);
    std::ofstream os(out_path, std::ios::binary);
    if (!os) throw std::runtime_error("plot-data: cannot write " + out_path);
    os << "cycle,pixel_acc,mean_acc,miou,corrected_frac,damage_frac\n";
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
        if (cols.size() < 15 || cols[1] != "eval") continue;
        os << cols[2] << ',' << cols[10] << ',' << cols[11] << ',' << cols[12] << ',' << cols[13] << ',' << cols[14]
           << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic noisy-label segmentation training lab"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic noisy-label dataset (train.nsds + clean val.nsds)");
    std::string out_dir = "data";
    int count = 200, val_count = 50, seed = 1, height = 64, width = 64;
    float clutter = 0.6f, jitter_radius = 2.0f, jitter_frac = 0.5f, mirror_swap = 0.15f, drop_region = 0.0f;
    std::string confusion = "3:5:0.15,4:6:0.15";
    synth->add_option("--out", out_dir, "output directory");
    synth->add_option("--count", count, "training samples");
    synth->add_option("--val-count", val_count, "validation samples (clean labels)");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--height", height);
    synth->add_option("--width", width);
    synth->add_option("--clutter", clutter, "background clutter level");
    synth->add_option("--jitter-radius", jitter_radius, "boundary jitter radius, px");
    synth->add_option("--jitter-frac", jitter_frac, "fraction of boundary pixels jittered");
    synth->add_option("--mirror-swap", mirror_swap, "probability of swapping left/right pairs");
    synth->add_option("--drop-region", drop_region, "probability of dropping the smallest part");
    synth->add_option("--confusion", confusion, "class confusion entries a:b:p, comma separated");

    // train
    auto* train = app.add_subcommand("train", "run self-correction training per config");
    std::string config_path, data_dir, run_out = "out", run_id = "run", ma = "on", lr_refine = "on";
    std::string eval_against = "clean";
    int cycles = -1, cycle_len = -1, init_epochs = -1, warmup = -1, batch_size = -1, train_seed = -1;
    int base_channels = -1, backbone_depth = -1;
    double eta_max = -1.0, eta_min = -1.0;
    train->add_option("--config", config_path, "experiment config file (key=value with sections)");
    train->add_option("--data", data_dir, "dataset directory (train.nsds/val.nsds)");
    train->add_option("--out", run_out, "output directory");
    train->add_option("--run-id", run_id);
    train->add_option("--ma", ma, "model aggregation on|off");
    train->add_option("--lr-refine", lr_refine, "label refinement on|off");
    train->add_option("--cycles", cycles, "number of self-correction cycles M");
    train->add_option("--cycle-len", cycle_len, "epochs per cycle T");
    train->add_option("--init-epochs", init_epochs);
    train->add_option("--warmup", warmup);
    train->add_option("--eta-max", eta_max);
    train->add_option("--eta-min", eta_min);
    train->add_option("--batch-size", batch_size);
    train->add_option("--seed", train_seed);
    train->add_option("--base-channels", base_channels);
    train->add_option("--backbone-depth", backbone_depth);
    train->add_option("--eval-against", eval_against, "clean|noisy");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string weights_path, model_cfg_path, eval_data;
    std::string eval_mask = "clean";
    int eval_batch = 8;
    eval->add_option("--weights", weights_path)->required();
    eval->add_option("--model-config", model_cfg_path)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--against", eval_mask, "clean|noisy");
    eval->add_option("--batch-size", eval_batch);

    // average-checkpoints
    auto* avg = app.add_subcommand("average-checkpoints", "running-mean aggregation of checkpoint files");
    std::string avg_out = "averaged.nslb";
    std::vector<std::string> avg_inputs;
    avg->add_option("--out", avg_out);
    avg->add_option("inputs", avg_inputs, "checkpoints in cycle order")->required()->expected(-2);

    // audit-labels
    auto* audit = app.add_subcommand("audit-labels", "corrected/damaged fraction of a label store vs clean masks");
    std::string audit_labels, audit_data;
    audit->add_option("--labels", audit_labels)->required();
    audit->add_option("--data", audit_data)->required();

    // plot-data
    auto* plot = app.add_subcommand("plot-data", "extract per-cycle metric curves from a run CSV");
    std::string plot_csv, plot_out = "curves.csv";
    plot->add_option("--csv", plot_csv)->required();
    plot->add_option("--out", plot_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(out_dir, count, val_count, seed, height, width, clutter, jitter_radius, jitter_frac,
                             mirror_swap, drop_region, confusion);
        if (train->parsed()) {
            nslab::ExperimentConfig cfg;
            if (!config_path.empty()) cfg = nslab::parse_experiment_config(config_path);
            if (!data_dir.empty()) cfg.data_dir = data_dir;
            cfg.out_dir = run_out;
            cfg.run_id = run_id;
            if (train->count("--ma")) cfg.model_aggregation = (ma == "on");
            if (train->count("--lr-refine")) cfg.label_refinement = (lr_refine == "on");
            if (cycles >= 0) cfg.schedule.num_cycles = cycles;
            if (cycle_len >= 0) cfg.schedule.cycle_len = cycle_len;
            if (init_epochs >= 0) cfg.schedule.init_epochs = init_epochs;
            if (warmup >= 0) cfg.schedule.warmup_epochs = warmup;
            if (eta_max >= 0) cfg.schedule.eta_max = eta_max;
            if (eta_min >= 0) cfg.schedule.eta_min = eta_min;
            if (batch_size >= 0) cfg.schedule.batch_size = batch_size;
            if (train_seed >= 0) cfg.schedule.seed = train_seed;
            if (base_channels >= 0) cfg.model.base_channels = base_channels;
            if (base_channels >= 0) cfg.model.proj_channels = base_channels;
            if (backbone_depth >= 0) cfg.model.backbone_depth = backbone_depth;
            if (train->count("--eval-against")) cfg.eval_against = eval_against;
            nslab::ExperimentResult res = nslab::run_experiment(cfg);
            const auto& last = res.series.back();
            std::printf("final (cycle %d): ", last.cycle);
            print_metrics(last.metrics);
            std::printf("labels: corrected=%.4f damaged=%.4f\n", last.audit.corrected_frac, last.audit.damage_frac);
            std::printf("csv: %s\n", res.csv_path.c_str());
            return 0;
        }
        if (eval->parsed()) {
            nslab::ModelConfig mc = nslab::load_model_config(model_cfg_path);
            nslab::ModelWeights w;
            w.cfg = mc;
            w.t = nslab::load_tensors(weights_path);
            nslab::check_name_census(mc, w.t);
            nslab::Dataset ds = nslab::read_dataset(eval_data);
            print_metrics(nslab::evaluate_model(w, ds, eval_batch, eval_mask == "clean"));
            return 0;
        }
        if (avg->parsed()) return cmd_average_checkpoints(avg_out, avg_inputs);
        if (audit->parsed()) {
            nslab::SoftLabelStore st = nslab::load_label_store(audit_labels);
            nslab::Dataset ds = nslab::read_dataset(audit_data);
            nslab::LabelAudit a = nslab::label_noise_audit(st, ds);
            std::printf("corrected_frac=%.6f damage_frac=%.6f corrupted_pixels=%lld\n", a.corrected_frac, a.damage_frac,
                        static_cast<long long>(a.corrupted_pixels));
            return 0;
        }
        if (plot->parsed()) return cmd_plot_data(plot_csv, plot_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
