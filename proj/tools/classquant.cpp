#include <cstdio>
#include <cstdlib>
#include <list>
#include <string>

#include "CLI11.hpp"

#include "cq/config.hpp"
#include "cq/dataset.hpp"
#include "cq/pipeline.hpp"

namespace {

// Command-line overrides layered on top of the JSON config. Each option
// only takes effect when the user actually passed it.
struct Overrides {
    std::string config_path;
    uint64_t seed = 0;
    std::string dataset, format, idx_labels, output_dir;
    double budget = 0, step = 0, target_accuracy = 0, decay = 0, epsilon = 0, alpha = 0;
    int max_bits = 0, act_bits = 0, step_divisor = 0, eval_samples = 0, samples_per_class = 0;
    int train_epochs = 0, refine_epochs = 0, batch_size = 0;
    double train_lr = 0, refine_lr = 0;
    std::string readout;
    bool kl_as_printed = false, freeze_ranges = false, calibrate_on_float = false;

    CLI::Option *o_seed = nullptr, *o_dataset = nullptr, *o_format = nullptr,
                *o_idx_labels = nullptr, *o_output = nullptr, *o_budget = nullptr,
                *o_step = nullptr, *o_target = nullptr, *o_decay = nullptr, *o_eps = nullptr,
                *o_alpha = nullptr, *o_max_bits = nullptr, *o_act_bits = nullptr,
                *o_divisor = nullptr, *o_eval = nullptr, *o_spc = nullptr, *o_tepochs = nullptr,
                *o_repochs = nullptr, *o_batch = nullptr, *o_tlr = nullptr, *o_rlr = nullptr,
                *o_readout = nullptr, *o_klap = nullptr, *o_freeze = nullptr, *o_cof = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "JSON run config")->required();
        o_seed = cmd->add_option("--seed", seed, "override the run seed");
        o_dataset = cmd->add_option("--dataset", dataset, "dataset path");
        o_format = cmd->add_option("--format", format, "dataset format: csv or idx");
        o_idx_labels = cmd->add_option("--idx-labels", idx_labels, "IDX label file");
        o_output = cmd->add_option("--output-dir", output_dir, "artifact directory");
        o_budget = cmd->add_option("--budget", budget, "average bit-width budget");
        o_max_bits = cmd->add_option("--max-bits", max_bits, "highest per-unit bit-width");
        o_act_bits = cmd->add_option("--act-bits", act_bits, "activation bit-width");
        o_step = cmd->add_option("--step", step, "threshold step size");
        o_divisor = cmd->add_option("--step-divisor", step_divisor,
                                    "auto step = score span / divisor");
        o_target = cmd->add_option("--target-accuracy", target_accuracy,
                                   "first accuracy floor of the search");
        o_decay = cmd->add_option("--decay", decay, "per-threshold accuracy floor decay");
        o_eval = cmd->add_option("--eval-samples", eval_samples,
                                 "validation samples used by search probes");
        o_eps = cmd->add_option("--epsilon", epsilon, "activity threshold for scoring");
        o_spc = cmd->add_option("--samples-per-class", samples_per_class,
                                "scoring batch size per class");
        o_readout = cmd->add_option("--readout", readout, "scoring readout: true-logit or logit-l1");
        o_tepochs = cmd->add_option("--train-epochs", train_epochs, "float training epochs");
        o_tlr = cmd->add_option("--train-lr", train_lr, "float training learning rate");
        o_repochs = cmd->add_option("--refine-epochs", refine_epochs, "distillation epochs");
        o_rlr = cmd->add_option("--refine-lr", refine_lr, "distillation learning rate");
        o_batch = cmd->add_option("--batch-size", batch_size, "batch size for train and refine");
        o_alpha = cmd->add_option("--alpha", alpha, "weight of the CE term in distillation");
        o_klap = cmd->add_flag("--kl-as-printed", kl_as_printed,
                               "negate the distillation divergence term");
        o_freeze = cmd->add_flag("--freeze-weight-ranges", freeze_ranges,
                                 "pin quantization ranges to the starting weights");
        o_cof = cmd->add_flag("--calibrate-on-float", calibrate_on_float,
                              "calibrate activation ranges on the float model");
    }

    cq::RunConfig load() const {
        cq::RunConfig cfg = cq::load_config(config_path);
        if (*o_seed) cfg.seed = seed;
        if (*o_dataset) cfg.dataset_path = dataset;
        if (*o_format) cfg.dataset_format = format;
        if (*o_idx_labels) cfg.idx_labels_path = idx_labels;
        if (*o_output) {
            cfg.output_dir = output_dir;
        } else if (const char* env = std::getenv("CLASSQUANT_OUTPUT_DIR"); env && *env) {
            cfg.output_dir = env;
        }
        if (*o_budget) cfg.search.budget = budget;
        if (*o_max_bits) cfg.search.max_bits = max_bits;
        if (*o_act_bits) cfg.quantize.act_bits = act_bits;
        if (*o_step) cfg.search.step = step;
        if (*o_divisor) cfg.search.step_divisor = step_divisor;
        if (*o_target) cfg.search.target_accuracy = target_accuracy;
        if (*o_decay) cfg.search.decay = decay;
        if (*o_eval) cfg.search.eval_samples = eval_samples;
        if (*o_eps) cfg.score.epsilon = epsilon;
        if (*o_spc) cfg.score.samples_per_class = samples_per_class;
        if (*o_readout) {
            cq::readout_from_name(readout);
            cfg.score.readout = readout;
        }
        if (*o_tepochs) cfg.train.epochs = train_epochs;
        if (*o_tlr) cfg.train.lr = train_lr;
        if (*o_repochs) cfg.refine.epochs = refine_epochs;
        if (*o_rlr) cfg.refine.lr = refine_lr;
        if (*o_batch) {
            cfg.train.batch_size = batch_size;
            cfg.refine.batch_size = batch_size;
        }
        if (*o_alpha) cfg.refine.alpha = alpha;
        if (*o_klap) cfg.refine.kl_as_printed = true;
        if (*o_freeze) cfg.refine.freeze_weight_ranges = true;
        if (*o_cof) cfg.quantize.calibrate_on_float = true;
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"class-aware mixed-precision quantization of small networks"};
    app.require_subcommand(1);

    // synthetic dataset generator
    auto* synth = app.add_subcommand("synth", "write a bundled synthetic dataset as CSV");
    std::string synth_kind = "glyphs", synth_out;
    uint64_t synth_seed = 0;
    int synth_per_class = 400, synth_dim = 16, synth_classes = 10;
    synth->add_option("--kind", synth_kind, "blobs or glyphs")
        ->check(CLI::IsMember({"blobs", "glyphs"}));
    synth->add_option("--out", synth_out, "output CSV path")->required();
    synth->add_option("--seed", synth_seed, "generator seed")->required();
    synth->add_option("--per-class", synth_per_class, "samples per class");
    synth->add_option("--dim", synth_dim, "feature count (blobs only)");
    synth->add_option("--classes", synth_classes, "class count (blobs only)");

    // list, not vector: CLI11 binds to addresses inside the Overrides
    std::list<std::pair<CLI::App*, Overrides>> stages;
    auto add_stage = [&](const char* name, const char* desc) {
        stages.emplace_back(app.add_subcommand(name, desc), Overrides{});
        stages.back().second.attach(stages.back().first);
        return stages.back().first;
    };
    add_stage("train", "train the full-precision baseline");
    add_stage("score", "compute class-aware unit importance scores");
    add_stage("search", "find per-unit bit-widths under the budget");
    add_stage("quantize", "apply the bit arrangement and calibrate activations");
    add_stage("refine", "distill the quantized model against the float teacher");
    add_stage("report", "summarize artifacts of a run");
    auto* pipe = add_stage("pipeline", "run every stage in order");
    bool no_resume = false;
    pipe->add_flag("--no-resume", no_resume, "rerun stages even when their outputs exist");

    CLI11_PARSE(app, argc, argv);

    if (*synth) {
        try {
            cq::RngStream rng(synth_seed, "synth");
            cq::Dataset ds = synth_kind == "blobs"
                                 ? cq::synth_blobs(synth_per_class, synth_classes, synth_dim, rng)
                                 : cq::synth_glyphs(synth_per_class, rng);
            cq::write_csv(ds, synth_out);
            std::printf("wrote %zu samples (%d classes, %d features) to %s\n",
                        ds.features.size(), ds.num_classes, ds.feature_len, synth_out.c_str());
        } catch (const std::exception& e) {
            std::fprintf(stderr, "synth failed: %s\n", e.what());
            return 1;
        }
        return 0;
    }

    for (auto& [cmd, ov] : stages) {
        if (!cmd->parsed()) continue;
        cq::RunConfig cfg;
        try {
            cfg = ov.load();
        } catch (const std::exception& e) {
            std::fprintf(stderr, "config error: %s\n", e.what());
            return 1;
        }
        try {
            if (cmd->get_name() == "pipeline") {
                cq::run_pipeline(cfg, !no_resume);
            } else {
                cq::run_stage(cfg, cmd->get_name());
                std::printf("[%s] done\n", cmd->get_name().c_str());
            }
        } catch (const std::exception& e) {
            std::fprintf(stderr, "[%s] failed: %s\n", cmd->get_name().c_str(), e.what());
            return 2;
        }
        return 0;
    }
    return 0;
}
