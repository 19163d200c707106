#include "cq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "json.hpp"

#include "cq/fileio.hpp"
#include "cq/model_io.hpp"

namespace cq {
namespace {

using nlohmann::json;

std::string join(const std::string& dir, const char* name) {
    return (std::filesystem::path(dir) / name).string();
}

}  // namespace

Artifacts::Artifacts(const std::string& d)
    : dir(d),
      float_model(join(d, "float_model.bin")),
      train_log(join(d, "train_log.csv")),
      train_metrics(join(d, "train_metrics.json")),
      scores(join(d, "scores.txt")),
      arrangement(join(d, "arrangement.txt")),
      search_trace(join(d, "search_trace.csv")),
      search_metrics(join(d, "search_metrics.json")),
      quantized_model(join(d, "quantized_model.bin")),
      quantize_metrics(join(d, "quantize_metrics.json")),
      refined_model(join(d, "refined_model.bin")),
      refine_log(join(d, "refine_log.csv")),
      refine_metrics(join(d, "refine_metrics.json")),
      report_dir(join(d, "report")),
      summary(join(report_dir, "summary.txt")),
      score_histogram(join(report_dir, "score_histogram.csv")),
      bit_distribution(join(report_dir, "bit_distribution.csv")),
      accuracy_csv(join(report_dir, "accuracy.csv")) {}

namespace {

struct Prepared {
    Dataset data;
    Splits splits;
    Network blank;  // architecture from the config, weights uninitialized
};

Prepared prepare(const RunConfig& cfg) {
    if (!cfg.seed_set) throw ConfigError("run config is missing the seed");
    ModelPlan plan = resolve_model(cfg.model);
    Prepared p;
    p.blank = build_network(plan.input, plan.layers);

    if (cfg.dataset_path.empty()) throw ConfigError("run config is missing the dataset path");
    if (cfg.dataset_format == "idx") {
        if (cfg.idx_labels_path.empty())
            throw ConfigError("idx format needs 'idx_labels' for the label file");
        p.data = ingest_idx(cfg.dataset_path, cfg.idx_labels_path, p.blank.num_classes);
    } else {
        p.data = ingest_csv(cfg.dataset_path, p.blank.num_classes);
    }
    if (p.data.feature_len != static_cast<int>(p.blank.input_size()))
        throw ConfigError("dataset has " + std::to_string(p.data.feature_len) +
                          " features but the model expects " +
                          std::to_string(p.blank.input_size()));

    RngStream split_rng(cfg.seed, "splits");
    p.splits = make_splits(static_cast<int64_t>(p.data.features.size()), cfg.splits, split_rng);
    if (p.splits.train.empty() || p.splits.val.empty() || p.splits.calib.empty())
        throw ConfigError("dataset too small: a required split came out empty");
    return p;
}

void write_json(const std::string& path, const json& j) {
    atomic_write(path, j.dump(2) + "\n");
}

json read_json(const std::string& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

// Unit list for the search, in network order, with scores pulled from the
// score file. Every quantizable unit must be covered.
std::vector<SearchUnit> units_from_scores(const Network& net, const ScoreFile& sf) {
    std::map<std::pair<int, int>, double> phi;
    for (const auto& u : sf.units) {
        if (!phi.emplace(std::make_pair(u.layer, u.unit), u.phi).second)
            throw std::runtime_error("score file repeats unit (" + std::to_string(u.layer) + ", " +
                                     std::to_string(u.unit) + ")");
    }
    std::vector<SearchUnit> units;
    for (const auto& qu : net.quant_units()) {
        auto it = phi.find({qu.layer, qu.unit});
        if (it == phi.end())
            throw std::runtime_error("score file misses unit (" + std::to_string(qu.layer) + ", " +
                                     std::to_string(qu.unit) + ")");
        units.push_back({qu.layer, qu.unit, it->second, qu.weight_count});
    }
    if (units.size() != sf.units.size())
        throw std::runtime_error("score file covers units the model does not have");
    return units;
}

std::vector<int> eval_subset_indices(const RunConfig& cfg, const Splits& splits) {
    std::vector<int> idx = splits.val;
    if (cfg.search.eval_samples > 0 &&
        static_cast<size_t>(cfg.search.eval_samples) < idx.size()) {
        RngStream rng(cfg.seed, "search-eval");
        rng.shuffle(idx);
        idx.resize(cfg.search.eval_samples);
    }
    return idx;
}

BitArrangement all_max_arrangement(const Network& net, int max_bits, int act_bits) {
    BitArrangement arr;
    arr.max_bits = max_bits;
    arr.act_bits = act_bits;
    arr.thresholds.assign(max_bits, 0.0);
    for (const auto& u : net.quant_units()) arr.units.push_back({u.layer, u.unit, max_bits});
    arr.average_bits = static_cast<double>(max_bits);
    return arr;
}

}  // namespace

void stage_train(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Artifacts art(cfg.output_dir);

    Network net = p.blank;
    RngStream init_rng(cfg.seed, "init");
    init_weights(net, init_rng);

    Dataset tr = subset(p.data, p.splits.train);
    Dataset va = subset(p.data, p.splits.val);
    Dataset te = subset(p.data, p.splits.test);

    RngStream train_rng(cfg.seed, "train");
    auto log = train_float(net, tr.features, tr.labels, va.features, va.labels, cfg.train,
                           train_rng);
    save_model(net, art.float_model);
    save_epoch_log(log, art.train_log);

    json m;
    m["float_val_accuracy"] = evaluate_accuracy(net, va.features, va.labels);
    m["float_test_accuracy"] =
        te.features.empty() ? -1.0 : evaluate_accuracy(net, te.features, te.labels);
    m["train_samples"] = tr.features.size();
    m["epochs"] = cfg.train.epochs;
    write_json(art.train_metrics, m);
}

void stage_score(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Artifacts art(cfg.output_dir);
    Network net = load_model(art.float_model).net;

    Dataset va = subset(p.data, p.splits.val);
    ScoreConfig sc;
    sc.epsilon = cfg.score.epsilon;
    sc.samples_per_class = cfg.score.samples_per_class;
    sc.readout = readout_from_name(cfg.score.readout);

    RngStream rng(cfg.seed, "score");
    ImportanceTable table = score_network(net, va.features, va.labels, sc, rng);
    table.model_hash = model_file_hash(art.float_model);
    save_scores(table, art.scores);
}

void stage_search(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Artifacts art(cfg.output_dir);
    Network net = load_model(art.float_model).net;

    ScoreFile sf = load_scores(art.scores);
    uint64_t hash = model_file_hash(art.float_model);
    if (sf.model_hash != hash)
        throw std::runtime_error(art.scores + ": scores were computed for a different model");
    std::vector<SearchUnit> units = units_from_scores(net, sf);

    Dataset eval_set = subset(p.data, eval_subset_indices(cfg, p.splits));
    Dataset calib = subset(p.data, p.splits.calib);

    SearchConfig scfg;
    scfg.budget = cfg.search.budget;
    scfg.max_bits = cfg.search.max_bits;
    scfg.act_bits = cfg.quantize.act_bits;
    scfg.step = cfg.search.step;
    scfg.step_divisor = cfg.search.step_divisor;
    scfg.target_accuracy = cfg.search.target_accuracy;
    scfg.decay = cfg.search.decay;

    // Activation ranges are calibrated once, on the fully quantized
    // starting point, and reused for every accuracy probe.
    QuantizedView start =
        apply_arrangement(net, all_max_arrangement(net, scfg.max_bits, scfg.act_bits));
    ActQuant act = calibrate_activations(start.net, calib.features, scfg.act_bits);

    double baseline = evaluate_accuracy(net, eval_set.features, eval_set.labels);
    EvalFn eval = [&](const BitArrangement& arr) {
        QuantizedView qv = apply_arrangement(net, arr);
        return evaluate_accuracy(qv.net, eval_set.features, eval_set.labels, &act);
    };

    SearchResult res = run_search(units, scfg, eval, baseline);
    save_arrangement(res.arrangement, art.arrangement);
    save_trace(res.trace, art.search_trace);

    json m;
    m["average_bits"] = res.avg_bits;
    m["baseline_accuracy"] = baseline;
    m["final_accuracy"] = eval(res.arrangement);
    m["steps"] = res.trace.size();
    m["fallback_used"] = res.fallback_used;
    m["accuracy_targets"] = res.targets;
    m["thresholds"] = res.thresholds.p;
    write_json(art.search_metrics, m);
}

void stage_quantize(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Artifacts art(cfg.output_dir);
    Network net = load_model(art.float_model).net;
    BitArrangement arr = load_arrangement(art.arrangement);

    Dataset calib = subset(p.data, p.splits.calib);
    Dataset va = subset(p.data, p.splits.val);
    Dataset te = subset(p.data, p.splits.test);

    QuantizedView qv = apply_arrangement(net, arr);
    const Network& calib_net = cfg.quantize.calibrate_on_float ? net : qv.net;
    ActQuant act = calibrate_activations(calib_net, calib.features, cfg.quantize.act_bits);

    save_model(qv.net, art.quantized_model, &act);

    json m;
    m["average_bits"] = average_bitwidth(arr, net);
    m["quantized_val_accuracy"] = evaluate_accuracy(qv.net, va.features, va.labels, &act);
    m["quantized_test_accuracy"] =
        te.features.empty() ? -1.0 : evaluate_accuracy(qv.net, te.features, te.labels, &act);
    write_json(art.quantize_metrics, m);
}

void stage_refine(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Artifacts art(cfg.output_dir);
    Network teacher = load_model(art.float_model).net;
    BitArrangement arr = load_arrangement(art.arrangement);

    SavedModel quant = load_model(art.quantized_model);
    if (!quant.has_act)
        throw std::runtime_error(art.quantized_model + ": missing activation ranges");

    Dataset tr = subset(p.data, p.splits.train);
    Dataset va = subset(p.data, p.splits.val);
    Dataset te = subset(p.data, p.splits.test);

    RngStream rng(cfg.seed, "refine");
    RefineResult res = refine(teacher, teacher, arr, quant.act, tr.features, tr.labels,
                              va.features, va.labels, cfg.refine, rng);

    save_model(res.deployed.net, art.refined_model, &quant.act);
    save_refine_log(res.log, art.refine_log);

    json m;
    m["refined_val_accuracy"] = res.final_val_accuracy;
    m["refined_test_accuracy"] =
        te.features.empty()
            ? -1.0
            : evaluate_accuracy(res.deployed.net, te.features, te.labels, &quant.act);
    m["epochs"] = cfg.refine.epochs;
    m["kl_as_printed"] = cfg.refine.kl_as_printed;
    write_json(art.refine_metrics, m);
}

namespace {

// Everything the report can show, assembled from whichever artifacts are
// present; absent pieces become named gaps instead of failures.
struct ReportInputs {
    json train, search, quantize, refine;
    bool has_train = false, has_search = false, has_quantize = false, has_refine = false;
    ScoreFile scores;
    bool has_scores = false;
    BitArrangement arr;
    bool has_arr = false;
    std::vector<std::string> gaps;
};

ReportInputs gather(const Artifacts& art) {
    ReportInputs in;
    auto try_json = [&](const std::string& path, json& out, bool& flag, const char* what) {
        if (std::filesystem::exists(path)) {
            out = read_json(path);
            flag = true;
        } else {
            in.gaps.push_back(std::string(what) + " (" + path + " not found)");
        }
    };
    try_json(art.train_metrics, in.train, in.has_train, "float training metrics");
    try_json(art.search_metrics, in.search, in.has_search, "search metrics");
    try_json(art.quantize_metrics, in.quantize, in.has_quantize, "quantized model metrics");
    try_json(art.refine_metrics, in.refine, in.has_refine, "refined model metrics");
    if (std::filesystem::exists(art.scores)) {
        in.scores = load_scores(art.scores);
        in.has_scores = true;
    } else {
        in.gaps.push_back("unit scores (" + art.scores + " not found)");
    }
    if (std::filesystem::exists(art.arrangement)) {
        in.arr = load_arrangement(art.arrangement);
        in.has_arr = true;
    } else {
        in.gaps.push_back("bit arrangement (" + art.arrangement + " not found)");
    }
    return in;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
    return std::string(buf);
}

double jnum(const json& j, const char* key) {
    return j.contains(key) ? j.at(key).get<double>() : -1.0;
}

}  // namespace

void stage_report(const RunConfig& cfg) {
    Artifacts art(cfg.output_dir);
    ReportInputs in = gather(art);

    std::string s = "classquant run summary\n";
    s += "seed " + std::to_string(cfg.seed) + "\n";
    s += "dataset " + cfg.dataset_path + " (" + cfg.dataset_format + ")\n";
    if (!cfg.model.preset.empty()) s += "model preset " + cfg.model.preset + "\n";
    s += "\n";

    std::string acc_csv = "stage,split,accuracy\n";
    s += "accuracy (%)\n";
    auto acc_line = [&](const char* name, const json& m, const char* vkey, const char* tkey) {
        double v = jnum(m, vkey), t = jnum(m, tkey);
        s += "  " + std::string(name) + "  val " + (v < 0 ? "n/a" : pct(v)) + "  test " +
             (t < 0 ? "n/a" : pct(t)) + "\n";
        if (v >= 0) acc_csv += std::string(name) + ",val," + fmt_double(v) + "\n";
        if (t >= 0) acc_csv += std::string(name) + ",test," + fmt_double(t) + "\n";
    };
    if (in.has_train) acc_line("float    ", in.train, "float_val_accuracy", "float_test_accuracy");
    if (in.has_quantize)
        acc_line("quantized", in.quantize, "quantized_val_accuracy", "quantized_test_accuracy");
    if (in.has_refine)
        acc_line("refined  ", in.refine, "refined_val_accuracy", "refined_test_accuracy");
    if (!in.has_train && !in.has_quantize && !in.has_refine) s += "  (no accuracy metrics yet)\n";
    s += "\n";

    if (in.has_search || in.has_arr) {
        s += "quantization\n";
        s += "  budget " + fmt_double(cfg.search.budget) + " bits, max " +
             std::to_string(cfg.search.max_bits) + ", activation bits " +
             std::to_string(cfg.quantize.act_bits) + "\n";
        if (in.has_arr) s += "  average bit-width " + fmt_double(in.arr.average_bits) + "\n";
        if (in.has_search) {
            s += "  search steps " + std::to_string(in.search.at("steps").get<int64_t>());
            s += in.search.at("fallback_used").get<bool>() ? ", budget met in the fallback phase\n"
                                                           : ", budget met by the accuracy phase\n";
            s += "  thresholds";
            for (double p : in.search.at("thresholds").get<std::vector<double>>())
                s += " " + fmt_double(p);
            s += "\n";
        }
        s += std::string("  distillation divergence: ") +
             (cfg.refine.kl_as_printed ? "negated orientation" : "forward orientation") + "\n";
        s += "\n";
    }

    // Per-layer bit mix, weighted by weight counts; shares add up to 100
    // within print rounding.
    std::string bits_csv = "layer,bits,units,weights,weight_share\n";
    if (in.has_arr) {
        std::map<int, std::map<int, std::pair<int64_t, int64_t>>> by_layer;  // layer -> bits -> (units, weights)
        // weight counts are not in the arrangement; rebuild the architecture
        std::map<std::pair<int, int>, int64_t> wc;
        ModelPlan plan = resolve_model(cfg.model);
        Network blank = build_network(plan.input, plan.layers);
        for (const auto& qu : blank.quant_units()) wc[{qu.layer, qu.unit}] = qu.weight_count;
        int64_t total = 0;
        for (const auto& ub : in.arr.units) {
            auto it = wc.find({ub.layer, ub.unit});
            int64_t w = it == wc.end() ? 0 : it->second;
            auto& cell = by_layer[ub.layer][ub.bits];
            cell.first += 1;
            cell.second += w;
            total += w;
        }
        s += "per-layer bit mix (share of quantizable weights)\n";
        for (const auto& [layer, dist] : by_layer) {
            s += "  layer " + std::to_string(layer) + ":";
            for (const auto& [bits, cell] : dist) {
                s += " " + std::to_string(bits) + "b " +
                     pct(static_cast<double>(cell.second) / static_cast<double>(total)) + "%";
                bits_csv += std::to_string(layer) + "," + std::to_string(bits) + "," +
                            std::to_string(cell.first) + "," + std::to_string(cell.second) + "," +
                            fmt_double(static_cast<double>(cell.second) /
                                       static_cast<double>(total)) +
                            "\n";
            }
            s += "\n";
        }
        s += "\n";
    }

    // Unit score histogram per layer, 20 bins over [0, classes]
    std::string hist_csv = "layer,bin_lo,bin_hi,count\n";
    if (in.has_scores) {
        double span = static_cast<double>(in.scores.num_classes);
        constexpr int kBins = 20;
        std::map<int, std::vector<int64_t>> hist;
        for (const auto& u : in.scores.units) {
            auto& h = hist[u.layer];
            if (h.empty()) h.assign(kBins, 0);
            int bin = span > 0 ? static_cast<int>(u.phi / span * kBins) : 0;
            bin = std::min(std::max(bin, 0), kBins - 1);
            ++h[bin];
        }
        for (const auto& [layer, h] : hist)
            for (int b = 0; b < kBins; ++b)
                hist_csv += std::to_string(layer) + "," + fmt_double(span * b / kBins) + "," +
                            fmt_double(span * (b + 1) / kBins) + "," + std::to_string(h[b]) + "\n";
    }

    if (!in.gaps.empty()) {
        s += "gaps\n";
        for (const auto& g : in.gaps) s += "  " + g + "\n";
    }

    atomic_write(art.summary, s);
    atomic_write(art.accuracy_csv, acc_csv);
    atomic_write(art.bit_distribution, bits_csv);
    atomic_write(art.score_histogram, hist_csv);
}

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"train",    "score",  "search",
                                                   "quantize", "refine", "report"};
    return names;
}

void run_stage(const RunConfig& cfg, const std::string& name) {
    if (name == "train") return stage_train(cfg);
    if (name == "score") return stage_score(cfg);
    if (name == "search") return stage_search(cfg);
    if (name == "quantize") return stage_quantize(cfg);
    if (name == "refine") return stage_refine(cfg);
    if (name == "report") return stage_report(cfg);
    throw std::invalid_argument("unknown stage '" + name + "'");
}

namespace {

std::vector<std::string> stage_outputs(const Artifacts& art, const std::string& name) {
    if (name == "train") return {art.float_model, art.train_log, art.train_metrics};
    if (name == "score") return {art.scores};
    if (name == "search") return {art.arrangement, art.search_trace, art.search_metrics};
    if (name == "quantize") return {art.quantized_model, art.quantize_metrics};
    if (name == "refine") return {art.refined_model, art.refine_log, art.refine_metrics};
    if (name == "report")
        return {art.summary, art.score_histogram, art.bit_distribution, art.accuracy_csv};
    return {};
}

}  // namespace

void run_pipeline(const RunConfig& cfg, bool resume) {
    Artifacts art(cfg.output_dir);
    for (const auto& name : stage_names()) {
        if (resume) {
            auto outs = stage_outputs(art, name);
            bool done = !outs.empty();
            for (const auto& o : outs)
                if (!std::filesystem::exists(o)) done = false;
            if (done) {
                std::printf("[pipeline] %-8s skipped, outputs present\n", name.c_str());
                continue;
            }
        }
        auto t0 = std::chrono::steady_clock::now();
        run_stage(cfg, name);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[pipeline] %-8s done in %.1fs\n", name.c_str(), secs);
        std::fflush(stdout);
    }
}

}  // namespace cq
