#include "cq/config.hpp"

#include <set>

#include "json.hpp"

#include "cq/fileio.hpp"

namespace cq {
namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& where,
                const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& where, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

LayerSpec parse_layer(const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": layer must be an object");
    std::string kind = get_or<std::string>(j, where, "kind", "");
    if (kind == "dense") {
        check_keys(j, where, {"kind", "units", "bias"});
        int units = get_or<int>(j, where, "units", 0);
        if (units <= 0) throw ConfigError(where + ": dense layer needs positive 'units'");
        return dense(units, get_or<bool>(j, where, "bias", true));
    }
    if (kind == "conv") {
        check_keys(j, where, {"kind", "channels", "kernel", "stride", "padding", "bias"});
        int ch = get_or<int>(j, where, "channels", 0);
        int k = get_or<int>(j, where, "kernel", 0);
        if (ch <= 0 || k <= 0)
            throw ConfigError(where + ": conv layer needs positive 'channels' and 'kernel'");
        return conv2d(ch, k, get_or<int>(j, where, "stride", 1),
                      get_or<int>(j, where, "padding", 0), get_or<bool>(j, where, "bias", true));
    }
    if (kind == "relu") {
        check_keys(j, where, {"kind"});
        return relu();
    }
    if (kind == "flatten") {
        check_keys(j, where, {"kind"});
        return flatten();
    }
    throw ConfigError(where + ": unknown layer kind '" + kind + "'");
}

}  // namespace

ModelPlan resolve_model(const ModelConfig& mc) {
    if (!mc.preset.empty()) {
        if (!mc.input.empty() || !mc.layers.empty())
            throw ConfigError("model: give either a preset or an explicit layer list, not both");
        if (mc.preset == "mlp-blobs") {
            return {{16}, {dense(64), relu(), dense(64), relu(), dense(10)}};
        }
        if (mc.preset == "cnn-glyphs") {
            return {{1, 16, 16},
                    {conv2d(12, 3, 1, 1), relu(), conv2d(24, 3, 2, 1), relu(),
                     conv2d(32, 3, 2, 1), relu(), flatten(), dense(64), relu(), dense(10)}};
        }
        throw ConfigError("model: unknown preset '" + mc.preset + "'");
    }
    if (mc.input.empty() || mc.layers.empty())
        throw ConfigError("model: needs a preset or both 'input' and 'layers'");
    return {mc.input, mc.layers};
}

RunConfig parse_config(const std::string& json_text, const std::string& origin) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    if (!root.is_object()) throw ConfigError(origin + ": config must be a JSON object");

    check_keys(root, origin,
               {"seed", "dataset", "format", "idx_labels", "output_dir", "model", "splits",
                "train", "score", "search", "quantize", "refine"});

    RunConfig cfg;
    if (!root.contains("seed")) throw ConfigError(origin + ": 'seed' is required");
    if (!root.at("seed").is_number_unsigned())
        throw ConfigError(origin + ".seed: must be a non-negative integer");
    cfg.seed = root.at("seed").get<uint64_t>();
    cfg.seed_set = true;

    cfg.dataset_path = get_or<std::string>(root, origin, "dataset", "");
    cfg.dataset_format = get_or<std::string>(root, origin, "format", "csv");
    if (cfg.dataset_format != "csv" && cfg.dataset_format != "idx")
        throw ConfigError(origin + ".format: must be 'csv' or 'idx'");
    cfg.idx_labels_path = get_or<std::string>(root, origin, "idx_labels", "");
    cfg.output_dir = get_or<std::string>(root, origin, "output_dir", cfg.output_dir);

    if (root.contains("model")) {
        const json& m = root.at("model");
        std::string where = origin + ".model";
        if (!m.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(m, where, {"preset", "input", "layers"});
        cfg.model.preset = get_or<std::string>(m, where, "preset", "");
        cfg.model.input = get_or<std::vector<int>>(m, where, "input", {});
        if (m.contains("layers")) {
            const json& ls = m.at("layers");
            if (!ls.is_array()) throw ConfigError(where + ".layers: must be an array");
            for (size_t i = 0; i < ls.size(); ++i)
                cfg.model.layers.push_back(
                    parse_layer(ls[i], where + ".layers[" + std::to_string(i) + "]"));
        }
    }

    if (root.contains("splits")) {
        const json& s = root.at("splits");
        std::string where = origin + ".splits";
        if (!s.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(s, where, {"train", "val", "calib", "test"});
        cfg.splits.train = get_or<double>(s, where, "train", cfg.splits.train);
        cfg.splits.val = get_or<double>(s, where, "val", cfg.splits.val);
        cfg.splits.calib = get_or<double>(s, where, "calib", cfg.splits.calib);
        cfg.splits.test = get_or<double>(s, where, "test", cfg.splits.test);
    }

    if (root.contains("train")) {
        const json& t = root.at("train");
        std::string where = origin + ".train";
        if (!t.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(t, where, {"epochs", "lr", "momentum", "weight_decay", "batch_size"});
        cfg.train.epochs = get_or<int>(t, where, "epochs", cfg.train.epochs);
        cfg.train.lr = get_or<double>(t, where, "lr", cfg.train.lr);
        cfg.train.momentum = get_or<double>(t, where, "momentum", cfg.train.momentum);
        cfg.train.weight_decay = get_or<double>(t, where, "weight_decay", cfg.train.weight_decay);
        cfg.train.batch_size = get_or<int>(t, where, "batch_size", cfg.train.batch_size);
    }

    if (root.contains("score")) {
        const json& s = root.at("score");
        std::string where = origin + ".score";
        if (!s.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(s, where, {"epsilon", "samples_per_class", "readout"});
        cfg.score.epsilon = get_or<double>(s, where, "epsilon", cfg.score.epsilon);
        cfg.score.samples_per_class =
            get_or<int>(s, where, "samples_per_class", cfg.score.samples_per_class);
        cfg.score.readout = get_or<std::string>(s, where, "readout", cfg.score.readout);
        try {
            readout_from_name(cfg.score.readout);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(where + ".readout: " + e.what());
        }
    }

    if (root.contains("search")) {
        const json& s = root.at("search");
        std::string where = origin + ".search";
        if (!s.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(s, where,
                   {"budget", "max_bits", "step", "step_divisor", "target_accuracy", "decay",
                    "eval_samples"});
        cfg.search.budget = get_or<double>(s, where, "budget", cfg.search.budget);
        cfg.search.max_bits = get_or<int>(s, where, "max_bits", cfg.search.max_bits);
        cfg.search.step = get_or<double>(s, where, "step", cfg.search.step);
        cfg.search.step_divisor = get_or<int>(s, where, "step_divisor", cfg.search.step_divisor);
        cfg.search.target_accuracy =
            get_or<double>(s, where, "target_accuracy", cfg.search.target_accuracy);
        cfg.search.decay = get_or<double>(s, where, "decay", cfg.search.decay);
        cfg.search.eval_samples = get_or<int>(s, where, "eval_samples", cfg.search.eval_samples);
    }

    if (root.contains("quantize")) {
        const json& q = root.at("quantize");
        std::string where = origin + ".quantize";
        if (!q.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(q, where, {"act_bits", "calibrate_on_float"});
        cfg.quantize.act_bits = get_or<int>(q, where, "act_bits", cfg.quantize.act_bits);
        cfg.quantize.calibrate_on_float =
            get_or<bool>(q, where, "calibrate_on_float", cfg.quantize.calibrate_on_float);
    }

    if (root.contains("refine")) {
        const json& r = root.at("refine");
        std::string where = origin + ".refine";
        if (!r.is_object()) throw ConfigError(where + ": must be an object");
        check_keys(r, where,
                   {"alpha", "epochs", "lr", "momentum", "weight_decay", "batch_size",
                    "kl_as_printed", "freeze_weight_ranges"});
        cfg.refine.alpha = get_or<double>(r, where, "alpha", cfg.refine.alpha);
        cfg.refine.epochs = get_or<int>(r, where, "epochs", cfg.refine.epochs);
        cfg.refine.lr = get_or<double>(r, where, "lr", cfg.refine.lr);
        cfg.refine.momentum = get_or<double>(r, where, "momentum", cfg.refine.momentum);
        cfg.refine.weight_decay = get_or<double>(r, where, "weight_decay", cfg.refine.weight_decay);
        cfg.refine.batch_size = get_or<int>(r, where, "batch_size", cfg.refine.batch_size);
        cfg.refine.kl_as_printed = get_or<bool>(r, where, "kl_as_printed", cfg.refine.kl_as_printed);
        cfg.refine.freeze_weight_ranges =
            get_or<bool>(r, where, "freeze_weight_ranges", cfg.refine.freeze_weight_ranges);
    }

    return cfg;
}

RunConfig load_config(const std::string& path) {
    return parse_config(read_file(path), path);
}

}  // namespace cq
