#include "cq/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cinttypes>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "cq/fileio.hpp"
#include "cq/parallel.hpp"

namespace cq {

Readout readout_from_name(const std::string& name) {
    if (name == "true-logit") return Readout::TrueClassLogit;
    if (name == "logit-l1") return Readout::LogitL1;
    throw std::invalid_argument("unknown readout '" + name + "' (expected true-logit or logit-l1)");
}

std::string readout_name(Readout r) {
    return r == Readout::TrueClassLogit ? "true-logit" : "logit-l1";
}

namespace {

Objective score_readout(const Network& net, const Trace& tr, Readout r, int label) {
    const auto& logits = logits_of(net, tr);
    if (r == Readout::TrueClassLogit) return readout_true_logit(logits, label);
    return readout_logit_l1(logits);
}

}  // namespace

SampleScores taylor_scores(const Network& net, const std::vector<double>& x,
                           Readout readout, int label) {
    Trace tr = forward(net, x);
    Objective ro = score_readout(net, tr, readout, label);
    Gradients g = backward(net, tr, ro.dlogits);

    SampleScores out;
    for (int site : net.score_sites()) {
        const auto& act = tr.outputs.at(site);
        const auto& grad = g.doutputs.at(site);
        std::vector<double> s(act.size());
        for (size_t i = 0; i < act.size(); ++i) s[i] = std::fabs(act[i] * grad[i]);
        out.site_scores.emplace(site, std::move(s));
    }
    return out;
}

double ablation_score_exact(const Network& net, const std::vector<double>& x,
                            int site_layer, int64_t neuron, Readout readout, int label) {
    Trace base = forward(net, x);
    double phi0 = score_readout(net, base, readout, label).value;

    FreezeMask mask;
    mask.entries[site_layer].push_back(neuron);
    ForwardOptions opt;
    opt.freeze = &mask;
    Trace ablated = forward(net, x, opt);
    double phi1 = score_readout(net, ablated, readout, label).value;
    return std::fabs(phi0 - phi1);
}

std::vector<double> class_scores(const std::vector<std::vector<double>>& per_sample,
                                 double epsilon) {
    if (per_sample.empty())
        throw std::invalid_argument("class_scores: empty sample batch");
    size_t n = per_sample.front().size();
    for (const auto& row : per_sample)
        if (row.size() != n)
            throw std::invalid_argument("class_scores: ragged score rows");

    std::vector<double> beta(n, 0.0);
    for (const auto& row : per_sample)
        for (size_t i = 0; i < n; ++i)
            if (row[i] > epsilon) beta[i] += 1.0;
    // direct division keeps each fraction correctly rounded
    for (double& b : beta) b /= static_cast<double>(per_sample.size());
    return beta;
}

std::vector<double> aggregate_scores(const std::vector<std::vector<double>>& beta) {
    if (beta.empty())
        throw std::invalid_argument("aggregate_scores: no class columns");
    size_t n = beta.front().size();
    for (const auto& col : beta)
        if (col.size() != n)
            throw std::invalid_argument("aggregate_scores: ragged class columns");
    std::vector<double> gamma(n, 0.0);
    for (const auto& col : beta)
        for (size_t i = 0; i < n; ++i) gamma[i] += col[i];
    return gamma;
}

std::vector<double> filter_scores(const std::vector<double>& gamma,
                                  int units, int64_t neurons_per_unit) {
    if (units <= 0 || neurons_per_unit <= 0)
        throw std::invalid_argument("filter_scores: unit layout must be positive");
    if (static_cast<int64_t>(gamma.size()) != units * neurons_per_unit)
        throw std::invalid_argument("filter_scores: gamma length does not match unit layout");
    std::vector<double> phi(units);
    for (int u = 0; u < units; ++u) {
        const double* block = gamma.data() + static_cast<int64_t>(u) * neurons_per_unit;
        double m = block[0];
        for (int64_t i = 1; i < neurons_per_unit; ++i) m = std::max(m, block[i]);
        phi[u] = m;
    }
    return phi;
}

std::vector<double> ImportanceTable::unit_phi() const {
    std::vector<double> out;
    for (const auto& l : layers) out.insert(out.end(), l.phi.begin(), l.phi.end());
    return out;
}

ImportanceTable score_network(const Network& net,
                              const std::vector<std::vector<double>>& xs,
                              const std::vector<int>& ys,
                              const ScoreConfig& cfg, RngStream& rng) {
    if (xs.size() != ys.size())
        throw std::invalid_argument("score_network: feature/label count mismatch");
    if (cfg.samples_per_class <= 0)
        throw std::invalid_argument("score_network: samples_per_class must be positive");
    int M = net.num_classes;

    // Draw each class batch from a single shuffled pass over the pool so the
    // selection depends only on the stream state, not on class order.
    std::vector<int> order(xs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::vector<std::vector<int>> batches(M);
    for (int idx : order) {
        int y = ys[idx];
        if (y < 0 || y >= M)
            throw std::invalid_argument("score_network: label out of range");
        if (static_cast<int>(batches[y].size()) < cfg.samples_per_class)
            batches[y].push_back(idx);
    }
    for (int m = 0; m < M; ++m)
        if (batches[m].empty())
            throw std::invalid_argument("score_network: no samples for class " + std::to_string(m));

    ImportanceTable table;
    table.epsilon = cfg.epsilon;
    table.samples_per_class = cfg.samples_per_class;
    table.num_classes = M;
    table.readout = cfg.readout;

    std::vector<int> qlayers = net.quantizable_layers();
    for (int li : qlayers) {
        LayerScores ls;
        ls.layer = li;
        ls.site = net.site_for(li);
        ls.units = net.units_in_layer(li);
        ls.neurons_per_unit = net.neurons_per_unit(li);
        table.layers.push_back(std::move(ls));
    }

    // One pass per class: score the batch in parallel, then count activity
    // sequentially so the result never depends on thread interleaving.
    for (int m = 0; m < M; ++m) {
        const auto& batch = batches[m];
        std::vector<SampleScores> scored(batch.size());
        parallel_for(static_cast<int64_t>(batch.size()), [&](int64_t i) {
            scored[i] = taylor_scores(net, xs[batch[i]], cfg.readout, ys[batch[i]]);
        });
        for (auto& ls : table.layers) {
            std::vector<std::vector<double>> rows;
            rows.reserve(scored.size());
            for (auto& s : scored) rows.push_back(std::move(s.site_scores.at(ls.site)));
            ls.beta.push_back(class_scores(rows, cfg.epsilon));
        }
    }

    for (auto& ls : table.layers) {
        ls.gamma = aggregate_scores(ls.beta);
        ls.phi = filter_scores(ls.gamma, ls.units, ls.neurons_per_unit);
    }
    return table;
}

void save_scores(const ImportanceTable& table, const std::string& path) {
    std::string out = "classquant scores v1\n";
    out += "epsilon " + fmt_double(table.epsilon) + "\n";
    out += "samples_per_class " + std::to_string(table.samples_per_class) + "\n";
    out += "classes " + std::to_string(table.num_classes) + "\n";
    out += "readout " + readout_name(table.readout) + "\n";
    char hashbuf[32];
    std::snprintf(hashbuf, sizeof hashbuf, "%016" PRIx64, table.model_hash);
    out += "model_hash " + std::string(hashbuf) + "\n";

    int64_t total_units = 0;
    for (const auto& l : table.layers) total_units += l.units;
    out += "units " + std::to_string(total_units) + "\n";

    for (const auto& l : table.layers) {
        for (int u = 0; u < l.units; ++u) {
            // Carry the class-activity vector of the unit's strongest neuron
            // (the one that produced phi; ties resolve to the lowest index).
            int64_t base = static_cast<int64_t>(u) * l.neurons_per_unit;
            int64_t best = base;
            for (int64_t i = base + 1; i < base + l.neurons_per_unit; ++i)
                if (l.gamma[i] > l.gamma[best]) best = i;
            out += std::to_string(l.layer) + " " + std::to_string(u) + " " + fmt_double(l.phi[u]);
            for (const auto& col : l.beta) out += " " + fmt_double(col[best]);
            out += "\n";
        }
    }
    atomic_write(path, out);
}

namespace {

std::runtime_error score_error(const std::string& path, const std::string& what) {
    return std::runtime_error(path + ": " + what);
}

}  // namespace

ScoreFile load_scores(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "classquant scores v1")
        throw score_error(path, "missing score file header");

    ScoreFile f;
    auto expect_key = [&](const char* key) -> std::string {
        if (!std::getline(in, line)) throw score_error(path, std::string("missing field ") + key);
        std::istringstream ls(line);
        std::string k, v;
        ls >> k >> v;
        if (k != key) throw score_error(path, "expected field " + std::string(key) + ", found " + k);
        return v;
    };

    f.epsilon = std::stod(expect_key("epsilon"));
    f.samples_per_class = std::stoi(expect_key("samples_per_class"));
    f.num_classes = std::stoi(expect_key("classes"));
    f.readout = expect_key("readout");
    f.model_hash = std::stoull(expect_key("model_hash"), nullptr, 16);
    int64_t units = std::stoll(expect_key("units"));
    if (f.num_classes <= 0) throw score_error(path, "class count must be positive");
    if (units < 0) throw score_error(path, "negative unit count");

    for (int64_t i = 0; i < units; ++i) {
        if (!std::getline(in, line)) throw score_error(path, "unit table shorter than declared");
        std::istringstream ls(line);
        UnitScore u;
        if (!(ls >> u.layer >> u.unit >> u.phi))
            throw score_error(path, "bad unit record at line " + std::to_string(i + 8));
        u.beta.resize(f.num_classes);
        for (double& b : u.beta)
            if (!(ls >> b))
                throw score_error(path, "short class vector at line " + std::to_string(i + 8));
        double extra;
        if (ls >> extra) throw score_error(path, "long class vector at line " + std::to_string(i + 8));
        f.units.push_back(std::move(u));
    }
    return f;
}

}  // namespace cq
