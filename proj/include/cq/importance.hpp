#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cq/network.hpp"
#include "cq/rng.hpp"

namespace cq {

// Scalar readout the scores are taken against: either the logit of the
// sample's own class, or the L1 norm of the whole logit vector.
enum class Readout { TrueClassLogit, LogitL1 };

Readout readout_from_name(const std::string& name);
std::string readout_name(Readout r);

// First-order importance of every hidden activation for one sample:
// |a * dPhi/da|, all sites filled by a single forward/backward pair.
// Keys are activation-site layer indices.
struct SampleScores {
    std::map<int, std::vector<double>> site_scores;
};

SampleScores taylor_scores(const Network& net, const std::vector<double>& x,
                           Readout readout, int label);

// Exact ablation reference: |Phi(x) - Phi(x with activation (site, neuron)
// forced to zero)|. Two forward passes per neuron, so this is for
// verification and small models only.
double ablation_score_exact(const Network& net, const std::vector<double>& x,
                            int site_layer, int64_t neuron, Readout readout, int label);

// Fraction of a class batch whose score clears the activity threshold.
// per_sample[i] holds one sample's scores for a fixed set of neurons.
std::vector<double> class_scores(const std::vector<std::vector<double>>& per_sample,
                                 double epsilon);

// Sum of per-class activity fractions; beta is indexed [class][neuron].
std::vector<double> aggregate_scores(const std::vector<std::vector<double>>& beta);

// Reduce neuron scores to unit scores by taking the max over each unit's
// block of neurons_per_unit consecutive entries.
std::vector<double> filter_scores(const std::vector<double>& gamma,
                                  int units, int64_t neurons_per_unit);

// Full score table for one network: per quantizable layer, the per-class
// activity fractions, their per-neuron sums, and the per-unit maxima.
struct LayerScores {
    int layer = -1;         // parameterized layer the units belong to
    int site = -1;          // activation site the scores were read from
    int units = 0;
    int64_t neurons_per_unit = 0;
    std::vector<std::vector<double>> beta;  // [num_classes][units * neurons_per_unit]
    std::vector<double> gamma;              // [units * neurons_per_unit]
    std::vector<double> phi;                // [units]
};

struct ImportanceTable {
    double epsilon = 1e-50;
    int samples_per_class = 64;
    int num_classes = 0;
    Readout readout = Readout::TrueClassLogit;
    uint64_t model_hash = 0;
    std::vector<LayerScores> layers;

    // phi flattened in Network::quant_units() order
    std::vector<double> unit_phi() const;
};

struct ScoreConfig {
    double epsilon = 1e-50;
    int samples_per_class = 64;
    Readout readout = Readout::TrueClassLogit;
};

// Scores every quantizable unit of the network against a labelled sample
// pool. Per class, up to cfg.samples_per_class samples are drawn without
// replacement using rng; a class with no samples at all is an error.
ImportanceTable score_network(const Network& net,
                              const std::vector<std::vector<double>>& xs,
                              const std::vector<int>& ys,
                              const ScoreConfig& cfg, RngStream& rng);

// Score file: one record per unit (per-unit score plus the class-activity
// vector of its strongest neuron), with enough metadata to validate reuse.
struct UnitScore {
    int layer = -1;
    int unit = -1;
    double phi = 0.0;
    std::vector<double> beta;  // [num_classes], from the unit's argmax-gamma neuron
};

struct ScoreFile {
    double epsilon = 1e-50;
    int samples_per_class = 0;
    int num_classes = 0;
    std::string readout = "true-logit";
    uint64_t model_hash = 0;
    std::vector<UnitScore> units;
};

void save_scores(const ImportanceTable& table, const std::string& path);
ScoreFile load_scores(const std::string& path);

}  // namespace cq
