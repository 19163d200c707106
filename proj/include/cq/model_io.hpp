#pragma once

#include <cstdint>
#include <string>

#include "cq/network.hpp"

namespace cq {

// Versioned binary model file: layer specs followed by little-endian f64
// weight arrays, with an optional activation-calibration section. Byte
// layout is documented in docs/file-formats.md.
struct SavedModel {
    Network net;
    bool has_act = false;
    ActQuant act;
};

void save_model(const Network& net, const std::string& path, const ActQuant* act = nullptr);
SavedModel load_model(const std::string& path);

// FNV-1a over the file bytes; score files carry it so later stages can
// detect a stale model/score pairing.
uint64_t model_file_hash(const std::string& path);

}  // namespace cq
