#include "cq/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cq/fileio.hpp"

namespace cq {
namespace {

std::runtime_error row_error(const std::string& path, int64_t line, const std::string& what) {
    return std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

double parse_field(const std::string& field, const std::string& path, int64_t line) {
    size_t used = 0;
    double v;
    try {
        v = std::stod(field, &used);
    } catch (const std::exception&) {
        throw row_error(path, line, "not a number: '" + field + "'");
    }
    while (used < field.size() && std::isspace(static_cast<unsigned char>(field[used]))) ++used;
    if (used != field.size())
        throw row_error(path, line, "trailing junk in field: '" + field + "'");
    if (!std::isfinite(v)) throw row_error(path, line, "non-finite value");
    return v;
}

}  // namespace

Dataset ingest_csv(const std::string& path, int num_classes) {
    if (num_classes <= 0) throw std::invalid_argument("ingest_csv: num_classes must be positive");
    std::istringstream in(read_file(path));
    Dataset ds;
    ds.num_classes = num_classes;

    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;

        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() < 2) throw row_error(path, lineno, "need a label and at least one feature");

        double labelv = parse_field(fields[0], path, lineno);
        int label = static_cast<int>(labelv);
        if (static_cast<double>(label) != labelv)
            throw row_error(path, lineno, "label is not an integer");
        if (label < 0 || label >= num_classes)
            throw row_error(path, lineno, "label " + std::to_string(label) + " outside [0, " +
                                              std::to_string(num_classes) + ")");

        std::vector<double> feat(fields.size() - 1);
        for (size_t i = 1; i < fields.size(); ++i) feat[i - 1] = parse_field(fields[i], path, lineno);

        if (ds.feature_len == 0) {
            ds.feature_len = static_cast<int>(feat.size());
        } else if (static_cast<int>(feat.size()) != ds.feature_len) {
            throw row_error(path, lineno,
                            "row has " + std::to_string(feat.size()) + " features, expected " +
                                std::to_string(ds.feature_len));
        }
        ds.features.push_back(std::move(feat));
        ds.labels.push_back(label);
    }
    if (ds.features.empty()) throw std::runtime_error(path + ": no data rows");

    bool in_range = true;
    for (const auto& f : ds.features)
        for (double v : f)
            if (v < 0.0 || v > 1.0) { in_range = false; break; }
    if (!in_range) {
        // column-wise min-max; constant columns collapse to zero
        std::vector<double> lo(ds.feature_len, 1e300), hi(ds.feature_len, -1e300);
        for (const auto& f : ds.features)
            for (int i = 0; i < ds.feature_len; ++i) {
                lo[i] = std::min(lo[i], f[i]);
                hi[i] = std::max(hi[i], f[i]);
            }
        for (auto& f : ds.features)
            for (int i = 0; i < ds.feature_len; ++i)
                f[i] = hi[i] > lo[i] ? (f[i] - lo[i]) / (hi[i] - lo[i]) : 0.0;
    }
    return ds;
}

void write_csv(const Dataset& ds, const std::string& path) {
    std::string out;
    out.reserve(ds.features.size() * (ds.feature_len * 8 + 4));
    for (size_t r = 0; r < ds.features.size(); ++r) {
        out += std::to_string(ds.labels[r]);
        for (double v : ds.features[r]) {
            out += ',';
            out += fmt_double(v);
        }
        out += '\n';
    }
    atomic_write(path, out);
}

namespace {

uint32_t be32(const std::string& buf, size_t at, const std::string& path) {
    if (at + 4 > buf.size()) throw std::runtime_error(path + ": truncated IDX header");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v = (v << 8) | static_cast<unsigned char>(buf[at + i]);
    return v;
}

}  // namespace

Dataset ingest_idx(const std::string& images_path, const std::string& labels_path,
                   int num_classes) {
    if (num_classes <= 0) throw std::invalid_argument("ingest_idx: num_classes must be positive");
    std::string img = read_file(images_path);
    std::string lab = read_file(labels_path);

    if (be32(img, 0, images_path) != 0x00000803u)
        throw std::runtime_error(images_path + ": not an IDX image file");
    uint32_t n = be32(img, 4, images_path);
    uint32_t rows = be32(img, 8, images_path);
    uint32_t cols = be32(img, 12, images_path);
    if (img.size() != 16 + static_cast<size_t>(n) * rows * cols)
        throw std::runtime_error(images_path + ": image payload size mismatch");

    if (be32(lab, 0, labels_path) != 0x00000801u)
        throw std::runtime_error(labels_path + ": not an IDX label file");
    uint32_t ln = be32(lab, 4, labels_path);
    if (ln != n)
        throw std::runtime_error(labels_path + ": label count differs from image count");
    if (lab.size() != 8 + static_cast<size_t>(n))
        throw std::runtime_error(labels_path + ": label payload size mismatch");

    Dataset ds;
    ds.num_classes = num_classes;
    ds.feature_len = static_cast<int>(rows * cols);
    ds.features.reserve(n);
    ds.labels.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        int label = static_cast<unsigned char>(lab[8 + i]);
        if (label >= num_classes)
            throw std::runtime_error(labels_path + ": label " + std::to_string(label) +
                                     " outside [0, " + std::to_string(num_classes) + ") at record " +
                                     std::to_string(i));
        std::vector<double> feat(ds.feature_len);
        const char* px = img.data() + 16 + static_cast<size_t>(i) * ds.feature_len;
        for (int j = 0; j < ds.feature_len; ++j)
            feat[j] = static_cast<unsigned char>(px[j]) / 255.0;
        ds.features.push_back(std::move(feat));
        ds.labels.push_back(label);
    }
    return ds;
}

Splits make_splits(int64_t n, const SplitFractions& f, RngStream& rng) {
    if (n <= 0) throw std::invalid_argument("make_splits: empty dataset");
    for (double v : {f.train, f.val, f.calib, f.test})
        if (v < 0.0) throw std::invalid_argument("make_splits: negative fraction");
    if (f.train + f.val + f.calib + f.test > 1.0 + 1e-9)
        throw std::invalid_argument("make_splits: fractions sum past 1");

    std::vector<int> perm(n);
    for (int64_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
    rng.shuffle(perm);

    auto take = [&](double frac, int64_t& at) {
        int64_t count = static_cast<int64_t>(std::floor(frac * static_cast<double>(n)));
        count = std::min(count, n - at);
        std::vector<int> out(perm.begin() + at, perm.begin() + at + count);
        at += count;
        return out;
    };

    Splits s;
    int64_t at = 0;
    s.train = take(f.train, at);
    s.val = take(f.val, at);
    s.calib = take(f.calib, at);
    s.test = take(f.test, at);
    // leftover rows from floor rounding go to training
    s.train.insert(s.train.end(), perm.begin() + at, perm.end());
    return s;
}

Dataset subset(const Dataset& ds, const std::vector<int>& idx) {
    Dataset out;
    out.num_classes = ds.num_classes;
    out.feature_len = ds.feature_len;
    out.features.reserve(idx.size());
    out.labels.reserve(idx.size());
    for (int i : idx) {
        if (i < 0 || static_cast<size_t>(i) >= ds.features.size())
            throw std::out_of_range("subset: index out of range");
        out.features.push_back(ds.features[i]);
        out.labels.push_back(ds.labels[i]);
    }
    return out;
}

Dataset synth_blobs(int per_class, int num_classes, int dim, RngStream& rng) {
    if (per_class <= 0 || num_classes <= 0 || dim <= 0)
        throw std::invalid_argument("synth_blobs: sizes must be positive");
    std::vector<std::vector<double>> centers(num_classes, std::vector<double>(dim));
    for (auto& c : centers)
        for (double& v : c) v = rng.uniform(0.15, 0.85);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.feature_len = dim;
    for (int m = 0; m < num_classes; ++m) {
        for (int i = 0; i < per_class; ++i) {
            std::vector<double> x(dim);
            for (int j = 0; j < dim; ++j)
                x[j] = std::clamp(centers[m][j] + rng.normal(0.0, 0.08), 0.0, 1.0);
            ds.features.push_back(std::move(x));
            ds.labels.push_back(m);
        }
    }
    return ds;
}

namespace {

// 6x6 digit strokes, upscaled 2x and placed on the 16x16 canvas
const char* const kGlyphs[10][6] = {
    {".####.", "#....#", "#....#", "#....#", "#....#", ".####."},
    {"..##..", ".###..", "..##..", "..##..", "..##..", ".####."},
    {".####.", "#....#", "...##.", "..##..", ".##...", "######"},
    {"#####.", ".....#", "..###.", ".....#", "#....#", ".####."},
    {"...##.", "..#.#.", ".#..#.", "######", "....#.", "....#."},
    {"######", "#.....", "#####.", ".....#", "#....#", ".####."},
    {".####.", "#.....", "#####.", "#....#", "#....#", ".####."},
    {"######", ".....#", "....#.", "...#..", "..#...", "..#..."},
    {".####.", "#....#", ".####.", "#....#", "#....#", ".####."},
    {".####.", "#....#", "#....#", ".#####", ".....#", ".####."},
};

}  // namespace

Dataset synth_glyphs(int per_class, RngStream& rng) {
    if (per_class <= 0) throw std::invalid_argument("synth_glyphs: per_class must be positive");
    constexpr int kSide = 16;
    Dataset ds;
    ds.num_classes = 10;
    ds.feature_len = kSide * kSide;

    for (int digit = 0; digit < 10; ++digit) {
        for (int i = 0; i < per_class; ++i) {
            std::vector<double> img(ds.feature_len);
            for (double& v : img) v = 0.08 * rng.uniform(0.0, 1.0);

            int ox = static_cast<int>(rng.index(5));  // glyph spans 12px, canvas 16
            int oy = static_cast<int>(rng.index(5));
            double stroke = rng.uniform(0.7, 1.0);
            for (int gy = 0; gy < 12; ++gy) {
                for (int gx = 0; gx < 12; ++gx) {
                    if (kGlyphs[digit][gy / 2][gx / 2] != '#') continue;
                    if (rng.uniform(0.0, 1.0) < 0.04) continue;  // pixel dropout
                    double v = stroke * (1.0 - 0.15 * rng.uniform(0.0, 1.0));
                    img[(oy + gy) * kSide + (ox + gx)] = std::clamp(v, 0.0, 1.0);
                }
            }
            ds.features.push_back(std::move(img));
            ds.labels.push_back(digit);
        }
    }
    return ds;
}

}  // namespace cq
