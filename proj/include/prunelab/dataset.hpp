#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prunelab/common.hpp"
#include "prunelab/jsonutil.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

// RNG stream tags keep the seed-derived streams of unrelated stages apart.
namespace streams {
constexpr std::uint64_t kGenerate = 0x67656e;
constexpr std::uint64_t kSplit = 0x73706c;
constexpr std::uint64_t kBatches = 0x626174;
constexpr std::uint64_t kModelInit = 0x696e69;
constexpr std::uint64_t kMixup = 0x6d6978;
} // namespace streams

// ---------------------------------------------------------------------------
// Synthetic multi-domain generator
//
// Each sample plants two signals: a class-determined oriented grating in
// channel 0 (stable across domains) and a color offset in channels 1/2 that
// agrees with the label with probability (1+rho_d)/2. Flipping the sign of
// rho on a held-out domain turns the color cue from helpful to hostile while
// the grating keeps working, which is the knob the pruning experiments need.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    static constexpr int kChannels = 3;

    int n_domains = 3;
    int n_classes = 4;
    int height = 16;
    int width = 16;
    double template_contrast = 1.0;
    double spurious_amplitude = 1.0;
    std::vector<double> spurious_rho;   // one per domain, in [-1, 1]
    double noise_sigma = 0.1;
    int samples_per_domain = 300;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_domains < 3) {
            throw ConfigError("n_domains must be >= 3, got " + std::to_string(n_domains));
        }
        if (n_classes < 2) {
            throw ConfigError("n_classes must be >= 2, got " + std::to_string(n_classes));
        }
        if (height < 4 || width < 4) {
            throw ConfigError("image size must be at least 4x4, got " + std::to_string(height) +
                              "x" + std::to_string(width));
        }
        if (static_cast<int>(spurious_rho.size()) != n_domains) {
            throw ConfigError("spurious_rho needs one entry per domain: got " +
                              std::to_string(spurious_rho.size()) + " for " +
                              std::to_string(n_domains) + " domains");
        }
        for (double r : spurious_rho) {
            if (!(r >= -1.0 && r <= 1.0)) {
                throw ConfigError("spurious_rho entries must lie in [-1,1], got " +
                                  format_double(r));
            }
        }
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
            throw ConfigError("noise_sigma must be finite and >= 0");
        }
        if (!(template_contrast >= 0.0) || !std::isfinite(template_contrast)) {
            throw ConfigError("template_contrast must be finite and >= 0");
        }
        if (!(spurious_amplitude >= 0.0) || !std::isfinite(spurious_amplitude)) {
            throw ConfigError("spurious_amplitude must be finite and >= 0");
        }
        if (samples_per_domain < 1) {
            throw ConfigError("samples_per_domain must be >= 1, got " +
                              std::to_string(samples_per_domain));
        }
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"n_domains", s.n_domains},
                       {"n_classes", s.n_classes},
                       {"height", s.height},
                       {"width", s.width},
                       {"template_contrast", s.template_contrast},
                       {"spurious_amplitude", s.spurious_amplitude},
                       {"spurious_rho", s.spurious_rho},
                       {"noise_sigma", s.noise_sigma},
                       {"samples_per_domain", s.samples_per_domain},
                       {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j,
                                  {"n_domains", "n_classes", "height", "width",
                                   "template_contrast", "spurious_amplitude", "spurious_rho",
                                   "noise_sigma", "samples_per_domain", "seed"},
                                  ctx);
    SyntheticSpec s;
    s.n_domains = jsonutil::field_or(j, "n_domains", s.n_domains, ctx);
    s.n_classes = jsonutil::field_or(j, "n_classes", s.n_classes, ctx);
    s.height = jsonutil::field_or(j, "height", s.height, ctx);
    s.width = jsonutil::field_or(j, "width", s.width, ctx);
    s.template_contrast = jsonutil::field_or(j, "template_contrast", s.template_contrast, ctx);
    s.spurious_amplitude = jsonutil::field_or(j, "spurious_amplitude", s.spurious_amplitude, ctx);
    s.spurious_rho = jsonutil::require_field<std::vector<double>>(j, "spurious_rho", ctx);
    s.noise_sigma = jsonutil::field_or(j, "noise_sigma", s.noise_sigma, ctx);
    s.samples_per_domain = jsonutil::field_or(j, "samples_per_domain", s.samples_per_domain, ctx);
    s.seed = jsonutil::field_or<std::uint64_t>(j, "seed", s.seed, ctx);
    s.validate();
    return s;
}

// Class k's invariant feature: an oriented sinusoidal grating (orientation
// pi*k/K, two cycles across the frame), unit amplitude before contrast.
inline std::vector<double> class_template(const SyntheticSpec& spec, int k) {
    const double theta = std::numbers::pi * k / spec.n_classes;
    const double cx = std::cos(theta), sx = std::sin(theta);
    constexpr double kFrequency = 2.0;
    std::vector<double> t(static_cast<std::size_t>(spec.height) * spec.width);
    for (int i = 0; i < spec.height; ++i) {
        const double y = (i + 0.5) / spec.height;
        for (int j = 0; j < spec.width; ++j) {
            const double x = (j + 0.5) / spec.width;
            t[static_cast<std::size_t>(i) * spec.width + j] =
                std::sin(2.0 * std::numbers::pi * kFrequency * (cx * x + sx * y));
        }
    }
    return t;
}

// Color code for class k, spread evenly over [-1, 1].
inline double class_color_level(int k, int n_classes) {
    return 2.0 * k / (n_classes - 1) - 1.0;
}

struct Dataset {
    int n_classes = 0;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<std::string> domain_names;
    std::vector<Tensor> images;              // per domain: [count, C, H, W]
    std::vector<std::vector<int>> labels;    // per domain
    std::optional<SyntheticSpec> source_spec;

    int n_domains() const { return static_cast<int>(images.size()); }
    int domain_size(int d) const { return images[d].dim(0); }

    void check_domain(int d, const char* what) const {
        if (d < 0 || d >= n_domains()) {
            throw ConfigError(std::string(what) + " " + std::to_string(d) +
                              " out of range for " + std::to_string(n_domains()) + " domains");
        }
    }
};

inline Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.n_classes = spec.n_classes;
    ds.channels = SyntheticSpec::kChannels;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.source_spec = spec;

    std::vector<std::vector<double>> templates;
    templates.reserve(spec.n_classes);
    for (int k = 0; k < spec.n_classes; ++k) templates.push_back(class_template(spec, k));

    const std::size_t hw = static_cast<std::size_t>(spec.height) * spec.width;
    const std::size_t chw = SyntheticSpec::kChannels * hw;

    // Each domain draws from its own seed-derived stream, so generating
    // domains in any order (or in parallel) yields identical bytes.
    for (int d = 0; d < spec.n_domains; ++d) {
        std::mt19937_64 rng(derive_seed(spec.seed, streams::kGenerate, static_cast<std::uint64_t>(d)));
        std::uniform_int_distribution<int> pick_class(0, spec.n_classes - 1);
        std::uniform_int_distribution<int> pick_other(0, spec.n_classes - 2);
        std::bernoulli_distribution agree((1.0 + spec.spurious_rho[d]) / 2.0);
        std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma : 1.0);

        std::vector<double> data(static_cast<std::size_t>(spec.samples_per_domain) * chw, 0.0);
        std::vector<int> labels(spec.samples_per_domain);

        for (int s = 0; s < spec.samples_per_domain; ++s) {
            const int label = pick_class(rng);
            labels[s] = label;
            int color_class = label;
            if (!agree(rng)) {
                const int v = pick_other(rng);
                color_class = v >= label ? v + 1 : v;
            }
            const double level = spec.spurious_amplitude *
                                 class_color_level(color_class, spec.n_classes);
            double* img = data.data() + static_cast<std::size_t>(s) * chw;
            const std::vector<double>& tmpl = templates[label];
            for (std::size_t p = 0; p < hw; ++p) img[p] = spec.template_contrast * tmpl[p];
            for (std::size_t p = 0; p < hw; ++p) img[hw + p] = level;
            for (std::size_t p = 0; p < hw; ++p) img[2 * hw + p] = -level;
            if (spec.noise_sigma > 0.0) {
                for (std::size_t p = 0; p < chw; ++p) img[p] += noise(rng);
            }
        }
        ds.images.push_back(Tensor::from_values(
            {spec.samples_per_domain, SyntheticSpec::kChannels, spec.height, spec.width},
            std::move(data)));
        ds.labels.push_back(std::move(labels));
        ds.domain_names.push_back("domain_" + std::to_string(d));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Reference classifiers: closed-form readers of the two planted signals,
// used as generator ground truth.
// ---------------------------------------------------------------------------

// Correlates channel 0 against every class grating; ties go to the lower class.
inline int nearest_template_class(const SyntheticSpec& spec, std::span<const double> image) {
    const std::size_t hw = static_cast<std::size_t>(spec.height) * spec.width;
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < spec.n_classes; ++k) {
        const std::vector<double> tmpl = class_template(spec, k);
        double score = 0.0;
        for (std::size_t p = 0; p < hw; ++p) score += tmpl[p] * image[p];
        if (score > best_score) {
            best_score = score;
            best = k;
        }
    }
    return best;
}

// Reads the color offset from channels 1/2 and snaps it to the nearest class
// level. Deliberately blind to channel 0.
inline int color_threshold_class(const SyntheticSpec& spec, std::span<const double> image) {
    const std::size_t hw = static_cast<std::size_t>(spec.height) * spec.width;
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += image[hw + p] - image[2 * hw + p];
    const double estimate = acc / (2.0 * hw);
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < spec.n_classes; ++k) {
        const double d = std::abs(estimate - spec.spurious_amplitude *
                                                 class_color_level(k, spec.n_classes));
        if (d < best_dist) {
            best_dist = d;
            best = k;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out split
// ---------------------------------------------------------------------------

struct SplitPlan {
    int held_out_domain = -1;
    std::vector<std::vector<int>> train;        // per domain; empty for held-out
    std::vector<std::vector<int>> validation;   // per domain; empty for held-out

    std::vector<int> source_domains() const {
        std::vector<int> out;
        for (int d = 0; d < static_cast<int>(train.size()); ++d) {
            if (d != held_out_domain) out.push_back(d);
        }
        return out;
    }
};

// Per source domain: seeded shuffle, then one tenth (floor) goes to
// validation and the rest to training. The held-out domain stays whole.
inline SplitPlan split(const Dataset& ds, int held_out_domain, std::uint64_t seed) {
    ds.check_domain(held_out_domain, "held_out_domain");
    SplitPlan plan;
    plan.held_out_domain = held_out_domain;
    plan.train.resize(ds.n_domains());
    plan.validation.resize(ds.n_domains());
    for (int d = 0; d < ds.n_domains(); ++d) {
        if (d == held_out_domain) continue;
        std::vector<int> idx(ds.domain_size(d));
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 rng(derive_seed(seed, streams::kSplit, static_cast<std::uint64_t>(d)));
        std::shuffle(idx.begin(), idx.end(), rng);
        const int val_count = ds.domain_size(d) / 10;
        plan.validation[d].assign(idx.begin(), idx.begin() + val_count);
        plan.train[d].assign(idx.begin() + val_count, idx.end());
    }
    return plan;
}

inline void check_plan(const Dataset& ds, const SplitPlan& plan) {
    if (static_cast<int>(plan.train.size()) != ds.n_domains() ||
        static_cast<int>(plan.validation.size()) != ds.n_domains()) {
        throw ConfigError("split plan covers " + std::to_string(plan.train.size()) +
                          " domains, dataset has " + std::to_string(ds.n_domains()));
    }
    ds.check_domain(plan.held_out_domain, "held_out_domain");
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct DomainBatch {
    Tensor images;                 // [B, C, H, W]
    std::vector<int> labels;
    std::vector<int> domain_ids;   // parallel to rows, grouped by domain
};

// Copies the given rows of one domain into a standalone batch.
inline DomainBatch gather(const Dataset& ds, int domain, std::span<const int> rows) {
    ds.check_domain(domain, "domain");
    const std::size_t chw =
        static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
    DomainBatch out;
    std::vector<double> data(rows.size() * chw);
    out.labels.reserve(rows.size());
    const auto src = ds.images[domain].values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int row = rows[r];
        if (row < 0 || row >= ds.domain_size(domain)) {
            throw ConfigError("sample index " + std::to_string(row) + " out of range for domain " +
                              std::to_string(domain));
        }
        std::copy_n(src.data() + static_cast<std::size_t>(row) * chw, chw,
                    data.data() + r * chw);
        out.labels.push_back(ds.labels[domain][row]);
    }
    out.domain_ids.assign(rows.size(), domain);
    out.images = Tensor::from_values(
        {static_cast<int>(rows.size()), ds.channels, ds.height, ds.width}, std::move(data));
    return out;
}

namespace detail {

inline DomainBatch assemble_balanced(const Dataset& ds,
                                     const std::vector<int>& sources,
                                     const std::vector<std::vector<int>>& rows_per_source) {
    const std::size_t chw = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
    std::size_t total = 0;
    for (const auto& rows : rows_per_source) total += rows.size();
    DomainBatch out;
    std::vector<double> data(total * chw);
    out.labels.reserve(total);
    out.domain_ids.reserve(total);
    std::size_t at = 0;
    for (std::size_t s = 0; s < sources.size(); ++s) {
        const int d = sources[s];
        const auto src = ds.images[d].values();
        for (int row : rows_per_source[s]) {
            std::copy_n(src.data() + static_cast<std::size_t>(row) * chw, chw,
                        data.data() + at * chw);
            out.labels.push_back(ds.labels[d][row]);
            out.domain_ids.push_back(d);
            ++at;
        }
    }
    out.images = Tensor::from_values(
        {static_cast<int>(total), ds.channels, ds.height, ds.width}, std::move(data));
    return out;
}

} // namespace detail

// One epoch of domain-balanced training batches: per-domain seeded shuffle,
// batch_size/N consecutive rows from each source domain per batch, ragged
// tail dropped.
inline std::vector<DomainBatch> epoch_batches(const Dataset& ds, const SplitPlan& plan,
                                              int batch_size, std::uint64_t seed, int epoch) {
    check_plan(ds, plan);
    const std::vector<int> sources = plan.source_domains();
    const int n_sources = static_cast<int>(sources.size());
    if (n_sources == 0) throw ConfigError("split plan has no source domains");
    if (batch_size <= 0 || batch_size % n_sources != 0) {
        throw ConfigError("batch_size " + std::to_string(batch_size) +
                          " is not divisible by the " + std::to_string(n_sources) +
                          " source domains");
    }
    const int per = batch_size / n_sources;

    std::vector<std::vector<int>> shuffled;
    shuffled.reserve(sources.size());
    std::size_t min_rows = std::numeric_limits<std::size_t>::max();
    const std::uint64_t epoch_seed = derive_seed(seed, streams::kBatches,
                                                 static_cast<std::uint64_t>(epoch));
    for (int d : sources) {
        std::vector<int> idx = plan.train[d];
        std::mt19937_64 rng(derive_seed(epoch_seed, static_cast<std::uint64_t>(d)));
        std::shuffle(idx.begin(), idx.end(), rng);
        min_rows = std::min(min_rows, idx.size());
        shuffled.push_back(std::move(idx));
    }
    const std::size_t n_batches = min_rows / per;

    std::vector<DomainBatch> out;
    out.reserve(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
        std::vector<std::vector<int>> rows(sources.size());
        for (std::size_t s = 0; s < sources.size(); ++s) {
            rows[s].assign(shuffled[s].begin() + b * per, shuffled[s].begin() + (b + 1) * per);
        }
        out.push_back(detail::assemble_balanced(ds, sources, rows));
    }
    return out;
}

// Every training row of every source domain as one balanced batch (importance
// oracles want full-data gradients). Requires equal per-domain train counts.
inline DomainBatch full_train_batch(const Dataset& ds, const SplitPlan& plan) {
    check_plan(ds, plan);
    const std::vector<int> sources = plan.source_domains();
    if (sources.empty()) throw ConfigError("split plan has no source domains");
    std::vector<std::vector<int>> rows;
    rows.reserve(sources.size());
    for (int d : sources) {
        if (plan.train[d].size() != plan.train[sources.front()].size()) {
            throw ConfigError("full_train_batch needs equal train counts per domain, got " +
                              std::to_string(plan.train[d].size()) + " vs " +
                              std::to_string(plan.train[sources.front()].size()));
        }
        rows.push_back(plan.train[d]);
    }
    return detail::assemble_balanced(ds, sources, rows);
}

// ---------------------------------------------------------------------------
// Container I/O: magic "DGPD", version, counts, dtype tag, little-endian
// tensors; a JSON sidecar carries domain names and the generator spec echo.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kDatasetMagic[4] = {'D', 'G', 'P', 'D'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kDtypeF64 = 1;

inline std::string printable_magic(const char* buf) {
    std::string out;
    for (int i = 0; i < 4; ++i) {
        const unsigned char c = static_cast<unsigned char>(buf[i]);
        if (c >= 0x20 && c < 0x7f) {
            out += static_cast<char>(c);
        } else {
            char hex[8];
            std::snprintf(hex, sizeof hex, "\\x%02x", c);
            out += hex;
        }
    }
    return out;
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write(detail::kDatasetMagic, 4);
    io::write_u32(os, detail::kDatasetVersion);
    io::write_u32(os, static_cast<std::uint32_t>(ds.n_domains()));
    io::write_u32(os, static_cast<std::uint32_t>(ds.n_classes));
    io::write_u32(os, static_cast<std::uint32_t>(ds.channels));
    io::write_u32(os, static_cast<std::uint32_t>(ds.height));
    io::write_u32(os, static_cast<std::uint32_t>(ds.width));
    io::write_u32(os, detail::kDtypeF64);
    for (int d = 0; d < ds.n_domains(); ++d) {
        io::write_u32(os, static_cast<std::uint32_t>(ds.domain_size(d)));
        const auto vals = ds.images[d].values();
        for (double v : vals) io::write_f64(os, v);
        for (int label : ds.labels[d]) io::write_i32(os, label);
    }
    if (!os) throw Error("failed while writing " + path);

    nlohmann::json manifest;
    manifest["domain_names"] = ds.domain_names;
    if (ds.source_spec) {
        manifest["spec"] = *ds.source_spec;
    } else {
        manifest["spec"] = nullptr;
    }
    std::ofstream ms(path + ".json");
    if (!ms) throw Error("cannot open " + path + ".json for writing");
    ms << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path + " for reading");
    char magic[4];
    io::read_exact(is, magic, 4, "dataset magic");
    if (std::memcmp(magic, detail::kDatasetMagic, 4) != 0) {
        throw BadMagicError("dataset container: expected magic \"DGPD\", read \"" +
                            detail::printable_magic(magic) + "\"");
    }
    const std::uint32_t version = io::read_u32(is, "dataset version");
    if (version != detail::kDatasetVersion) {
        throw VersionMismatchError("dataset container version " + std::to_string(version) +
                                   ", this build reads version " +
                                   std::to_string(detail::kDatasetVersion));
    }
    Dataset ds;
    const std::uint32_t n_domains = io::read_u32(is, "domain count");
    ds.n_classes = static_cast<int>(io::read_u32(is, "class count"));
    ds.channels = static_cast<int>(io::read_u32(is, "channel count"));
    ds.height = static_cast<int>(io::read_u32(is, "image height"));
    ds.width = static_cast<int>(io::read_u32(is, "image width"));
    const std::uint32_t dtype = io::read_u32(is, "dtype tag");
    if (dtype != detail::kDtypeF64) {
        throw FormatError("dataset dtype tag " + std::to_string(dtype) +
                          " unsupported (expected " + std::to_string(detail::kDtypeF64) + ")");
    }
    if (n_domains == 0 || ds.n_classes < 2 || ds.channels <= 0 || ds.height <= 0 ||
        ds.width <= 0) {
        throw FormatError("dataset header has impossible dimensions");
    }
    const std::size_t chw = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
    for (std::uint32_t d = 0; d < n_domains; ++d) {
        const std::uint32_t count = io::read_u32(is, "domain sample count");
        std::vector<double> data;
        io::read_f64_vec(is, data, static_cast<std::size_t>(count) * chw, "domain image data");
        std::vector<int> labels(count);
        for (std::uint32_t s = 0; s < count; ++s) {
            labels[s] = io::read_i32(is, "domain labels");
            if (labels[s] < 0 || labels[s] >= ds.n_classes) {
                throw FormatError("label " + std::to_string(labels[s]) + " out of range for " +
                                  std::to_string(ds.n_classes) + " classes");
            }
        }
        ds.images.push_back(Tensor::from_values(
            {static_cast<int>(count), ds.channels, ds.height, ds.width}, std::move(data)));
        ds.labels.push_back(std::move(labels));
        ds.domain_names.push_back("domain_" + std::to_string(d));
    }

    const std::string manifest_path = path + ".json";
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream ms(manifest_path);
        nlohmann::json manifest;
        try {
            ms >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("dataset manifest " + manifest_path + " is not valid JSON: " +
                              e.what());
        }
        jsonutil::reject_unknown_keys(manifest, {"domain_names", "spec"}, "dataset manifest");
        auto names = jsonutil::require_field<std::vector<std::string>>(manifest, "domain_names",
                                                                       "dataset manifest");
        if (names.size() != ds.images.size()) {
            throw FormatError("dataset manifest names " + std::to_string(names.size()) +
                              " domains, container has " + std::to_string(ds.images.size()));
        }
        ds.domain_names = std::move(names);
        if (manifest.contains("spec") && !manifest["spec"].is_null()) {
            ds.source_spec = synthetic_spec_from_json(manifest["spec"], "dataset manifest spec");
        }
    }
    return ds;
}

} // namespace prunelab
