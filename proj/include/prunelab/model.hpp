#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "prunelab/common.hpp"
#include "prunelab/dataset.hpp"
#include "prunelab/jsonutil.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

struct ArchConfig {
    int input_channels = 3;
    std::vector<int> channels = {16, 32, 32};
    std::vector<int> kernel_sizes = {3, 3, 3};   // square kernels, one per block
    int num_classes = 4;
    bool gate_after_activation = true;           // conv -> relu -> gate when true

    void validate() const {
        if (channels.empty()) {
            throw ConfigError("architecture needs at least one conv block");
        }
        if (kernel_sizes.size() != channels.size()) {
            throw ConfigError("kernel_sizes lists " + std::to_string(kernel_sizes.size()) +
                              " blocks, channels lists " + std::to_string(channels.size()));
        }
        if (input_channels < 1) {
            throw ConfigError("input_channels must be >= 1, got " +
                              std::to_string(input_channels));
        }
        for (int c : channels) {
            if (c < 2) {
                throw ConfigError("every block needs >= 2 channels, got " + std::to_string(c));
            }
        }
        for (int k : kernel_sizes) {
            if (k < 1) {
                throw ConfigError("kernel sizes must be >= 1, got " + std::to_string(k));
            }
        }
        if (num_classes < 2) {
            throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
        }
    }

    int total_filters() const {
        int m = 0;
        for (int c : channels) m += c;
        return m;
    }
};

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
    j = nlohmann::json{{"input_channels", a.input_channels},
                       {"channels", a.channels},
                       {"kernel_sizes", a.kernel_sizes},
                       {"num_classes", a.num_classes},
                       {"gate_after_activation", a.gate_after_activation}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(
        j, {"input_channels", "channels", "kernel_sizes", "num_classes", "gate_after_activation"},
        ctx);
    ArchConfig a;
    a.input_channels = jsonutil::field_or(j, "input_channels", a.input_channels, ctx);
    a.channels = jsonutil::field_or(j, "channels", a.channels, ctx);
    a.kernel_sizes = jsonutil::field_or(j, "kernel_sizes", a.kernel_sizes, ctx);
    a.num_classes = jsonutil::field_or(j, "num_classes", a.num_classes, ctx);
    a.gate_after_activation =
        jsonutil::field_or(j, "gate_after_activation", a.gate_after_activation, ctx);
    a.validate();
    return a;
}

struct FilterId {
    int layer = 0;
    int channel = 0;

    friend bool operator==(const FilterId&, const FilterId&) = default;
    friend auto operator<=>(const FilterId&, const FilterId&) = default;
};

inline std::string to_string(const FilterId& id) {
    return "(" + std::to_string(id.layer) + "," + std::to_string(id.channel) + ")";
}

// A parameter tensor plus an optional per-element freeze mask (set for gate
// vectors once filters are pruned). Optimizers must skip frozen elements.
struct ParamRef {
    Tensor tensor;
    const std::vector<std::uint8_t>* frozen = nullptr;
};

// Convolutional classifier with one trainable gate per conv output channel.
// Pruning is soft: a pruned filter's gate is pinned to zero and frozen, which
// the gate-zero equivalence invariant proves is the same as deleting the
// filter's kernel slice.
class GatedModel {
public:
    struct ConvBlock {
        Tensor kernel;   // [out, in, k, k]
        Tensor bias;     // [out]
        Tensor gates;    // [out], init 1.0
        std::vector<std::uint8_t> pruned;   // 1 = masked, frozen at zero
    };

    GatedModel() = default;

    static GatedModel build(const ArchConfig& arch, std::uint64_t seed) {
        arch.validate();
        GatedModel m;
        m.arch_ = arch;
        int in_ch = arch.input_channels;
        for (std::size_t layer = 0; layer < arch.channels.size(); ++layer) {
            const int out_ch = arch.channels[layer];
            const int k = arch.kernel_sizes[layer];
            std::mt19937_64 rng(derive_seed(seed, streams::kModelInit,
                                            static_cast<std::uint64_t>(layer)));
            ConvBlock block;
            block.kernel = kaiming_tensor(rng, {out_ch, in_ch, k, k}, in_ch * k * k);
            block.bias = Tensor::zeros({out_ch}, true);
            block.gates = Tensor::full({out_ch}, 1.0, true);
            block.pruned.assign(out_ch, 0);
            m.blocks_.push_back(std::move(block));
            in_ch = out_ch;
        }
        std::mt19937_64 rng(derive_seed(seed, streams::kModelInit,
                                        static_cast<std::uint64_t>(arch.channels.size())));
        m.head_weight_ = kaiming_tensor(rng, {arch.num_classes, in_ch}, in_ch);
        m.head_bias_ = Tensor::zeros({arch.num_classes}, true);
        return m;
    }

    const ArchConfig& arch() const { return arch_; }
    int num_blocks() const { return static_cast<int>(blocks_.size()); }
    ConvBlock& block(int i) { return blocks_.at(i); }
    const ConvBlock& block(int i) const { return blocks_.at(i); }
    Tensor& head_weight() { return head_weight_; }
    const Tensor& head_weight() const { return head_weight_; }
    Tensor& head_bias() { return head_bias_; }
    const Tensor& head_bias() const { return head_bias_; }

    int total_filters() const { return arch_.total_filters(); }

    int remaining_filters() const {
        int n = total_filters();
        for (const auto& b : blocks_) {
            for (std::uint8_t p : b.pruned) n -= p ? 1 : 0;
        }
        return n;
    }

    int remaining_in_layer(int layer) const {
        const auto& b = blocks_.at(layer);
        int n = static_cast<int>(b.pruned.size());
        for (std::uint8_t p : b.pruned) n -= p ? 1 : 0;
        return n;
    }

    // Flat filter order is layer-major: block 0 channels, block 1 channels, ...
    FilterId filter_at(int flat) const {
        if (flat < 0 || flat >= total_filters()) {
            throw Error("flat filter index " + std::to_string(flat) + " out of range for M=" +
                        std::to_string(total_filters()));
        }
        int layer = 0;
        while (flat >= arch_.channels[layer]) {
            flat -= arch_.channels[layer];
            ++layer;
        }
        return {layer, flat};
    }

    int flat_index(const FilterId& id) const {
        check_filter(id);
        int base = 0;
        for (int l = 0; l < id.layer; ++l) base += arch_.channels[l];
        return base + id.channel;
    }

    bool is_pruned(const FilterId& id) const {
        check_filter(id);
        return blocks_[id.layer].pruned[id.channel] != 0;
    }

    void mask_filter(const FilterId& id) {
        check_filter(id);
        auto& b = blocks_[id.layer];
        if (b.pruned[id.channel]) {
            throw Error("filter " + to_string(id) + " is already pruned");
        }
        b.pruned[id.channel] = 1;
        b.gates.values_mut()[id.channel] = 0.0;
    }

    // Applies blocks [from, upto).
    Tensor features_between(Tape* tape, Tensor h, int from, int upto) const {
        for (int i = from; i < upto; ++i) {
            const auto& b = blocks_[i];
            h = conv2d(tape, h, b.kernel, b.bias);
            if (arch_.gate_after_activation) {
                h = channel_scale(tape, relu(tape, h), b.gates);
            } else {
                h = relu(tape, channel_scale(tape, h, b.gates));
            }
        }
        return h;
    }

    Tensor features(Tape* tape, const Tensor& images, int upto_blocks) const {
        check_input(images);
        return features_between(tape, images, 0, upto_blocks);
    }

    Tensor head_logits(Tape* tape, const Tensor& block_output) const {
        return linear(tape, global_avg_pool(tape, block_output), head_weight_, head_bias_);
    }

    struct Parts {
        Tensor pooled;   // [B, C_last] penultimate features
        Tensor logits;   // [B, K]
    };

    Parts forward_parts(Tape* tape, const Tensor& images) const {
        Tensor h = features(tape, images, num_blocks());
        Tensor pooled = global_avg_pool(tape, h);
        return {pooled, linear(tape, pooled, head_weight_, head_bias_)};
    }

    Tensor forward(Tape* tape, const Tensor& images) const {
        return forward_parts(tape, images).logits;
    }

    // Kernels, biases, head parameters, and gates; gate refs carry the pruned
    // mask so optimizers never touch a masked entry. Declaration order is
    // also the checkpoint order.
    std::vector<ParamRef> parameters() {
        std::vector<ParamRef> out;
        for (auto& b : blocks_) {
            out.push_back({b.kernel, nullptr});
            out.push_back({b.bias, nullptr});
            out.push_back({b.gates, &b.pruned});
        }
        out.push_back({head_weight_, nullptr});
        out.push_back({head_bias_, nullptr});
        return out;
    }

    std::size_t trainable_parameter_count() const {
        std::size_t n = 0;
        for (const auto& b : blocks_) {
            n += b.kernel.size() + b.bias.size();
            for (std::uint8_t p : b.pruned) n += p ? 0 : 1;
        }
        return n + head_weight_.size() + head_bias_.size();
    }

    std::vector<double> gate_values() const {
        std::vector<double> out;
        out.reserve(total_filters());
        for (const auto& b : blocks_) {
            auto v = b.gates.values();
            out.insert(out.end(), v.begin(), v.end());
        }
        return out;
    }

    std::vector<std::uint8_t> pruned_flags() const {
        std::vector<std::uint8_t> out;
        out.reserve(total_filters());
        for (const auto& b : blocks_) out.insert(out.end(), b.pruned.begin(), b.pruned.end());
        return out;
    }

    GatedModel clone() const {
        GatedModel m;
        m.arch_ = arch_;
        for (const auto& b : blocks_) {
            m.blocks_.push_back({b.kernel.clone(), b.bias.clone(), b.gates.clone(), b.pruned});
        }
        m.head_weight_ = head_weight_.clone();
        m.head_bias_ = head_bias_.clone();
        return m;
    }

    void save(const std::string& path) const;
    static GatedModel load(const std::string& path);

private:
    static Tensor kaiming_tensor(std::mt19937_64& rng, Shape shape, int fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        std::vector<double> vals(shape_numel(shape));
        for (double& v : vals) v = dist(rng);
        return Tensor::from_values(std::move(shape), std::move(vals), true);
    }

    void check_filter(const FilterId& id) const {
        if (id.layer < 0 || id.layer >= num_blocks() || id.channel < 0 ||
            id.channel >= arch_.channels[id.layer]) {
            throw Error("filter " + to_string(id) + " out of range for architecture");
        }
    }

    void check_input(const Tensor& images) const {
        if (images.ndim() != 4 || images.dim(1) != arch_.input_channels) {
            throw ShapeError("model expects [B," + std::to_string(arch_.input_channels) +
                             ",H,W] input, got " + shape_str(images.shape()));
        }
    }

    ArchConfig arch_;
    std::vector<ConvBlock> blocks_;
    Tensor head_weight_;
    Tensor head_bias_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic "PLDG", version, architecture descriptor,
// parameter tensors in declaration order (little-endian doubles), then one
// packed pruned-mask bitmap per block (LSB first).
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kModelMagic[4] = {'P', 'L', 'D', 'G'};
constexpr std::uint32_t kModelVersion = 1;

inline void write_tensor_values(std::ostream& os, const Tensor& t) {
    for (double v : t.values()) io::write_f64(os, v);
}

inline void read_tensor_values(std::istream& is, Tensor& t, const char* what) {
    for (double& v : t.values_mut()) v = io::read_f64(is, what);
}

} // namespace detail

inline void GatedModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write(detail::kModelMagic, 4);
    io::write_u32(os, detail::kModelVersion);
    io::write_u32(os, static_cast<std::uint32_t>(arch_.input_channels));
    io::write_u32(os, static_cast<std::uint32_t>(arch_.num_classes));
    io::write_u32(os, arch_.gate_after_activation ? 1 : 0);
    io::write_u32(os, static_cast<std::uint32_t>(blocks_.size()));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        io::write_u32(os, static_cast<std::uint32_t>(arch_.channels[i]));
        io::write_u32(os, static_cast<std::uint32_t>(arch_.kernel_sizes[i]));
    }
    for (const auto& b : blocks_) {
        detail::write_tensor_values(os, b.kernel);
        detail::write_tensor_values(os, b.bias);
        detail::write_tensor_values(os, b.gates);
    }
    detail::write_tensor_values(os, head_weight_);
    detail::write_tensor_values(os, head_bias_);
    for (const auto& b : blocks_) {
        const std::size_t n = b.pruned.size();
        for (std::size_t at = 0; at < n; at += 8) {
            std::uint8_t byte = 0;
            for (std::size_t bit = 0; bit < 8 && at + bit < n; ++bit) {
                if (b.pruned[at + bit]) byte |= static_cast<std::uint8_t>(1u << bit);
            }
            os.put(static_cast<char>(byte));
        }
    }
    if (!os) throw Error("failed while writing " + path);
}

inline GatedModel GatedModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path + " for reading");
    char magic[4];
    io::read_exact(is, magic, 4, "model magic");
    if (std::memcmp(magic, detail::kModelMagic, 4) != 0) {
        throw BadMagicError("model checkpoint: expected magic \"PLDG\", read \"" +
                            detail::printable_magic(magic) + "\"");
    }
    const std::uint32_t version = io::read_u32(is, "model version");
    if (version != detail::kModelVersion) {
        throw VersionMismatchError("model checkpoint version " + std::to_string(version) +
                                   ", this build reads version " +
                                   std::to_string(detail::kModelVersion));
    }
    ArchConfig arch;
    arch.input_channels = static_cast<int>(io::read_u32(is, "input channel count"));
    arch.num_classes = static_cast<int>(io::read_u32(is, "class count"));
    arch.gate_after_activation = io::read_u32(is, "gate placement flag") != 0;
    const std::uint32_t n_blocks = io::read_u32(is, "block count");
    if (n_blocks == 0 || n_blocks > 1024) {
        throw FormatError("model checkpoint block count " + std::to_string(n_blocks) +
                          " is implausible");
    }
    arch.channels.clear();
    arch.kernel_sizes.clear();
    for (std::uint32_t i = 0; i < n_blocks; ++i) {
        arch.channels.push_back(static_cast<int>(io::read_u32(is, "block channel count")));
        arch.kernel_sizes.push_back(static_cast<int>(io::read_u32(is, "block kernel size")));
    }
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("model checkpoint carries an invalid architecture: ") +
                          e.what());
    }

    GatedModel m = build(arch, 0);
    for (auto& b : m.blocks_) {
        detail::read_tensor_values(is, b.kernel, "block kernel");
        detail::read_tensor_values(is, b.bias, "block bias");
        detail::read_tensor_values(is, b.gates, "block gates");
    }
    detail::read_tensor_values(is, m.head_weight_, "head weight");
    detail::read_tensor_values(is, m.head_bias_, "head bias");
    for (auto& b : m.blocks_) {
        const std::size_t n = b.pruned.size();
        for (std::size_t at = 0; at < n; at += 8) {
            char byte;
            io::read_exact(is, &byte, 1, "pruned mask");
            for (std::size_t bit = 0; bit < 8 && at + bit < n; ++bit) {
                b.pruned[at + bit] =
                    (static_cast<std::uint8_t>(byte) >> bit) & 1u ? 1 : 0;
            }
        }
    }
    for (const auto& b : m.blocks_) {
        for (std::size_t c = 0; c < b.pruned.size(); ++c) {
            if (b.pruned[c] && b.gates.values()[c] != 0.0) {
                throw FormatError("model checkpoint marks filter as pruned but its gate is " +
                                  format_double(b.gates.values()[c]));
            }
        }
    }
    return m;
}

} // namespace prunelab
