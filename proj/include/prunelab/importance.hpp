#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunelab/common.hpp"
#include "prunelab/dataset.hpp"
#include "prunelab/jsonutil.hpp"
#include "prunelab/model.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

enum class LossKind { cross_entropy, mean_squared_error };

inline std::string to_string(LossKind k) {
    return k == LossKind::cross_entropy ? "cross_entropy" : "mean_squared_error";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "cross_entropy") return LossKind::cross_entropy;
    if (s == "mean_squared_error") return LossKind::mean_squared_error;
    throw ConfigError("unknown loss kind \"" + s +
                      "\" (expected cross_entropy or mean_squared_error)");
}

inline Tensor classification_loss(Tape* tape, const Tensor& logits, std::span<const int> labels,
                                  LossKind kind) {
    return kind == LossKind::cross_entropy ? softmax_cross_entropy(tape, logits, labels)
                                           : mse_one_hot(tape, logits, labels);
}

// Appends one loss per row. Uses the same arithmetic as the batched ops, so a
// left-to-right sum of these divided by the count reproduces the op's mean
// bit-for-bit.
inline void per_sample_losses(const Tensor& logits, std::span<const int> labels, LossKind kind,
                              std::vector<double>& out) {
    const int B = logits.dim(0), K = logits.dim(1);
    const double* in = logits.values().data();
    for (int b = 0; b < B; ++b) {
        const double* row = in + static_cast<std::size_t>(b) * K;
        if (kind == LossKind::cross_entropy) {
            double m = row[0];
            for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
            out.push_back(std::log(z) + m - row[labels[b]]);
        } else {
            double acc = 0.0;
            for (int k = 0; k < K; ++k) {
                const double d = row[k] - (k == labels[b] ? 1.0 : 0.0);
                acc += d * d;
            }
            out.push_back(acc);
        }
    }
}

// ---------------------------------------------------------------------------
// Per-domain risks on one tape
// ---------------------------------------------------------------------------

struct DomainRisks {
    std::vector<int> domain_ids;   // ascending
    std::vector<Tensor> risks;     // parallel scalar tensors

    int n() const { return static_cast<int>(risks.size()); }
};

namespace detail {

// Rows of each domain, ascending domain id, original row order preserved.
// Every domain must contribute the same number of rows.
inline std::vector<std::pair<int, std::vector<int>>> balanced_domain_rows(
    const DomainBatch& batch, const std::string& who) {
    if (batch.labels.empty()) throw Error(who + ": empty batch");
    std::map<int, std::vector<int>> rows_by_domain;
    for (std::size_t r = 0; r < batch.domain_ids.size(); ++r) {
        rows_by_domain[batch.domain_ids[r]].push_back(static_cast<int>(r));
    }
    const std::size_t per = rows_by_domain.begin()->second.size();
    for (const auto& [d, rows] : rows_by_domain) {
        if (rows.size() != per) {
            throw Error(who + ": unbalanced batch, domain " + std::to_string(d) + " has " +
                        std::to_string(rows.size()) + " rows vs " + std::to_string(per));
        }
    }
    return {rows_by_domain.begin(), rows_by_domain.end()};
}

inline std::pair<Tensor, std::vector<int>> gather_rows(const DomainBatch& batch,
                                                       std::span<const int> rows) {
    const Shape& shape = batch.images.shape();
    const std::size_t chw = static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
    const double* src = batch.images.values().data();
    std::vector<double> data(rows.size() * chw);
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src + static_cast<std::size_t>(rows[i]) * chw, chw, data.data() + i * chw);
        labels.push_back(batch.labels[rows[i]]);
    }
    Tensor images = Tensor::from_values(
        {static_cast<int>(rows.size()), shape[1], shape[2], shape[3]}, std::move(data));
    return {std::move(images), std::move(labels)};
}

} // namespace detail

// One risk per domain present in the batch: the classification loss over
// that domain's rows alone. All risks live on the given tape, so any scalar
// combination of them can be differentiated back to the gates.
inline DomainRisks per_domain_risks(Tape* tape, const GatedModel& model, const DomainBatch& batch,
                                    LossKind kind = LossKind::cross_entropy) {
    DomainRisks out;
    for (const auto& [d, rows] : detail::balanced_domain_rows(batch, "per_domain_risks")) {
        auto [images, labels] = detail::gather_rows(batch, rows);
        Tensor logits = model.forward(tape, images);
        out.domain_ids.push_back(d);
        out.risks.push_back(classification_loss(tape, logits, labels, kind));
    }
    return out;
}

// Variance of the per-domain risks: the differentiable stand-in for risk on
// an unseen domain.
inline Tensor ood_risk_variance(Tape* tape, const DomainRisks& risks,
                                VarianceKind kind = VarianceKind::population) {
    if (risks.n() < 2) {
        throw Error("ood_risk_variance needs risks from at least 2 domains, got " +
                    std::to_string(risks.n()));
    }
    return variance_of_scalars(tape, risks.risks, kind);
}

// ---------------------------------------------------------------------------
// Score formulas
// ---------------------------------------------------------------------------

struct IoRConfig {
    double alpha = 1.0;
    VarianceKind variance_kind = VarianceKind::population;

    void validate() const {
        if (!std::isfinite(alpha) || alpha < 0.0) {
            throw ConfigError("ior alpha must be finite and >= 0, got " + format_double(alpha));
        }
    }
};

inline void to_json(nlohmann::json& j, const IoRConfig& c) {
    j = nlohmann::json{{"alpha", c.alpha}, {"variance_kind", to_string(c.variance_kind)}};
}

inline IoRConfig ior_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j, {"alpha", "variance_kind"}, ctx);
    IoRConfig c;
    c.alpha = jsonutil::field_or(j, "alpha", c.alpha, ctx);
    c.variance_kind = variance_kind_from_string(
        jsonutil::field_or<std::string>(j, "variance_kind", to_string(c.variance_kind), ctx));
    c.validate();
    return c;
}

// Flat per-filter scores, layer-major; valid is false for pruned filters.
struct RawScores {
    std::vector<double> score;
    std::vector<std::uint8_t> valid;

    std::size_t size() const { return score.size(); }
};

// Gathers d(root)/d(gate) for every filter after a backward pass, flat
// layer-major. Unpruned gates without a gradient are an error.
inline std::vector<double> collect_gate_grads(const GatedModel& model) {
    std::vector<double> out;
    out.reserve(model.total_filters());
    for (int l = 0; l < model.num_blocks(); ++l) {
        const auto& b = model.block(l);
        if (!b.gates.has_grad()) {
            if (model.remaining_in_layer(l) > 0) {
                throw Error("gate gradients missing for layer " + std::to_string(l) +
                            "; run backward before scoring");
            }
            out.insert(out.end(), b.pruned.size(), 0.0);
            continue;
        }
        auto g = b.gates.grad();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

// (gate * mean-risk gradient)^2 per unpruned filter.
inline RawScores taylor_scores(std::span<const double> gate_values,
                               std::span<const double> mean_grads,
                               std::span<const std::uint8_t> pruned) {
    if (gate_values.size() != mean_grads.size() || gate_values.size() != pruned.size()) {
        throw Error("taylor_scores: mismatched input lengths");
    }
    RawScores out;
    out.score.assign(gate_values.size(), 0.0);
    out.valid.assign(gate_values.size(), 0);
    for (std::size_t m = 0; m < gate_values.size(); ++m) {
        if (pruned[m]) continue;
        const double t = gate_values[m] * mean_grads[m];
        out.score[m] = t * t;
        out.valid[m] = 1;
    }
    return out;
}

// Taylor term plus alpha * (gate * variance gradient)^2; the two squared
// terms are computed independently and then summed.
inline RawScores ior_scores(std::span<const double> gate_values,
                            std::span<const double> mean_grads,
                            std::span<const double> variance_grads,
                            std::span<const std::uint8_t> pruned, const IoRConfig& cfg) {
    cfg.validate();
    if (variance_grads.size() != gate_values.size()) {
        throw Error("ior_scores: mismatched input lengths");
    }
    RawScores out = taylor_scores(gate_values, mean_grads, pruned);
    for (std::size_t m = 0; m < gate_values.size(); ++m) {
        if (!out.valid[m]) continue;
        const double v = gate_values[m] * variance_grads[m];
        out.score[m] += cfg.alpha * (v * v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gate gradients for one mini-batch
// ---------------------------------------------------------------------------

struct GateGradientReport {
    std::vector<double> gate_values;        // flat, layer-major
    std::vector<std::uint8_t> pruned;       // parallel
    std::vector<double> mean_grads;         // d(mean risk)/d(gate)
    std::vector<double> variance_grads;     // d(risk variance)/d(gate); zeros if not computed
    bool variance_computed = false;
    double mean_risk_value = 0.0;
    std::vector<double> risk_values;        // per domain, ascending domain id
};

// Builds the risk graph once and differentiates both the mean risk and the
// risk variance through it: two backward passes per mini-batch, independent
// of the domain count. Runs variance first so the parameter gradients left
// on the model afterward are exactly d(mean risk)/d(parameter), ready for an
// optimizer step. Any gradients from a previous batch are cleared up front.
inline GateGradientReport gate_gradients(GatedModel& model, const DomainBatch& batch,
                                         LossKind kind = LossKind::cross_entropy,
                                         VarianceKind variance_kind = VarianceKind::population) {
    for (ParamRef& p : model.parameters()) p.tensor.zero_grad();
    Tape tape;
    DomainRisks risks = per_domain_risks(&tape, model, batch, kind);
    Tensor rbar = mean_of_scalars(&tape, risks.risks);

    GateGradientReport out;
    out.gate_values = model.gate_values();
    out.pruned = model.pruned_flags();
    out.mean_risk_value = rbar.item();
    for (int d = 0; d < risks.n(); ++d) {
        const double r = risks.risks[d].item();
        if (!std::isfinite(r)) {
            throw DivergenceError("risk for domain " + std::to_string(risks.domain_ids[d]) +
                                  " is not finite: " + format_double(r));
        }
        out.risk_values.push_back(r);
    }

    if (risks.n() >= 2) {
        Tensor var = variance_of_scalars(&tape, risks.risks, variance_kind);
        tape.backward(var);
        out.variance_grads = collect_gate_grads(model);
        out.variance_computed = true;
        tape.zero_grads();
    } else {
        out.variance_grads.assign(out.gate_values.size(), 0.0);
    }

    tape.backward(rbar);
    out.mean_grads = collect_gate_grads(model);
    return out;
}

// ---------------------------------------------------------------------------
// EMA accumulation across mini-batches
// ---------------------------------------------------------------------------

class ImportanceTable {
public:
    ImportanceTable() = default;

    explicit ImportanceTable(std::vector<int> layer_sizes, double ema_coefficient = 0.9)
        : layer_sizes_(std::move(layer_sizes)), coefficient_(ema_coefficient) {
        if (!(coefficient_ > 0.0 && coefficient_ < 1.0)) {
            throw ConfigError("ema coefficient must lie in (0,1), got " +
                              format_double(coefficient_));
        }
        int total = 0;
        for (int c : layer_sizes_) {
            if (c <= 0) throw ConfigError("importance table layer sizes must be positive");
            total += c;
        }
        raw_.assign(total, 0.0);
        ema_.assign(total, 0.0);
        pruned_.assign(total, 0);
    }

    std::size_t size() const { return ema_.size(); }
    double ema_coefficient() const { return coefficient_; }
    int updates_seen() const { return updates_seen_; }
    double raw(std::size_t m) const { return raw_.at(m); }
    double ema(std::size_t m) const { return ema_.at(m); }
    bool is_pruned(std::size_t m) const { return pruned_.at(m) != 0; }
    const std::vector<int>& layer_sizes() const { return layer_sizes_; }

    FilterId filter_at(std::size_t m) const {
        int flat = static_cast<int>(m);
        for (std::size_t l = 0; l < layer_sizes_.size(); ++l) {
            if (flat < layer_sizes_[l]) return {static_cast<int>(l), flat};
            flat -= layer_sizes_[l];
        }
        throw Error("importance table index " + std::to_string(m) + " out of range");
    }

    void mark_pruned(std::size_t m) {
        if (pruned_.at(m)) {
            throw Error("importance table entry " + to_string(filter_at(m)) +
                        " already marked pruned");
        }
        pruned_[m] = 1;
    }

    // ema <- c*ema + (1-c)*raw for every unpruned filter. The raw scores must
    // cover exactly the unpruned set.
    void ema_update(const RawScores& scores) {
        if (scores.size() != size()) {
            throw Error("ema_update got " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(size()) + " filters");
        }
        for (std::size_t m = 0; m < size(); ++m) {
            if (pruned_[m] && scores.valid[m]) {
                throw Error("ema_update: score supplied for pruned filter " +
                            to_string(filter_at(m)));
            }
            if (!pruned_[m] && !scores.valid[m]) {
                throw Error("ema_update: missing score for unpruned filter " +
                            to_string(filter_at(m)));
            }
        }
        for (std::size_t m = 0; m < size(); ++m) {
            if (!scores.valid[m]) continue;
            if (!(scores.score[m] >= 0.0) || !std::isfinite(scores.score[m])) {
                throw Error("ema_update: score for filter " + to_string(filter_at(m)) +
                            " is not a finite non-negative value: " +
                            format_double(scores.score[m]));
            }
            raw_[m] = scores.score[m];
            ema_[m] = coefficient_ * ema_[m] + (1.0 - coefficient_) * scores.score[m];
        }
        ++updates_seen_;
    }

    // Forgets accumulated scores for the surviving filters; pruned entries
    // keep their last state for inspection.
    void reset_scores() {
        for (std::size_t m = 0; m < size(); ++m) {
            if (pruned_[m]) continue;
            raw_[m] = 0.0;
            ema_[m] = 0.0;
        }
    }

    void write_csv(std::ostream& os) const {
        os << "layer_index,channel_index,raw_score,ema_score,pruned\n";
        for (std::size_t m = 0; m < size(); ++m) {
            const FilterId id = filter_at(m);
            os << id.layer << "," << id.channel << "," << format_double(raw_[m]) << ","
               << format_double(ema_[m]) << "," << (pruned_[m] ? 1 : 0) << "\n";
        }
    }

    void write_csv(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw Error("cannot open " + path + " for writing");
        write_csv(os);
        if (!os) throw Error("failed while writing " + path);
    }

private:
    std::vector<int> layer_sizes_;
    double coefficient_ = 0.9;
    std::vector<double> raw_;
    std::vector<double> ema_;
    std::vector<std::uint8_t> pruned_;
    int updates_seen_ = 0;
};

// ---------------------------------------------------------------------------
// Exact leave-one-out importance
//
// The oracle needs many model evaluations over the same data, so the eval set
// is grouped per domain up front and evaluation reuses activations of the
// blocks below the filter being tested. Per-sample losses are always summed
// left to right in dataset order, which keeps every path here bit-identical
// to two plain forward passes through the public API.
// ---------------------------------------------------------------------------

struct EvalSet {
    std::vector<int> domain_ids;
    std::vector<Tensor> images;              // per domain
    std::vector<std::vector<int>> labels;    // per domain

    int n_domains() const { return static_cast<int>(images.size()); }

    // Unlike the training-side grouping, no balance requirement here.
    static EvalSet from_batch(const DomainBatch& batch) {
        std::map<int, std::vector<int>> rows_by_domain;
        for (std::size_t r = 0; r < batch.domain_ids.size(); ++r) {
            rows_by_domain[batch.domain_ids[r]].push_back(static_cast<int>(r));
        }
        EvalSet out;
        for (const auto& [d, rows] : rows_by_domain) {
            auto [images, labels] = detail::gather_rows(batch, rows);
            out.domain_ids.push_back(d);
            out.images.push_back(std::move(images));
            out.labels.push_back(std::move(labels));
        }
        return out;
    }

    static EvalSet from_dataset_train(const Dataset& ds, const SplitPlan& plan) {
        return from_batch(full_train_batch(ds, plan));
    }
};

namespace detail {

inline Tensor slice_rows(const Tensor& images, int first, int count) {
    const Shape& s = images.shape();
    const std::size_t chw = static_cast<std::size_t>(s[1]) * s[2] * s[3];
    std::vector<double> data(static_cast<std::size_t>(count) * chw);
    std::copy_n(images.values().data() + static_cast<std::size_t>(first) * chw, data.size(),
                data.data());
    return Tensor::from_values({count, s[1], s[2], s[3]}, std::move(data));
}

} // namespace detail

constexpr int kEvalChunkRows = 256;

// Mean over domains of the per-domain mean loss, computed without a tape.
inline double mean_risk(const GatedModel& model, const EvalSet& eval,
                        LossKind kind = LossKind::cross_entropy) {
    if (eval.n_domains() == 0) throw Error("mean_risk: empty eval set");
    double sum_over_domains = 0.0;
    std::vector<double> losses;
    for (int d = 0; d < eval.n_domains(); ++d) {
        const int rows = eval.images[d].dim(0);
        if (rows == 0) {
            throw Error("mean_risk: domain " + std::to_string(eval.domain_ids[d]) +
                        " has no rows");
        }
        double total = 0.0;
        for (int first = 0; first < rows; first += kEvalChunkRows) {
            const int count = std::min(kEvalChunkRows, rows - first);
            Tensor chunk = detail::slice_rows(eval.images[d], first, count);
            Tensor logits = model.forward(nullptr, chunk);
            losses.clear();
            per_sample_losses(logits, std::span<const int>(eval.labels[d]).subspan(first, count),
                              kind, losses);
            for (double v : losses) total += v;
        }
        sum_over_domains += total / rows;
    }
    return sum_over_domains / eval.n_domains();
}

// Squared change of the mean risk when one gate is forced to zero. The gate
// is restored to its exact previous bits afterward.
inline double exact_importance(GatedModel& model, const EvalSet& eval, const FilterId& id,
                               LossKind kind = LossKind::cross_entropy) {
    if (model.is_pruned(id)) {
        throw Error("exact_importance: filter " + to_string(id) + " is already pruned");
    }
    const double base = mean_risk(model, eval, kind);
    auto gates = model.block(id.layer).gates.values_mut();
    const double keep = gates[id.channel];
    gates[id.channel] = 0.0;
    const double zeroed = mean_risk(model, eval, kind);
    gates[id.channel] = keep;
    const double diff = base - zeroed;
    return diff * diff;
}

// Exact importance for every unpruned filter. Per chunk, the activations
// below the layer under test and the layer's own convolution are computed
// once and shared across its filters; only the gate application and the
// downstream blocks rerun per filter. Neither cache depends on the gate
// being flipped, so every score is bit-identical to exact_importance.
inline RawScores exact_importance_all(GatedModel& model, const EvalSet& eval,
                                      LossKind kind = LossKind::cross_entropy) {
    const int M = model.total_filters();
    RawScores out;
    out.score.assign(M, 0.0);
    out.valid.assign(M, 0);

    const double base = mean_risk(model, eval, kind);
    const bool gate_after = model.arch().gate_after_activation;

    std::vector<double> losses;
    for (int layer = 0; layer < model.num_blocks(); ++layer) {
        std::vector<int> channels;
        for (int c = 0; c < model.arch().channels[layer]; ++c) {
            if (!model.is_pruned({layer, c})) channels.push_back(c);
        }
        if (channels.empty()) continue;

        // risk_totals[i][d] accumulates per-sample losses for channel i with
        // its gate zeroed, left to right over domain d's rows.
        std::vector<std::vector<double>> risk_totals(channels.size(),
                                                     std::vector<double>(eval.n_domains(), 0.0));
        GatedModel::ConvBlock& blk = model.block(layer);
        auto gates = blk.gates.values_mut();

        for (int d = 0; d < eval.n_domains(); ++d) {
            const int rows = eval.images[d].dim(0);
            for (int first = 0; first < rows; first += kEvalChunkRows) {
                const int count = std::min(kEvalChunkRows, rows - first);
                Tensor chunk = detail::slice_rows(eval.images[d], first, count);
                Tensor below = model.features(nullptr, chunk, layer);
                Tensor pre = conv2d(nullptr, below, blk.kernel, blk.bias);
                Tensor act = gate_after ? relu(nullptr, pre) : pre;
                const auto labels =
                    std::span<const int>(eval.labels[d]).subspan(first, count);
                for (std::size_t i = 0; i < channels.size(); ++i) {
                    const double keep = gates[channels[i]];
                    gates[channels[i]] = 0.0;
                    Tensor gated = channel_scale(nullptr, act, blk.gates);
                    Tensor h = gate_after ? gated : relu(nullptr, gated);
                    h = model.features_between(nullptr, h, layer + 1, model.num_blocks());
                    Tensor logits = model.head_logits(nullptr, h);
                    gates[channels[i]] = keep;
                    losses.clear();
                    per_sample_losses(logits, labels, kind, losses);
                    double& total = risk_totals[i][d];
                    for (double v : losses) total += v;
                }
            }
        }

        for (std::size_t i = 0; i < channels.size(); ++i) {
            double sum_over_domains = 0.0;
            for (int d = 0; d < eval.n_domains(); ++d) {
                sum_over_domains += risk_totals[i][d] / eval.images[d].dim(0);
            }
            const double zeroed = sum_over_domains / eval.n_domains();
            const double diff = base - zeroed;
            const int flat = model.flat_index({layer, channels[i]});
            out.score[flat] = diff * diff;
            out.valid[flat] = 1;
        }
    }
    return out;
}

} // namespace prunelab
