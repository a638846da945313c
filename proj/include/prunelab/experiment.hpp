#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunelab/common.hpp"
#include "prunelab/dataset.hpp"
#include "prunelab/importance.hpp"
#include "prunelab/jsonutil.hpp"
#include "prunelab/model.hpp"
#include "prunelab/pruning.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

// ---------------------------------------------------------------------------
// Correlation alignment penalty
//
// Mean over source-domain pairs of the squared Frobenius distance between the
// sample covariances of the penultimate features, scaled by 1/(4d^2).
// ---------------------------------------------------------------------------

inline Tensor coral_penalty(Tape* tape, const std::vector<Tensor>& pooled) {
    const int N = static_cast<int>(pooled.size());
    if (N < 2) {
        throw Error("coral_penalty needs features from at least 2 domains, got " +
                    std::to_string(N));
    }
    const int d = pooled[0].dim(1);
    std::vector<std::vector<double>> centered(N), cov(N);
    std::vector<int> counts(N);
    for (int i = 0; i < N; ++i) {
        if (pooled[i].ndim() != 2 || pooled[i].dim(1) != d) {
            throw ShapeError("coral_penalty expects [n,d] feature blocks with equal d, got " +
                             shape_str(pooled[i].shape()));
        }
        const int n = pooled[i].dim(0);
        if (n < 2) {
            throw Error("coral_penalty needs at least 2 samples per domain, got " +
                        std::to_string(n));
        }
        counts[i] = n;
        const double* x = pooled[i].values().data();
        std::vector<double> mean(d, 0.0);
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < d; ++c) mean[c] += x[static_cast<std::size_t>(r) * d + c];
        }
        for (int c = 0; c < d; ++c) mean[c] /= n;
        centered[i].resize(static_cast<std::size_t>(n) * d);
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < d; ++c) {
                centered[i][static_cast<std::size_t>(r) * d + c] =
                    x[static_cast<std::size_t>(r) * d + c] - mean[c];
            }
        }
        cov[i].assign(static_cast<std::size_t>(d) * d, 0.0);
        for (int r = 0; r < n; ++r) {
            const double* row = centered[i].data() + static_cast<std::size_t>(r) * d;
            for (int p = 0; p < d; ++p) {
                for (int q = 0; q < d; ++q) {
                    cov[i][static_cast<std::size_t>(p) * d + q] += row[p] * row[q];
                }
            }
        }
        for (double& v : cov[i]) v /= (n - 1);
    }

    const int pairs = N * (N - 1) / 2;
    const double scale = 1.0 / (4.0 * d * d);
    double penalty = 0.0;
    for (int i = 0; i < N; ++i) {
        for (int j = i + 1; j < N; ++j) {
            double frob = 0.0;
            for (std::size_t k = 0; k < cov[i].size(); ++k) {
                const double diff = cov[i][k] - cov[j][k];
                frob += diff * diff;
            }
            penalty += frob * scale;
        }
    }
    Tensor out = Tensor::scalar(penalty / pairs);

    bool any_grad = false;
    for (const Tensor& t : pooled) {
        detail::check_same_tape(tape, {&t}, "coral_penalty");
        if (t.requires_grad()) any_grad = true;
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tape::NodePtr> nodes;
        for (const Tensor& t : pooled) nodes.push_back(t.node_ptr());
        auto out_n = out.node_ptr();
        tape->record(
            "coral_penalty", nodes, out_n,
            [nodes, out_n, centered = std::move(centered), cov = std::move(cov), counts, N, d,
             pairs, scale](std::uint64_t epoch) {
                const double adj = out_n->adjoint[0];
                // d(penalty)/d(cov_i) = (2*adj*scale/pairs) * (N*cov_i - sum of cov)
                std::vector<double> cov_sum(static_cast<std::size_t>(d) * d, 0.0);
                for (int i = 0; i < N; ++i) {
                    for (std::size_t k = 0; k < cov_sum.size(); ++k) cov_sum[k] += cov[i][k];
                }
                for (int i = 0; i < N; ++i) {
                    if (!nodes[i]->requires_grad) continue;
                    const int n = counts[i];
                    std::vector<double> g_cov(static_cast<std::size_t>(d) * d);
                    const double w = 2.0 * adj * scale / pairs;
                    for (std::size_t k = 0; k < g_cov.size(); ++k) {
                        g_cov[k] = w * (N * cov[i][k] - cov_sum[k]);
                    }
                    // cov = centered^T centered / (n-1) with a symmetric upstream
                    // gradient, so d/d(centered) = 2 * centered * g_cov / (n-1).
                    std::vector<double> g_cent(static_cast<std::size_t>(n) * d, 0.0);
                    for (int r = 0; r < n; ++r) {
                        const double* row = centered[i].data() + static_cast<std::size_t>(r) * d;
                        double* grow = g_cent.data() + static_cast<std::size_t>(r) * d;
                        for (int p = 0; p < d; ++p) {
                            double acc = 0.0;
                            for (int q = 0; q < d; ++q) {
                                acc += row[q] * g_cov[static_cast<std::size_t>(q) * d + p];
                            }
                            grow[p] = 2.0 * acc / (n - 1);
                        }
                    }
                    // Centering: subtract the per-column mean of the gradient.
                    auto dst = nodes[i]->adjoint_for(epoch);
                    for (int c = 0; c < d; ++c) {
                        double col_mean = 0.0;
                        for (int r = 0; r < n; ++r) {
                            col_mean += g_cent[static_cast<std::size_t>(r) * d + c];
                        }
                        col_mean /= n;
                        for (int r = 0; r < n; ++r) {
                            dst[static_cast<std::size_t>(r) * d + c] +=
                                g_cent[static_cast<std::size_t>(r) * d + c] - col_mean;
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-domain forward pass keeping the penultimate features
// ---------------------------------------------------------------------------

struct DomainForward {
    std::vector<int> domain_ids;
    std::vector<std::vector<int>> labels;   // per domain, anchor order
    std::vector<Tensor> pooled;             // per domain, [n, d]
    std::vector<Tensor> risks;              // per domain, scalar

    int n() const { return static_cast<int>(domain_ids.size()); }
};

inline DomainForward per_domain_forward(Tape* tape, const GatedModel& model,
                                        const DomainBatch& batch,
                                        LossKind kind = LossKind::cross_entropy) {
    DomainForward out;
    for (const auto& [d, rows] : detail::balanced_domain_rows(batch, "per_domain_forward")) {
        auto [images, labels] = detail::gather_rows(batch, rows);
        GatedModel::Parts parts = model.forward_parts(tape, images);
        out.domain_ids.push_back(d);
        out.risks.push_back(classification_loss(tape, parts.logits, labels, kind));
        out.pooled.push_back(std::move(parts.pooled));
        out.labels.push_back(std::move(labels));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mixup
// ---------------------------------------------------------------------------

struct MixupDraw {
    double lambda = 0.5;
    std::vector<int> partner;   // per batch row, a row index from another domain
};

// One lambda per step from Beta(beta, beta) via two gamma draws, then one
// cross-domain partner per row.
inline MixupDraw draw_mixup(std::mt19937_64& rng, const DomainBatch& batch, double beta) {
    std::gamma_distribution<double> gamma(beta, 1.0);
    const double g1 = gamma(rng), g2 = gamma(rng);
    MixupDraw draw;
    draw.lambda = (g1 + g2 > 0.0) ? g1 / (g1 + g2) : 0.5;

    std::map<int, std::vector<int>> others;   // candidate partner rows per domain
    for (int d : batch.domain_ids) others[d];
    for (auto& [d, rows] : others) {
        for (std::size_t s = 0; s < batch.domain_ids.size(); ++s) {
            if (batch.domain_ids[s] != d) rows.push_back(static_cast<int>(s));
        }
    }
    for (std::size_t r = 0; r < batch.domain_ids.size(); ++r) {
        const std::vector<int>& rows = others[batch.domain_ids[r]];
        if (rows.empty()) {
            throw Error("mixup needs rows from at least 2 domains in every batch");
        }
        std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
        draw.partner.push_back(rows[pick(rng)]);
    }
    return draw;
}

// Convex input mix against the partner rows, then the convex combination of
// the two label losses: lambda*loss(y_a) + (1-lambda)*loss(y_b). Rows keep
// their anchor's domain, so the per-domain risk convention carries over and
// lambda = 1 is exactly an unmixed step.
inline Tensor mixup_loss(Tape* tape, const GatedModel& model, const DomainBatch& batch,
                         const MixupDraw& draw, LossKind kind = LossKind::cross_entropy) {
    if (draw.partner.size() != batch.labels.size()) {
        throw Error("mixup draw covers " + std::to_string(draw.partner.size()) + " rows, batch has " +
                    std::to_string(batch.labels.size()));
    }
    if (!(draw.lambda >= 0.0 && draw.lambda <= 1.0)) {
        throw Error("mixup lambda must lie in [0,1], got " + format_double(draw.lambda));
    }
    const Shape& shape = batch.images.shape();
    const std::size_t chw = static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
    const double* src = batch.images.values().data();

    std::vector<Tensor> anchor_risks, partner_risks;
    for (const auto& [d, rows] : detail::balanced_domain_rows(batch, "mixup_loss")) {
        std::vector<double> data(rows.size() * chw);
        std::vector<int> labels_a, labels_b;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double* a = src + static_cast<std::size_t>(rows[i]) * chw;
            const double* b = src + static_cast<std::size_t>(draw.partner[rows[i]]) * chw;
            double* o = data.data() + i * chw;
            for (std::size_t k = 0; k < chw; ++k) {
                o[k] = draw.lambda * a[k] + (1.0 - draw.lambda) * b[k];
            }
            labels_a.push_back(batch.labels[rows[i]]);
            labels_b.push_back(batch.labels[draw.partner[rows[i]]]);
        }
        Tensor mixed = Tensor::from_values(
            {static_cast<int>(rows.size()), shape[1], shape[2], shape[3]}, std::move(data));
        Tensor logits = model.forward(tape, mixed);
        anchor_risks.push_back(classification_loss(tape, logits, labels_a, kind));
        partner_risks.push_back(classification_loss(tape, logits, labels_b, kind));
    }
    const std::vector<Tensor> terms = {mean_of_scalars(tape, anchor_risks),
                                       mean_of_scalars(tape, partner_risks)};
    const std::vector<double> weights = {draw.lambda, 1.0 - draw.lambda};
    return linear_combination(tape, terms, weights);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

enum class PretrainMethod { erm, coral, mixup };

inline std::string to_string(PretrainMethod m) {
    switch (m) {
        case PretrainMethod::erm: return "erm";
        case PretrainMethod::coral: return "coral";
        default: return "mixup";
    }
}

inline PretrainMethod pretrain_method_from_string(const std::string& s) {
    if (s == "erm") return PretrainMethod::erm;
    if (s == "coral") return PretrainMethod::coral;
    if (s == "mixup") return PretrainMethod::mixup;
    throw ConfigError("unknown pretrain method \"" + s + "\" (expected erm, coral, or mixup)");
}

struct PretrainConfig {
    PretrainMethod method = PretrainMethod::erm;
    double coral_lambda = 1.0;
    double mixup_beta = 0.2;
    SgdConfig sgd;
    LossKind loss = LossKind::cross_entropy;
    int batch_size = 64;
    int epochs = 30;

    void validate() const {
        sgd.validate();
        if (batch_size < 1) {
            throw ConfigError("pretrain batch_size must be >= 1, got " +
                              std::to_string(batch_size));
        }
        if (epochs < 0) {
            throw ConfigError("pretrain epochs must be >= 0, got " + std::to_string(epochs));
        }
        if (!std::isfinite(coral_lambda) || coral_lambda < 0.0) {
            throw ConfigError("coral_lambda must be finite and >= 0, got " +
                              format_double(coral_lambda));
        }
        if (!std::isfinite(mixup_beta) || mixup_beta <= 0.0) {
            throw ConfigError("mixup_beta must be finite and > 0, got " +
                              format_double(mixup_beta));
        }
    }
};

// One update on the selected pretraining loss; returns the loss value. The
// lambda = 0 correlation penalty is skipped entirely, which keeps the
// trajectory bit-identical to plain risk minimization.
inline double pretrain_step(GatedModel& model, SgdOptimizer& optimizer, const DomainBatch& batch,
                            const PretrainConfig& cfg, std::mt19937_64& mixup_rng) {
    optimizer.zero_grads();
    Tape tape;
    Tensor loss;
    switch (cfg.method) {
        case PretrainMethod::erm: {
            DomainRisks risks = per_domain_risks(&tape, model, batch, cfg.loss);
            loss = mean_of_scalars(&tape, risks.risks);
            break;
        }
        case PretrainMethod::coral: {
            DomainForward fwd = per_domain_forward(&tape, model, batch, cfg.loss);
            if (fwd.n() < 2) {
                throw Error("coral pretraining needs at least 2 source domains, got " +
                            std::to_string(fwd.n()));
            }
            Tensor risk = mean_of_scalars(&tape, fwd.risks);
            if (cfg.coral_lambda == 0.0) {
                loss = risk;
            } else {
                const std::vector<Tensor> terms = {risk, coral_penalty(&tape, fwd.pooled)};
                const std::vector<double> weights = {1.0, cfg.coral_lambda};
                loss = linear_combination(&tape, terms, weights);
            }
            break;
        }
        case PretrainMethod::mixup: {
            MixupDraw draw = draw_mixup(mixup_rng, batch, cfg.mixup_beta);
            loss = mixup_loss(&tape, model, batch, draw, cfg.loss);
            break;
        }
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw DivergenceError("pretraining loss is not finite: " + format_double(value));
    }
    tape.backward(loss);
    optimizer.step();
    return value;
}

struct PretrainResult {
    GatedModel final_model;
    GatedModel best_model;
    double best_val_accuracy = 0.0;
    int best_epoch = -1;
    int steps_run = 0;
    EventLog events;
};

// Minimizes the selected loss over the source training rows, tracking the
// checkpoint with the best pooled validation accuracy. Zero epochs returns
// the initialized model unchanged.
inline PretrainResult pretrain(const GatedModel& init, const Dataset& ds, const SplitPlan& plan,
                               const PretrainConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    check_plan(ds, plan);
    if (cfg.method == PretrainMethod::coral && plan.source_domains().size() < 2) {
        throw ConfigError("coral pretraining needs at least 2 source domains");
    }

    PretrainResult out;
    out.final_model = init.clone();
    out.best_model = init.clone();
    GatedModel& model = out.final_model;
    SgdOptimizer optimizer(model.parameters(), cfg.sgd);
    std::mt19937_64 mixup_rng = make_rng(seed, streams::kMixup);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        int loss_count = 0;
        for (const DomainBatch& batch : epoch_batches(ds, plan, cfg.batch_size, seed, epoch)) {
            loss_sum += pretrain_step(model, optimizer, batch, cfg, mixup_rng);
            ++loss_count;
            ++step;
        }
        if (loss_count == 0) {
            throw ConfigError("pretrain batch_size " + std::to_string(cfg.batch_size) +
                              " exceeds the available training rows");
        }
        const double val = validation_accuracy_percent(model, ds, plan);
        out.events.record(step, "epoch",
                          {{"epoch", epoch},
                           {"val_accuracy", val},
                           {"train_loss_mean", loss_sum / loss_count}});
        if (out.best_epoch < 0 || val > out.best_val_accuracy) {
            out.best_val_accuracy = val;
            out.best_epoch = epoch;
            out.best_model = model.clone();
            out.events.record(step, "best", {{"epoch", epoch}, {"val_accuracy", val}});
        }
    }
    out.steps_run = step;
    if (cfg.epochs == 0) {
        out.best_val_accuracy = validation_accuracy_percent(model, ds, plan);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalAccuracy {
    double intra = 0.0;   // pooled source validation, percent
    double cross = 0.0;   // entire held-out domain, percent
};

inline EvalAccuracy evaluate(const GatedModel& model, const Dataset& ds, const SplitPlan& plan) {
    check_plan(ds, plan);
    EvalAccuracy out;
    out.intra = validation_accuracy_percent(model, ds, plan);
    const int held = plan.held_out_domain;
    out.cross = accuracy_percent(model, ds.images[held], ds.labels[held]);
    return out;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"method", to_string(c.method)},
                       {"coral_lambda", c.coral_lambda},
                       {"mixup_beta", c.mixup_beta},
                       {"sgd", c.sgd},
                       {"loss", to_string(c.loss)},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs}};
}

inline PretrainConfig pretrain_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(
        j, {"method", "coral_lambda", "mixup_beta", "sgd", "loss", "batch_size", "epochs"}, ctx);
    PretrainConfig c;
    c.method = pretrain_method_from_string(
        jsonutil::field_or<std::string>(j, "method", to_string(c.method), ctx));
    c.coral_lambda = jsonutil::field_or(j, "coral_lambda", c.coral_lambda, ctx);
    c.mixup_beta = jsonutil::field_or(j, "mixup_beta", c.mixup_beta, ctx);
    if (j.contains("sgd")) c.sgd = sgd_from_json(j["sgd"], ctx + ".sgd");
    c.loss = loss_kind_from_string(
        jsonutil::field_or<std::string>(j, "loss", to_string(c.loss), ctx));
    c.batch_size = jsonutil::field_or(j, "batch_size", c.batch_size, ctx);
    c.epochs = jsonutil::field_or(j, "epochs", c.epochs, ctx);
    c.validate();
    return c;
}

struct ExperimentConfig {
    std::optional<SyntheticSpec> dataset_spec;   // exactly one of spec or path
    std::string dataset_path;
    int held_out_domain = -1;
    ArchConfig architecture;
    PretrainConfig pretrain;
    PruneLoopConfig prune;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string output_dir = "results";

    void validate() const {
        if (dataset_spec.has_value() == !dataset_path.empty()) {
            throw ConfigError(
                "dataset must give exactly one of \"spec\" or \"path\"");
        }
        if (held_out_domain < 0) {
            throw ConfigError("held_out_domain must be >= 0, got " +
                              std::to_string(held_out_domain));
        }
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        architecture.validate();
        pretrain.validate();
        prune.validate(architecture.channels);
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json dataset;
    if (c.dataset_spec) {
        dataset = nlohmann::json{{"spec", *c.dataset_spec}};
    } else {
        dataset = nlohmann::json{{"path", c.dataset_path}};
    }
    j = nlohmann::json{{"dataset", dataset},
                       {"held_out_domain", c.held_out_domain},
                       {"architecture", c.architecture},
                       {"pretrain", c.pretrain},
                       {"prune", c.prune},
                       {"seeds", c.seeds},
                       {"output_dir", c.output_dir}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j,
                                  {"dataset", "held_out_domain", "architecture", "pretrain",
                                   "prune", "seeds", "output_dir"},
                                  ctx);
    ExperimentConfig c;
    const nlohmann::json dataset = jsonutil::require_field<nlohmann::json>(j, "dataset", ctx);
    jsonutil::reject_unknown_keys(dataset, {"spec", "path"}, ctx + ".dataset");
    if (dataset.contains("spec")) {
        c.dataset_spec = synthetic_spec_from_json(dataset["spec"], ctx + ".dataset.spec");
    }
    c.dataset_path =
        jsonutil::field_or<std::string>(dataset, "path", "", ctx + ".dataset");
    c.held_out_domain = jsonutil::require_field<int>(j, "held_out_domain", ctx);
    if (j.contains("architecture")) {
        c.architecture = arch_from_json(j["architecture"], ctx + ".architecture");
    }
    if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j["pretrain"], ctx + ".pretrain");
    if (j.contains("prune")) c.prune = prune_loop_from_json(j["prune"], ctx + ".prune");
    c.seeds = jsonutil::field_or(j, "seeds", c.seeds, ctx);
    c.output_dir = jsonutil::field_or(j, "output_dir", c.output_dir, ctx);
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path + " for reading");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("experiment config " + path + " is not valid JSON: " + e.what());
    }
    return experiment_from_json(j, "experiment config");
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct SeedOutcome {
    std::uint64_t seed = 0;
    EvalAccuracy before;
    EvalAccuracy after;
    double remaining_ratio = 1.0;
    double pretrain_val_accuracy = 0.0;
    double pruned_val_accuracy = 0.0;
};

struct SeedFailure {
    std::uint64_t seed = 0;
    std::string error;
};

struct MeanStddev {
    double mean = 0.0;
    double stddev = 0.0;
};

// Mean is the left-to-right sum divided by the count; stddev is the sample
// form (n-1), zero for a single value.
inline MeanStddev mean_stddev(std::span<const double> xs) {
    if (xs.empty()) throw Error("mean_stddev of an empty set");
    MeanStddev out;
    double sum = 0.0;
    for (double x : xs) sum += x;
    out.mean = sum / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double acc = 0.0;
        for (double x : xs) {
            const double d = x - out.mean;
            acc += d * d;
        }
        out.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
    }
    return out;
}

inline void to_json(nlohmann::json& j, const MeanStddev& m) {
    j = nlohmann::json{{"mean", m.mean}, {"stddev", m.stddev}};
}

struct ExperimentAggregate {
    MeanStddev before_intra, before_cross, after_intra, after_cross;
    MeanStddev delta_intra, delta_cross;
    int seeds_succeeded = 0;
};

inline ExperimentAggregate aggregate_outcomes(std::span<const SeedOutcome> outcomes) {
    if (outcomes.empty()) throw Error("aggregate_outcomes needs at least one outcome");
    auto collect = [&](auto&& pick) {
        std::vector<double> xs;
        for (const SeedOutcome& o : outcomes) xs.push_back(pick(o));
        return mean_stddev(xs);
    };
    ExperimentAggregate agg;
    agg.before_intra = collect([](const SeedOutcome& o) { return o.before.intra; });
    agg.before_cross = collect([](const SeedOutcome& o) { return o.before.cross; });
    agg.after_intra = collect([](const SeedOutcome& o) { return o.after.intra; });
    agg.after_cross = collect([](const SeedOutcome& o) { return o.after.cross; });
    agg.delta_intra = collect([](const SeedOutcome& o) { return o.after.intra - o.before.intra; });
    agg.delta_cross = collect([](const SeedOutcome& o) { return o.after.cross - o.before.cross; });
    agg.seeds_succeeded = static_cast<int>(outcomes.size());
    return agg;
}

inline void to_json(nlohmann::json& j, const ExperimentAggregate& a) {
    j = nlohmann::json{{"before_intra", a.before_intra},
                       {"before_cross", a.before_cross},
                       {"after_intra", a.after_intra},
                       {"after_cross", a.after_cross},
                       {"delta_intra", a.delta_intra},
                       {"delta_cross", a.delta_cross},
                       {"seeds_succeeded", a.seeds_succeeded}};
}

struct ExperimentResult {
    std::vector<SeedOutcome> outcomes;
    std::vector<SeedFailure> failures;
    ExperimentAggregate aggregate;
    std::string results_path;
};

inline nlohmann::json results_json(const ExperimentConfig& cfg,
                                   const std::vector<SeedOutcome>& outcomes,
                                   const std::vector<SeedFailure>& failures,
                                   const ExperimentAggregate& aggregate) {
    nlohmann::json per_seed = nlohmann::json::array();
    for (const SeedOutcome& o : outcomes) {
        per_seed.push_back({{"seed", o.seed},
                            {"before", {{"intra", o.before.intra}, {"cross", o.before.cross}}},
                            {"after", {{"intra", o.after.intra}, {"cross", o.after.cross}}},
                            {"remaining_ratio", o.remaining_ratio},
                            {"pretrain_val_accuracy", o.pretrain_val_accuracy},
                            {"pruned_val_accuracy", o.pruned_val_accuracy}});
    }
    nlohmann::json failed = nlohmann::json::array();
    for (const SeedFailure& f : failures) {
        failed.push_back({{"seed", f.seed}, {"error", f.error}});
    }
    return nlohmann::json{{"config", cfg},
                          {"per_seed", per_seed},
                          {"failures", failed},
                          {"aggregate", aggregate}};
}

// Runs the full pipeline once per seed: split, pretrain, evaluate, prune with
// fine-tuning, evaluate again. The dataset is produced once and shared; the
// model init, split, and batch order all derive from the run seed. A seed
// that throws is recorded and skipped; the experiment only fails if every
// seed does. Artifacts land under output_dir, keyed by seed.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    Dataset ds = cfg.dataset_spec ? generate(*cfg.dataset_spec) : load_dataset(cfg.dataset_path);
    if (cfg.held_out_domain >= ds.n_domains()) {
        throw ConfigError("held_out_domain " + std::to_string(cfg.held_out_domain) +
                          " out of range for a dataset with " + std::to_string(ds.n_domains()) +
                          " domains");
    }

    namespace fs = std::filesystem;
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);

    ExperimentResult result;
    for (std::uint64_t seed : cfg.seeds) {
        try {
            const fs::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
            fs::create_directories(seed_dir);

            const SplitPlan plan = split(ds, cfg.held_out_domain, seed);
            const GatedModel init = GatedModel::build(cfg.architecture, seed);

            PretrainResult pre = pretrain(init, ds, plan, cfg.pretrain, seed);
            pre.best_model.save((seed_dir / "pretrained.pldg").string());
            pre.events.write_jsonl((seed_dir / "pretrain_events.jsonl").string());

            SeedOutcome outcome;
            outcome.seed = seed;
            outcome.pretrain_val_accuracy = pre.best_val_accuracy;
            outcome.before = evaluate(pre.best_model, ds, plan);

            PruneLoopResult pruned =
                prune_finetune_loop(pre.best_model, ds, plan, cfg.prune, seed);
            pruned.best_model.save((seed_dir / "pruned_best.pldg").string());
            pruned.events.write_jsonl((seed_dir / "prune_events.jsonl").string());
            pruned.table.write_csv((seed_dir / "importance.csv").string());

            outcome.after = evaluate(pruned.best_model, ds, plan);
            outcome.remaining_ratio = pruned.remaining_ratio;
            outcome.pruned_val_accuracy = pruned.best_val_accuracy;
            result.outcomes.push_back(outcome);
        } catch (const std::exception& e) {
            result.failures.push_back({seed, e.what()});
        }
    }
    if (result.outcomes.empty()) {
        std::string detail;
        for (const SeedFailure& f : result.failures) {
            detail += "\n  seed " + std::to_string(f.seed) + ": " + f.error;
        }
        throw Error("every seed failed:" + detail);
    }

    result.aggregate = aggregate_outcomes(result.outcomes);
    const nlohmann::json summary =
        results_json(cfg, result.outcomes, result.failures, result.aggregate);
    result.results_path = (out_dir / "results.json").string();
    std::ofstream os(result.results_path);
    if (!os) throw Error("cannot open " + result.results_path + " for writing");
    os << summary.dump(2) << "\n";
    return result;
}

} // namespace prunelab
