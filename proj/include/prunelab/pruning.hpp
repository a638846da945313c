#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prunelab/common.hpp"
#include "prunelab/dataset.hpp"
#include "prunelab/importance.hpp"
#include "prunelab/jsonutil.hpp"
#include "prunelab/model.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct PruneSchedule {
    int interval_minibatches = 30;
    int max_filters_per_event = 4;
    double target_remaining_ratio = 0.5;
    int per_layer_floor = 1;

    int target_remaining_count(int total_filters) const {
        return static_cast<int>(std::ceil(target_remaining_ratio * total_filters));
    }

    void validate(const std::vector<int>& layer_sizes) const {
        if (interval_minibatches < 1) {
            throw ConfigError("prune interval_minibatches must be >= 1, got " +
                              std::to_string(interval_minibatches));
        }
        if (max_filters_per_event < 1) {
            throw ConfigError("prune max_filters_per_event must be >= 1, got " +
                              std::to_string(max_filters_per_event));
        }
        if (!(target_remaining_ratio > 0.0 && target_remaining_ratio <= 1.0)) {
            throw ConfigError("prune target_remaining_ratio must lie in (0,1], got " +
                              format_double(target_remaining_ratio));
        }
        if (per_layer_floor < 1) {
            throw ConfigError("prune per_layer_floor must be >= 1, got " +
                              std::to_string(per_layer_floor));
        }
        int total = 0;
        for (int c : layer_sizes) {
            if (c < per_layer_floor) {
                throw ConfigError("layer of " + std::to_string(c) +
                                  " filters is already below the floor of " +
                                  std::to_string(per_layer_floor));
            }
            total += c;
        }
        const int floor_total = per_layer_floor * static_cast<int>(layer_sizes.size());
        if (target_remaining_count(total) < floor_total) {
            throw ConfigError("target of " + std::to_string(target_remaining_count(total)) +
                              " remaining filters is below the combined per-layer floor of " +
                              std::to_string(floor_total));
        }
    }
};

inline void to_json(nlohmann::json& j, const PruneSchedule& s) {
    j = nlohmann::json{{"interval_minibatches", s.interval_minibatches},
                       {"max_filters_per_event", s.max_filters_per_event},
                       {"target_remaining_ratio", s.target_remaining_ratio},
                       {"per_layer_floor", s.per_layer_floor}};
}

inline PruneSchedule schedule_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j,
                                  {"interval_minibatches", "max_filters_per_event",
                                   "target_remaining_ratio", "per_layer_floor"},
                                  ctx);
    PruneSchedule s;
    s.interval_minibatches = jsonutil::field_or(j, "interval_minibatches",
                                                s.interval_minibatches, ctx);
    s.max_filters_per_event =
        jsonutil::field_or(j, "max_filters_per_event", s.max_filters_per_event, ctx);
    s.target_remaining_ratio =
        jsonutil::field_or(j, "target_remaining_ratio", s.target_remaining_ratio, ctx);
    s.per_layer_floor = jsonutil::field_or(j, "per_layer_floor", s.per_layer_floor, ctx);
    return s;
}

// ---------------------------------------------------------------------------
// SGD with momentum, freeze-mask aware
// ---------------------------------------------------------------------------

struct SgdConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw ConfigError("learning_rate must be finite and >= 0, got " +
                              format_double(learning_rate));
        }
        if (!(momentum >= 0.0 && momentum < 1.0)) {
            throw ConfigError("momentum must lie in [0,1), got " + format_double(momentum));
        }
    }
};

inline void to_json(nlohmann::json& j, const SgdConfig& s) {
    j = nlohmann::json{{"learning_rate", s.learning_rate}, {"momentum", s.momentum}};
}

inline SgdConfig sgd_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j, {"learning_rate", "momentum"}, ctx);
    SgdConfig s;
    s.learning_rate = jsonutil::field_or(j, "learning_rate", s.learning_rate, ctx);
    s.momentum = jsonutil::field_or(j, "momentum", s.momentum, ctx);
    s.validate();
    return s;
}

// Heavy-ball update v <- m*v + g, p <- p - lr*v. Elements under a freeze mask
// keep their value and carry no velocity, so a pruned gate stays at exactly
// zero no matter how long training continues.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<ParamRef> params, SgdConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        for (const ParamRef& p : params_) {
            velocity_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    const SgdConfig& config() const { return cfg_; }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[i].tensor;
            if (!t.has_grad()) {
                throw Error("optimizer step: parameter " + std::to_string(i) +
                            " has no gradient; run backward first");
            }
            auto g = t.grad();
            auto v = t.values_mut();
            std::vector<double>& vel = velocity_[i];
            const std::vector<std::uint8_t>* frozen = params_[i].frozen;
            for (std::size_t k = 0; k < vel.size(); ++k) {
                if (frozen && (*frozen)[k]) {
                    vel[k] = 0.0;
                    continue;
                }
                vel[k] = cfg_.momentum * vel[k] + g[k];
                v[k] -= cfg_.learning_rate * vel[k];
            }
        }
    }

    void zero_grads() {
        for (ParamRef& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<ParamRef> params_;
    std::vector<std::vector<double>> velocity_;
    SgdConfig cfg_;
};

// ---------------------------------------------------------------------------
// Ranking and prune events
// ---------------------------------------------------------------------------

// Unpruned filters ordered by EMA score ascending, ties broken by layer then
// channel index. Filters in layers already at the floor are excluded.
inline std::vector<FilterId> rank_filters(const GatedModel& model, const ImportanceTable& table,
                                          int per_layer_floor) {
    if (table.size() != static_cast<std::size_t>(model.total_filters())) {
        throw Error("importance table covers " + std::to_string(table.size()) +
                    " filters, model has " + std::to_string(model.total_filters()));
    }
    std::vector<int> order;
    for (int flat = 0; flat < model.total_filters(); ++flat) {
        const FilterId id = model.filter_at(flat);
        if (model.is_pruned(id)) {
            if (!table.is_pruned(flat)) {
                throw Error("filter " + to_string(id) +
                            " is pruned in the model but not in the importance table");
            }
            continue;
        }
        if (model.remaining_in_layer(id.layer) <= per_layer_floor) continue;
        order.push_back(flat);
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (table.ema(a) != table.ema(b)) return table.ema(a) < table.ema(b);
        return a < b;   // flat index is already (layer, channel) lexicographic
    });
    std::vector<FilterId> out;
    out.reserve(order.size());
    for (int flat : order) out.push_back(model.filter_at(flat));
    return out;
}

// Masks up to max_filters_per_event of the lowest-scored filters, clipping so
// the remaining count never undershoots the schedule target and re-checking
// the per-layer floor after every pick. Returns the filters pruned.
inline std::vector<FilterId> prune_event(GatedModel& model, ImportanceTable& table,
                                         const PruneSchedule& schedule) {
    const int target = schedule.target_remaining_count(model.total_filters());
    int budget = std::min(schedule.max_filters_per_event,
                          model.remaining_filters() - target);
    std::vector<FilterId> pruned;
    if (budget <= 0) return pruned;

    std::vector<FilterId> ranked = rank_filters(model, table, schedule.per_layer_floor);
    for (const FilterId& id : ranked) {
        if (budget == 0) break;
        if (model.remaining_in_layer(id.layer) <= schedule.per_layer_floor) continue;
        model.mask_filter(id);
        table.mark_pruned(model.flat_index(id));
        pruned.push_back(id);
        --budget;
    }
    if (budget > 0 && model.remaining_filters() > target) {
        throw Error("prune event ran out of candidates above the floor with " +
                    std::to_string(model.remaining_filters() - target) +
                    " filters still to remove");
    }
    return pruned;
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

class EventLog {
public:
    void record(int step, const std::string& event, nlohmann::json payload) {
        entries_.push_back(nlohmann::json{
            {"step", step}, {"event", event}, {"payload", std::move(payload)}});
    }

    const std::vector<nlohmann::json>& entries() const { return entries_; }

    std::string to_jsonl() const {
        std::string out;
        for (const nlohmann::json& e : entries_) {
            out += e.dump();
            out += '\n';
        }
        return out;
    }

    void write_jsonl(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw Error("cannot open " + path + " for writing");
        os << to_jsonl();
        if (!os) throw Error("failed while writing " + path);
    }

private:
    std::vector<nlohmann::json> entries_;
};

// ---------------------------------------------------------------------------
// Train step and the prune-finetune loop
// ---------------------------------------------------------------------------

enum class ScoringMethod { taylor, ior };

inline std::string to_string(ScoringMethod m) {
    return m == ScoringMethod::taylor ? "taylor" : "ior";
}

inline ScoringMethod scoring_method_from_string(const std::string& s) {
    if (s == "taylor") return ScoringMethod::taylor;
    if (s == "ior") return ScoringMethod::ior;
    throw ConfigError("unknown scoring method \"" + s + "\" (expected taylor or ior)");
}

struct PruneLoopConfig {
    PruneSchedule schedule;
    SgdConfig sgd;
    ScoringMethod method = ScoringMethod::taylor;
    IoRConfig ior;
    LossKind loss = LossKind::cross_entropy;
    int batch_size = 64;
    int epochs = 100;
    double ema_coefficient = 0.9;
    bool reset_ema_on_prune = false;

    void validate(const std::vector<int>& layer_sizes) const {
        schedule.validate(layer_sizes);
        sgd.validate();
        ior.validate();
        if (batch_size < 1) {
            throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
        }
        if (epochs < 1) {
            throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
        }
        if (!(ema_coefficient > 0.0 && ema_coefficient < 1.0)) {
            throw ConfigError("ema_coefficient must lie in (0,1), got " +
                              format_double(ema_coefficient));
        }
    }
};

inline void to_json(nlohmann::json& j, const PruneLoopConfig& c) {
    j = nlohmann::json{{"schedule", c.schedule},
                       {"sgd", c.sgd},
                       {"criterion", to_string(c.method)},
                       {"ior", c.ior},
                       {"loss", to_string(c.loss)},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"ema_coefficient", c.ema_coefficient},
                       {"reset_ema_on_prune", c.reset_ema_on_prune}};
}

// Parses without the layer-aware validate(); callers run that once the
// architecture is known.
inline PruneLoopConfig prune_loop_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j,
                                  {"schedule", "sgd", "criterion", "ior", "loss", "batch_size",
                                   "epochs", "ema_coefficient", "reset_ema_on_prune"},
                                  ctx);
    PruneLoopConfig c;
    if (j.contains("schedule")) c.schedule = schedule_from_json(j["schedule"], ctx + ".schedule");
    if (j.contains("sgd")) c.sgd = sgd_from_json(j["sgd"], ctx + ".sgd");
    c.method = scoring_method_from_string(
        jsonutil::field_or<std::string>(j, "criterion", to_string(c.method), ctx));
    if (j.contains("ior")) c.ior = ior_from_json(j["ior"], ctx + ".ior");
    c.loss = loss_kind_from_string(
        jsonutil::field_or<std::string>(j, "loss", to_string(c.loss), ctx));
    c.batch_size = jsonutil::field_or(j, "batch_size", c.batch_size, ctx);
    c.epochs = jsonutil::field_or(j, "epochs", c.epochs, ctx);
    c.ema_coefficient = jsonutil::field_or(j, "ema_coefficient", c.ema_coefficient, ctx);
    c.reset_ema_on_prune = jsonutil::field_or(j, "reset_ema_on_prune", c.reset_ema_on_prune, ctx);
    return c;
}

// One mini-batch: gradients for mean risk and risk variance, then an SGD step
// on the mean-risk gradients. Raises DivergenceError on non-finite risk.
inline GateGradientReport train_step(GatedModel& model, SgdOptimizer& optimizer,
                                     const DomainBatch& batch,
                                     LossKind kind = LossKind::cross_entropy,
                                     VarianceKind variance_kind = VarianceKind::population) {
    GateGradientReport report = gate_gradients(model, batch, kind, variance_kind);
    optimizer.step();
    return report;
}

// Argmax hit count, evaluated without a tape in fixed-size chunks. Ties go
// to the lowest class index.
inline int correct_count(const GatedModel& model, const Tensor& images,
                         std::span<const int> labels) {
    const int rows = images.dim(0);
    int hits = 0;
    for (int first = 0; first < rows; first += kEvalChunkRows) {
        const int count = std::min(kEvalChunkRows, rows - first);
        Tensor logits = model.forward(nullptr, detail::slice_rows(images, first, count));
        const int k = logits.dim(1);
        const double* v = logits.values().data();
        for (int b = 0; b < count; ++b) {
            const double* row = v + static_cast<std::size_t>(b) * k;
            int best = 0;
            for (int c = 1; c < k; ++c) {
                if (row[c] > row[best]) best = c;
            }
            if (best == labels[first + b]) ++hits;
        }
    }
    return hits;
}

inline double accuracy_percent(const GatedModel& model, const Tensor& images,
                               std::span<const int> labels) {
    const int rows = images.dim(0);
    if (rows == 0) throw Error("accuracy_percent: no rows to evaluate");
    return 100.0 * correct_count(model, images, labels) / rows;
}

// Accuracy over the pooled validation rows of every source domain.
inline double validation_accuracy_percent(const GatedModel& model, const Dataset& ds,
                                          const SplitPlan& plan) {
    int hits = 0, rows = 0;
    for (int d : plan.source_domains()) {
        DomainBatch part = gather(ds, d, plan.validation[d]);
        hits += correct_count(model, part.images, part.labels);
        rows += part.images.dim(0);
    }
    if (rows == 0) throw Error("validation_accuracy_percent: no validation rows");
    return 100.0 * hits / rows;
}

struct PruneLoopResult {
    GatedModel final_model;
    GatedModel best_model;
    double best_val_accuracy = 0.0;
    int best_epoch = -1;
    double final_val_accuracy = 0.0;
    double remaining_ratio = 1.0;
    int steps_run = 0;
    ImportanceTable table;
    EventLog events;
};

// Interleaves fine-tuning on the mean risk with periodic prune events until
// the schedule target is reached, then keeps fine-tuning. The best checkpoint
// is the highest validation accuracy among epochs where the model is at the
// target size; "best" would otherwise be won by a barely-pruned model.
inline PruneLoopResult prune_finetune_loop(const GatedModel& start, const Dataset& ds,
                                           const SplitPlan& plan, const PruneLoopConfig& cfg,
                                           std::uint64_t seed) {
    cfg.validate(start.arch().channels);

    PruneLoopResult out;
    out.final_model = start.clone();
    GatedModel& model = out.final_model;
    const int total = model.total_filters();
    const int target = cfg.schedule.target_remaining_count(total);

    // The schedule must be able to reach the target within the run.
    const std::size_t batches_per_epoch =
        epoch_batches(ds, plan, cfg.batch_size, seed, 0).size();
    if (batches_per_epoch == 0) {
        throw ConfigError("batch_size " + std::to_string(cfg.batch_size) +
                          " exceeds the available training rows");
    }
    const long long steps_total = static_cast<long long>(batches_per_epoch) * cfg.epochs;
    const int to_remove = model.remaining_filters() - target;
    const long long events_possible = steps_total / cfg.schedule.interval_minibatches;
    const long long events_needed =
        (to_remove + cfg.schedule.max_filters_per_event - 1) / cfg.schedule.max_filters_per_event;
    if (to_remove > 0 && events_possible < events_needed) {
        throw ConfigError("schedule cannot reach the target: " + std::to_string(events_needed) +
                          " prune events needed but only " + std::to_string(events_possible) +
                          " fit in " + std::to_string(steps_total) + " steps");
    }

    out.table = ImportanceTable(model.arch().channels, cfg.ema_coefficient);
    for (int flat = 0; flat < total; ++flat) {
        if (model.is_pruned(model.filter_at(flat))) out.table.mark_pruned(flat);
    }
    SgdOptimizer optimizer(model.parameters(), cfg.sgd);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const DomainBatch& batch : epoch_batches(ds, plan, cfg.batch_size, seed, epoch)) {
            GateGradientReport report =
                train_step(model, optimizer, batch, cfg.loss, cfg.ior.variance_kind);
            RawScores scores =
                cfg.method == ScoringMethod::taylor
                    ? taylor_scores(report.gate_values, report.mean_grads, report.pruned)
                    : ior_scores(report.gate_values, report.mean_grads, report.variance_grads,
                                 report.pruned, cfg.ior);
            out.table.ema_update(scores);
            ++step;

            if (step % cfg.schedule.interval_minibatches == 0) {
                std::vector<FilterId> pruned = prune_event(model, out.table, cfg.schedule);
                if (!pruned.empty()) {
                    nlohmann::json filters = nlohmann::json::array();
                    for (const FilterId& id : pruned) {
                        filters.push_back({id.layer, id.channel});
                    }
                    out.events.record(step, "prune",
                                      {{"filters", std::move(filters)},
                                       {"remaining", model.remaining_filters()},
                                       {"remaining_ratio",
                                        static_cast<double>(model.remaining_filters()) / total}});
                    if (cfg.reset_ema_on_prune) out.table.reset_scores();
                }
            }
        }

        const double val = validation_accuracy_percent(model, ds, plan);
        out.events.record(step, "epoch",
                          {{"epoch", epoch},
                           {"val_accuracy", val},
                           {"remaining", model.remaining_filters()}});
        if (model.remaining_filters() == target &&
            (out.best_epoch < 0 || val > out.best_val_accuracy)) {
            out.best_val_accuracy = val;
            out.best_epoch = epoch;
            out.best_model = model.clone();
            out.events.record(step, "best", {{"epoch", epoch}, {"val_accuracy", val}});
        }
        out.final_val_accuracy = val;
    }

    out.steps_run = step;
    out.remaining_ratio = static_cast<double>(model.remaining_filters()) / total;
    if (out.best_epoch < 0) {
        throw Error("prune loop never reached the target size of " + std::to_string(target) +
                    " filters at an epoch boundary");
    }
    return out;
}

} // namespace prunelab
