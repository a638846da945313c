#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prunelab/common.hpp"
#include "prunelab/experiment.hpp"

namespace prunelab {

// ---------------------------------------------------------------------------
// Result summaries
//
// One entry distills one experiment run: who trained (pretraining method),
// what pruned (criterion and target ratio), which domain was held out, and
// the aggregate accuracies before and after pruning.
// ---------------------------------------------------------------------------

struct ReportEntry {
    std::string model;       // pretraining method
    std::string criterion;   // scoring method
    double target_ratio = 0.0;
    int held_out_domain = -1;
    MeanStddev before_intra, before_cross, after_intra, after_cross;
    MeanStddev delta_intra, delta_cross;
    int seeds = 0;

    // Grouping key for table rows; the held-out domain picks the column.
    std::tuple<std::string, std::string, double> row_key() const {
        return {model, criterion, target_ratio};
    }
};

namespace detail {

inline MeanStddev mean_stddev_from_json(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j, {"mean", "stddev"}, ctx);
    MeanStddev m;
    m.mean = jsonutil::require_field<double>(j, "mean", ctx);
    m.stddev = jsonutil::require_field<double>(j, "stddev", ctx);
    return m;
}

inline void require_match(const MeanStddev& stored, const MeanStddev& recomputed,
                          const std::string& what, const std::string& ctx) {
    if (stored.mean != recomputed.mean || stored.stddev != recomputed.stddev) {
        throw FormatError(ctx + ": aggregate " + what +
                          " does not match its per-seed recomputation (stored mean " +
                          format_double(stored.mean) + ", recomputed " +
                          format_double(recomputed.mean) + ")");
    }
}

} // namespace detail

// Parses one results document, re-deriving every aggregate from the per-seed
// rows and insisting on exact agreement.
inline ReportEntry report_entry_from_results(const nlohmann::json& j, const std::string& ctx) {
    jsonutil::reject_unknown_keys(j, {"config", "per_seed", "failures", "aggregate"}, ctx);
    const ExperimentConfig cfg = experiment_from_json(
        jsonutil::require_field<nlohmann::json>(j, "config", ctx), ctx + ".config");

    ReportEntry entry;
    entry.model = to_string(cfg.pretrain.method);
    entry.criterion = to_string(cfg.prune.method);
    entry.target_ratio = cfg.prune.schedule.target_remaining_ratio;
    entry.held_out_domain = cfg.held_out_domain;

    const nlohmann::json agg = jsonutil::require_field<nlohmann::json>(j, "aggregate", ctx);
    jsonutil::reject_unknown_keys(agg,
                                  {"before_intra", "before_cross", "after_intra", "after_cross",
                                   "delta_intra", "delta_cross", "seeds_succeeded"},
                                  ctx + ".aggregate");
    auto block = [&](const char* key) {
        return detail::mean_stddev_from_json(
            jsonutil::require_field<nlohmann::json>(agg, key, ctx + ".aggregate"),
            ctx + ".aggregate." + key);
    };
    entry.before_intra = block("before_intra");
    entry.before_cross = block("before_cross");
    entry.after_intra = block("after_intra");
    entry.after_cross = block("after_cross");
    entry.delta_intra = block("delta_intra");
    entry.delta_cross = block("delta_cross");
    entry.seeds = jsonutil::require_field<int>(agg, "seeds_succeeded", ctx + ".aggregate");

    const nlohmann::json per_seed = jsonutil::require_field<nlohmann::json>(j, "per_seed", ctx);
    if (!per_seed.is_array() || per_seed.empty()) {
        throw FormatError(ctx + ": per_seed must be a non-empty array");
    }
    if (entry.seeds != static_cast<int>(per_seed.size())) {
        throw FormatError(ctx + ": aggregate says " + std::to_string(entry.seeds) +
                          " seeds succeeded, per_seed has " + std::to_string(per_seed.size()));
    }
    std::vector<double> bi, bc, ai, ac, di, dc;
    for (std::size_t i = 0; i < per_seed.size(); ++i) {
        const std::string sctx = ctx + ".per_seed[" + std::to_string(i) + "]";
        const nlohmann::json& row = per_seed[i];
        auto pair = [&](const char* key) {
            const nlohmann::json p = jsonutil::require_field<nlohmann::json>(row, key, sctx);
            jsonutil::reject_unknown_keys(p, {"intra", "cross"}, sctx + "." + key);
            return std::pair<double, double>{
                jsonutil::require_field<double>(p, "intra", sctx + "." + key),
                jsonutil::require_field<double>(p, "cross", sctx + "." + key)};
        };
        auto [before_i, before_c] = pair("before");
        auto [after_i, after_c] = pair("after");
        bi.push_back(before_i);
        bc.push_back(before_c);
        ai.push_back(after_i);
        ac.push_back(after_c);
        di.push_back(after_i - before_i);
        dc.push_back(after_c - before_c);
    }
    detail::require_match(entry.before_intra, mean_stddev(bi), "before_intra", ctx);
    detail::require_match(entry.before_cross, mean_stddev(bc), "before_cross", ctx);
    detail::require_match(entry.after_intra, mean_stddev(ai), "after_intra", ctx);
    detail::require_match(entry.after_cross, mean_stddev(ac), "after_cross", ctx);
    detail::require_match(entry.delta_intra, mean_stddev(di), "delta_intra", ctx);
    detail::require_match(entry.delta_cross, mean_stddev(dc), "delta_cross", ctx);
    return entry;
}

inline ReportEntry load_report_entry(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path + " for reading");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("results file " + path + " is not valid JSON: " + e.what());
    }
    return report_entry_from_results(j, path);
}

struct Report {
    std::vector<ReportEntry> entries;   // sorted by row key, then domain
    std::vector<int> held_out_domains;  // sorted column set
};

// Sorts the entries into table order and rejects two runs claiming the same
// cell (same model, criterion, ratio, and held-out domain).
inline Report build_report(std::vector<ReportEntry> entries) {
    if (entries.empty()) throw Error("report needs at least one results entry");
    std::sort(entries.begin(), entries.end(), [](const ReportEntry& a, const ReportEntry& b) {
        if (a.row_key() != b.row_key()) return a.row_key() < b.row_key();
        return a.held_out_domain < b.held_out_domain;
    });
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].row_key() == entries[i - 1].row_key() &&
            entries[i].held_out_domain == entries[i - 1].held_out_domain) {
            throw Error("two results cover model " + entries[i].model + ", criterion " +
                        entries[i].criterion + ", ratio " +
                        format_double(entries[i].target_ratio) + ", held-out domain " +
                        std::to_string(entries[i].held_out_domain));
        }
    }
    Report report;
    std::set<int> domains;
    for (const ReportEntry& e : entries) domains.insert(e.held_out_domain);
    report.held_out_domains.assign(domains.begin(), domains.end());
    report.entries = std::move(entries);
    return report;
}

// ---------------------------------------------------------------------------
// CSV: long format, full-precision doubles, one line per phase and cell
// ---------------------------------------------------------------------------

inline constexpr const char* kReportCsvHeader =
    "model,criterion,target_ratio,held_out_domain,phase,intra_mean,intra_stddev,cross_mean,"
    "cross_stddev,seeds";

inline std::string report_csv(const Report& report) {
    std::ostringstream os;
    os << kReportCsvHeader << "\n";
    for (const ReportEntry& e : report.entries) {
        auto line = [&](const char* phase, const MeanStddev& intra, const MeanStddev& cross) {
            os << e.model << "," << e.criterion << "," << format_double(e.target_ratio) << ","
               << e.held_out_domain << "," << phase << "," << format_double(intra.mean) << ","
               << format_double(intra.stddev) << "," << format_double(cross.mean) << ","
               << format_double(cross.stddev) << "," << e.seeds << "\n";
        };
        line("before", e.before_intra, e.before_cross);
        line("after", e.after_intra, e.after_cross);
        line("delta", e.delta_intra, e.delta_cross);
    }
    return os.str();
}

struct ReportCsvRow {
    std::string model, criterion, phase;
    double target_ratio = 0.0;
    int held_out_domain = -1;
    MeanStddev intra, cross;
    int seeds = 0;
};

inline std::vector<ReportCsvRow> parse_report_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kReportCsvHeader) {
        throw FormatError("report csv header mismatch: expected \"" +
                          std::string(kReportCsvHeader) + "\"");
    }
    std::vector<ReportCsvRow> rows;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 10) {
            throw FormatError("report csv line " + std::to_string(line_no) + " has " +
                              std::to_string(fields.size()) + " fields, expected 10");
        }
        auto num = [&](int idx) {
            std::size_t used = 0;
            const double v = std::stod(fields[idx], &used);
            if (used != fields[idx].size()) {
                throw FormatError("report csv line " + std::to_string(line_no) + " field " +
                                  std::to_string(idx) + " is not a number: " + fields[idx]);
            }
            return v;
        };
        ReportCsvRow row;
        row.model = fields[0];
        row.criterion = fields[1];
        row.target_ratio = num(2);
        row.held_out_domain = static_cast<int>(num(3));
        row.phase = fields[4];
        row.intra = {num(5), num(6)};
        row.cross = {num(7), num(8)};
        row.seeds = static_cast<int>(num(9));
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Markdown: one wide table, held-out domains as column pairs
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

} // namespace detail

inline std::string report_markdown(const Report& report) {
    std::ostringstream os;
    os << "| Model | Criterion | Ratio | Phase |";
    for (int d : report.held_out_domains) {
        os << " Held-out " << d << " intra | Held-out " << d << " cross |";
    }
    os << "\n|---|---|---|---|";
    for (std::size_t i = 0; i < report.held_out_domains.size(); ++i) os << "---|---|";
    os << "\n";

    // Cell lookup: row key x held-out domain.
    std::map<std::pair<std::tuple<std::string, std::string, double>, int>, const ReportEntry*>
        cells;
    std::vector<std::tuple<std::string, std::string, double>> keys;
    for (const ReportEntry& e : report.entries) {
        if (keys.empty() || keys.back() != e.row_key()) keys.push_back(e.row_key());
        cells[{e.row_key(), e.held_out_domain}] = &e;
    }
    for (const auto& key : keys) {
        const auto& [model, criterion, ratio] = key;
        const char* phases[] = {"before", "after", "delta"};
        for (const char* phase : phases) {
            os << "| " << model << " | " << criterion << " | " << detail::fixed2(ratio) << " | "
               << phase << " |";
            for (int d : report.held_out_domains) {
                auto it = cells.find({key, d});
                if (it == cells.end()) {
                    os << " - | - |";
                    continue;
                }
                const ReportEntry& e = *it->second;
                const MeanStddev* intra = &e.before_intra;
                const MeanStddev* cross = &e.before_cross;
                if (std::string(phase) == "after") {
                    intra = &e.after_intra;
                    cross = &e.after_cross;
                } else if (std::string(phase) == "delta") {
                    intra = &e.delta_intra;
                    cross = &e.delta_cross;
                }
                os << " " << detail::fixed2(intra->mean) << " | " << detail::fixed2(cross->mean)
                   << " |";
            }
            os << "\n";
        }
    }
    return os.str();
}

} // namespace prunelab
