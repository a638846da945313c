#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunelab/dataset.hpp"
#include "prunelab/experiment.hpp"
#include "prunelab/model.hpp"
#include "prunelab/pruning.hpp"
#include "prunelab/report.hpp"

namespace fs = std::filesystem;
using namespace prunelab;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path + " for reading");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + " is not valid JSON: " + std::string(e.what()));
    }
    return j;
}

Dataset dataset_from_config(const ExperimentConfig& cfg) {
    return cfg.dataset_spec ? generate(*cfg.dataset_spec) : load_dataset(cfg.dataset_path);
}

void print_json_line(const nlohmann::json& j) { std::printf("%s\n", j.dump().c_str()); }

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed) {
    SyntheticSpec spec = synthetic_spec_from_json(read_json_file(config_path), config_path);
    if (seed) spec.seed = *seed;
    Dataset ds = generate(spec);
    save_dataset(ds, out);
    print_json_line({{"wrote", out},
                     {"domains", ds.n_domains()},
                     {"samples_per_domain", spec.samples_per_domain}});
    return 0;
}

int cmd_pretrain(const std::string& config_path, std::uint64_t seed,
                 std::optional<std::string> out) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (out) cfg.output_dir = *out;
    Dataset ds = dataset_from_config(cfg);
    const SplitPlan plan = split(ds, cfg.held_out_domain, seed);
    GatedModel init = GatedModel::build(cfg.architecture, seed);
    PretrainResult result = pretrain(init, ds, plan, cfg.pretrain, seed);

    const fs::path dir = fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    result.best_model.save((dir / "pretrained.pldg").string());
    result.events.write_jsonl((dir / "pretrain_events.jsonl").string());
    const EvalAccuracy acc = evaluate(result.best_model, ds, plan);
    print_json_line({{"checkpoint", (dir / "pretrained.pldg").string()},
                     {"best_epoch", result.best_epoch},
                     {"best_val_accuracy", result.best_val_accuracy},
                     {"intra", acc.intra},
                     {"cross", acc.cross}});
    return 0;
}

int cmd_prune(const std::string& config_path, std::uint64_t seed, const std::string& checkpoint,
              std::optional<std::string> out) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (out) cfg.output_dir = *out;
    Dataset ds = dataset_from_config(cfg);
    const SplitPlan plan = split(ds, cfg.held_out_domain, seed);
    GatedModel start = GatedModel::load(checkpoint);
    PruneLoopResult result = prune_finetune_loop(start, ds, plan, cfg.prune, seed);

    const fs::path dir = fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    result.best_model.save((dir / "pruned_best.pldg").string());
    result.events.write_jsonl((dir / "prune_events.jsonl").string());
    result.table.write_csv((dir / "importance.csv").string());
    const EvalAccuracy acc = evaluate(result.best_model, ds, plan);
    print_json_line({{"checkpoint", (dir / "pruned_best.pldg").string()},
                     {"remaining_ratio", result.remaining_ratio},
                     {"best_val_accuracy", result.best_val_accuracy},
                     {"intra", acc.intra},
                     {"cross", acc.cross}});
    return 0;
}

int cmd_eval(const std::string& config_path, std::uint64_t seed, const std::string& checkpoint) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    Dataset ds = dataset_from_config(cfg);
    const SplitPlan plan = split(ds, cfg.held_out_domain, seed);
    GatedModel model = GatedModel::load(checkpoint);
    const EvalAccuracy acc = evaluate(model, ds, plan);
    print_json_line({{"checkpoint", checkpoint},
                     {"held_out_domain", cfg.held_out_domain},
                     {"intra", acc.intra},
                     {"cross", acc.cross}});
    return 0;
}

int cmd_experiment(const std::string& config_path, std::optional<std::string> out) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (out) cfg.output_dir = *out;
    ExperimentResult result = run_experiment(cfg);
    print_json_line({{"results", result.results_path},
                     {"seeds_succeeded", result.aggregate.seeds_succeeded},
                     {"seeds_failed", result.failures.size()},
                     {"after_cross_mean", result.aggregate.after_cross.mean},
                     {"delta_cross_mean", result.aggregate.delta_cross.mean}});
    return 0;
}

int cmd_report(const std::vector<std::string>& results_paths, const std::string& out) {
    std::vector<ReportEntry> entries;
    for (const std::string& path : results_paths) entries.push_back(load_report_entry(path));
    Report report = build_report(std::move(entries));

    fs::create_directories(out);
    const fs::path csv_path = fs::path(out) / "report.csv";
    const fs::path md_path = fs::path(out) / "report.md";
    std::ofstream(csv_path) << report_csv(report);
    std::ofstream(md_path) << report_markdown(report);
    std::printf("%s", report_markdown(report).c_str());
    print_json_line({{"csv", csv_path.string()}, {"markdown", md_path.string()}});
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"filter-pruning laboratory: synthetic multi-domain data, gated models, "
                 "importance-scored pruning, and leave-one-domain-out experiments"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, out_dir;
    std::optional<std::string> out_override;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> seed_override;
    std::vector<std::string> results_paths;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    gen->add_option("--config", config_path, "dataset spec JSON")->required();
    gen->add_option("--out", out_dir, "output dataset path")->required();
    gen->add_option("--seed", seed_override, "override the spec seed");

    CLI::App* pre = app.add_subcommand("pretrain", "pretrain one seed and keep the best "
                                                   "validation checkpoint");
    pre->add_option("--config", config_path, "experiment config JSON")->required();
    pre->add_option("--seed", seed, "run seed");
    pre->add_option("--out", out_override, "override the config output_dir");

    CLI::App* prn = app.add_subcommand("prune", "prune and fine-tune from a checkpoint");
    prn->add_option("--config", config_path, "experiment config JSON")->required();
    prn->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
    prn->add_option("--seed", seed, "run seed");
    prn->add_option("--out", out_override, "override the config output_dir");

    CLI::App* ev = app.add_subcommand("eval", "report intra and cross accuracy of a checkpoint");
    ev->add_option("--config", config_path, "experiment config JSON")->required();
    ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ev->add_option("--seed", seed, "split seed");

    CLI::App* exp = app.add_subcommand("experiment", "run the full multi-seed pipeline");
    exp->add_option("--config", config_path, "experiment config JSON")->required();
    exp->add_option("--out", out_override, "override the config output_dir");

    CLI::App* rep = app.add_subcommand("report", "combine results files into CSV and Markdown "
                                                 "tables");
    rep->add_option("results", results_paths, "results.json files")->required();
    rep->add_option("--out", out_dir, "output directory")->default_val(".");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed_override);
        if (pre->parsed()) return cmd_pretrain(config_path, seed, out_override);
        if (prn->parsed()) return cmd_prune(config_path, seed, checkpoint, out_override);
        if (ev->parsed()) return cmd_eval(config_path, seed, checkpoint);
        if (exp->parsed()) return cmd_experiment(config_path, out_override);
        if (rep->parsed()) return cmd_report(results_paths, out_dir);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
