// binens: training and evaluation pipeline for AdaBoost ensembles of
// binarized transformer encoder classifiers.
//
// Verbs: train-teacher, distill-split, boost, eval, robustness, cost,
// pipeline. Every run writes its outputs plus an atomic JSON manifest
// (resolved config, seeds, produced files, per-stage wall clock) under the
// output directory.
//
// Exit codes: 0 success, 2 config/input error, 3 degenerate training,
// 4 internal assertion failure.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "binens/distillation.hpp"
#include "binens/ensemble.hpp"
#include "binens/errors.hpp"
#include "binens/evaluation.hpp"
#include "binens/logging.hpp"
#include "binens/manifest.hpp"
#include "binens/model.hpp"
#include "binens/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir = "runs/out";
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<std::string> kd;
    std::optional<int> ensemble_size;
    std::optional<double> noise_variance;
    std::optional<int> rounds;
    std::string teacher_path;
    std::string ternary_path;
    std::string split_path;
    std::string ensemble_manifest;
    std::string model_path;
    std::string target = "ensemble";
    std::string geometry = "student";
    std::string bits = "1-1-4";
    int seq_len = 128;
};

binens::PipelineConfig resolve_config(const CliOptions& opt) {
    binens::PipelineConfig cfg;
    if (!opt.config_path.empty()) cfg = binens::load_pipeline_config(opt.config_path);
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.threads) cfg.threads = *opt.threads;
    if (opt.kd) cfg.boost_kd = binens::kd_strategy_from_name(*opt.kd);
    if (opt.ensemble_size) cfg.ensemble_size = *opt.ensemble_size;
    if (opt.noise_variance) cfg.eval_noise_variance = *opt.noise_variance;
    if (opt.rounds) cfg.eval_rounds = *opt.rounds;
    if (cfg.threads < 1) throw binens::ConfigError("threads must be >= 1");
    return cfg;
}

std::string default_path(const CliOptions& opt, const std::string& given, const char* name) {
    return given.empty() ? (fs::path(opt.out_dir) / name).string() : given;
}

std::ofstream open_metrics_log(const CliOptions& opt, const char* name) {
    fs::create_directories(opt.out_dir);
    std::ofstream log(fs::path(opt.out_dir) / name, std::ios::binary);
    return log;
}

// --- stage wrappers that also persist artifacts ------------------------------

struct StagePaths {
    std::string teacher, ternary, split, ensemble_manifest;
};

StagePaths stage_paths(const CliOptions& opt) {
    StagePaths p;
    p.teacher = default_path(opt, opt.teacher_path, "teacher.ckpt");
    p.ternary = default_path(opt, opt.ternary_path, "ternary.ckpt");
    p.split = default_path(opt, opt.split_path, "split.ckpt");
    p.ensemble_manifest = opt.ensemble_manifest.empty()
                              ? (fs::path(opt.out_dir) / "ensemble" / "ensemble.json").string()
                              : opt.ensemble_manifest;
    return p;
}

void do_train_teacher(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    const auto paths = stage_paths(opt);
    binens::StageTimer timer(manifest, "train-teacher");
    auto data = binens::make_datasets(cfg);
    auto log = open_metrics_log(opt, "metrics_teacher.log");
    auto stage = binens::run_train_teacher(cfg, data, &log);
    binens::save_checkpoint(stage.checkpoint, paths.teacher);
    timer.finish(json{{"dev_accuracy", stage.dev_metrics.accuracy},
                      {"steps", stage.report.steps},
                      {"backward_passes", stage.report.backward_passes},
                      {"train_wall_seconds", stage.report.wall_seconds}});
    manifest.add_output(paths.teacher);
    manifest.add_output((fs::path(opt.out_dir) / "metrics_teacher.log").string(), false);
    std::cout << "teacher: dev accuracy " << stage.dev_metrics.accuracy << ", checkpoint " << paths.teacher << "\n";
}

void do_distill_split(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    const auto paths = stage_paths(opt);
    binens::StageTimer timer(manifest, "distill-split");
    auto data = binens::make_datasets(cfg);
    auto teacher = binens::load_checkpoint(paths.teacher);
    auto log = open_metrics_log(opt, "metrics_distill.log");
    auto stage = binens::run_distill_split(cfg, teacher, data, &log);
    binens::save_checkpoint(stage.ternary, paths.ternary);
    binens::save_checkpoint(stage.split, paths.split);
    timer.finish(json{{"exactness_max_logit_diff", stage.exactness_max_diff},
                      {"steps", stage.report.steps},
                      {"backward_passes", stage.report.backward_passes}});
    manifest.add_output(paths.ternary);
    manifest.add_output(paths.split);
    manifest.add_output((fs::path(opt.out_dir) / "metrics_distill.log").string(), false);
    std::cout << "distill-split: exactness max |logit diff| " << stage.exactness_max_diff << "\n"
              << "  ternary checkpoint " << paths.ternary << "\n  split checkpoint " << paths.split << "\n";
}

void do_boost(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    const auto paths = stage_paths(opt);
    binens::StageTimer timer(manifest, "boost");
    auto data = binens::make_datasets(cfg);
    auto split = binens::load_checkpoint(paths.split);
    std::optional<binens::Checkpoint> ternary;
    if (cfg.boost_kd != binens::KDStrategy::A) ternary = binens::load_checkpoint(paths.ternary);
    auto log = open_metrics_log(opt, "metrics_boost.log");
    auto stage = binens::run_boost(cfg, split, ternary ? &*ternary : nullptr, data, &log);
    const std::string manifest_path =
        binens::save_ensemble(stage.ensemble, fs::path(paths.ensemble_manifest).parent_path().string());
    json rounds = json::array();
    for (const auto& r : stage.ensemble.rounds) rounds.push_back(r);
    timer.finish(json{{"members", stage.ensemble.members.size()}, {"rounds", rounds}});
    manifest.add_output(manifest_path);
    for (std::size_t i = 0; i < stage.ensemble.members.size(); ++i)
        manifest.add_output(
            (fs::path(paths.ensemble_manifest).parent_path() / ("member_" + std::to_string(i) + ".ckpt")).string());
    manifest.add_output((fs::path(opt.out_dir) / "metrics_boost.log").string(), false);
    std::cout << "boost: " << stage.ensemble.members.size() << " members, manifest " << manifest_path << "\n";
    for (const auto& r : stage.ensemble.rounds)
        std::cout << "  round " << r.round << " attempt " << r.attempt << ": e=" << r.error << " alpha=" << r.alpha
                  << (r.discarded ? " (discarded)" : "") << (r.early_stop ? " (early stop)" : "") << "\n";
}

// Evaluation subject: the boosted ensemble, a single pipeline checkpoint, or
// an explicit --model path.
struct EvalSubject {
    std::optional<binens::MaterializedEnsemble> ensemble;
    std::optional<binens::EncoderModelT<float>> model;
    std::string description;
};

EvalSubject load_subject(const binens::PipelineConfig&, const CliOptions& opt) {
    const auto paths = stage_paths(opt);
    EvalSubject s;
    if (!opt.model_path.empty()) {
        s.model = binens::model_from_checkpoint(binens::load_checkpoint(opt.model_path));
        s.description = opt.model_path;
        return s;
    }
    if (opt.target == "ensemble") {
        s.ensemble = binens::MaterializedEnsemble::from(binens::load_ensemble(paths.ensemble_manifest));
        s.description = "ensemble(" + std::to_string(s.ensemble->models.size()) + " members)";
    } else if (opt.target == "teacher") {
        s.model = binens::model_from_checkpoint(binens::load_checkpoint(paths.teacher));
        s.description = "teacher";
    } else if (opt.target == "ternary") {
        s.model = binens::model_from_checkpoint(binens::load_checkpoint(paths.ternary));
        s.description = "ternary";
    } else if (opt.target == "split") {
        s.model = binens::model_from_checkpoint(binens::load_checkpoint(paths.split));
        s.description = "split";
    } else if (opt.target.rfind("member", 0) == 0) {
        const auto ensemble = binens::load_ensemble(paths.ensemble_manifest);
        const std::size_t idx = static_cast<std::size_t>(std::stoi(opt.target.substr(6)));
        if (idx >= ensemble.members.size())
            throw binens::ConfigError("eval: member index " + std::to_string(idx) + " out of range");
        s.model = binens::model_from_checkpoint(ensemble.members[idx].checkpoint);
        s.description = opt.target;
    } else {
        throw binens::ConfigError("eval: unknown target '" + opt.target +
                                  "' (expected ensemble|teacher|ternary|split|memberN)");
    }
    return s;
}

void do_eval(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    binens::StageTimer timer(manifest, "eval");
    auto data = binens::make_datasets(cfg);
    auto subject = load_subject(cfg, opt);
    binens::EvalOptions eopt;
    eopt.batch_size = cfg.eval_batch_size;
    eopt.threads = cfg.threads;
    std::vector<int> labels;
    for (const auto& ex : data.dev.examples) labels.push_back(ex.label);
    const auto preds = subject.ensemble ? binens::predict_dataset(*subject.ensemble, data.dev, eopt)
                                        : binens::predict_dataset(*subject.model, data.dev, eopt);
    const auto metrics = binens::accuracy_and_confusion(preds, labels, data.dev.num_classes);
    json doc = metrics;
    doc["subject"] = subject.description;
    const std::string path = (fs::path(opt.out_dir) / ("eval_" + opt.target + ".json")).string();
    binens::write_text_atomic(path, doc.dump(2) + "\n");
    timer.finish(json{{"accuracy", metrics.accuracy}});
    manifest.add_output(path);
    std::cout << "eval[" << subject.description << "]: accuracy " << metrics.accuracy;
    if (metrics.matthews) std::cout << ", mcc " << *metrics.matthews;
    std::cout << "\n";
}

void do_robustness(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    binens::StageTimer timer(manifest, "robustness");
    auto data = binens::make_datasets(cfg);
    auto subject = load_subject(cfg, opt);
    const std::uint64_t seed = binens::derive_seed(cfg.seed, 71);
    const auto report = subject.ensemble
                            ? binens::robustness_eval(*subject.ensemble, data.dev, cfg.eval_noise_variance,
                                                      cfg.eval_rounds, seed, cfg.threads)
                            : binens::robustness_eval(*subject.model, data.dev, cfg.eval_noise_variance,
                                                      cfg.eval_rounds, seed, cfg.threads);
    json doc = report;
    doc["subject"] = subject.description;
    const std::string jpath = (fs::path(opt.out_dir) / ("robustness_" + opt.target + ".json")).string();
    const std::string cpath = (fs::path(opt.out_dir) / ("robustness_" + opt.target + ".csv")).string();
    binens::write_text_atomic(jpath, doc.dump(2) + "\n");
    binens::write_text_atomic(cpath, binens::robustness_csv(report));
    timer.finish(json{{"mean", report.mean}, {"stddev", report.stddev}});
    manifest.add_output(jpath);
    manifest.add_output(cpath);
    std::cout << "robustness[" << subject.description << "]: mean " << report.mean << ", std " << report.stddev
              << " over " << report.rounds << " rounds (variance " << report.noise_variance << ")\n";
}

binens::EncoderConfig cost_geometry(const binens::PipelineConfig& cfg, const CliOptions& opt) {
    if (opt.geometry == "student") return cfg.student_config();
    if (opt.geometry == "teacher") return cfg.teacher_config();
    if (opt.geometry != "bert-base")
        throw binens::ConfigError("cost: unknown geometry '" + opt.geometry + "' (student|teacher|bert-base)");
    binens::EncoderConfig c;
    c.vocab_size = 30522;
    c.max_seq_len = 512;
    c.hidden_dim = 768;
    c.num_layers = 12;
    c.num_heads = 12;
    c.ffn_dim = 3072;
    c.num_classes = 2;
    if (opt.bits == "1-1-4") {
        c.quant["weights"] = binens::QuantSpec{binens::QuantKind::binary, 1.0f};
        c.quant["embeddings"] = binens::QuantSpec{binens::QuantKind::binary, 1.0f};
        c.quant["activations"] = binens::QuantSpec{binens::QuantKind::uniform4, 1.0f};
    } else if (opt.bits != "fp32") {
        throw binens::ConfigError("cost: unknown bits '" + opt.bits + "' (fp32|1-1-4)");
    }
    return c;
}

void do_cost(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    binens::StageTimer timer(manifest, "cost");
    const auto geometry = cost_geometry(cfg, opt);
    const int seq = opt.geometry == "bert-base" ? opt.seq_len : geometry.max_seq_len;
    const auto report = binens::flops_model_size(geometry, cfg.ensemble_size, seq);
    json doc = report;
    doc["geometry"] = opt.geometry;
    // "total/N": effective GFLOPs for the whole ensemble over the parallel
    // (per-member, concurrent execution) figure.
    const std::string jpath = (fs::path(opt.out_dir) / "cost.json").string();
    const std::string cpath = (fs::path(opt.out_dir) / "cost.csv").string();
    binens::write_text_atomic(jpath, doc.dump(2) + "\n");
    binens::write_text_atomic(cpath, binens::cost_csv(report));
    timer.finish();
    manifest.add_output(jpath);
    manifest.add_output(cpath);
    std::cout << "cost[" << opt.geometry << ", N=" << report.ensemble_size << ", seq " << seq << "]: size "
              << static_cast<double>(report.model_size_bytes) / 1e6 << " MB, FLOPs "
              << report.flops / 1e9 << " G total / " << report.flops_parallel / 1e9 << " G parallel\n";
}

[[noreturn]] void throw_with_nested_stage(const char* stage, const std::exception& e) {
    const std::string msg = std::string("pipeline halted at stage '") + stage + "': " + e.what();
    if (dynamic_cast<const binens::ConfigError*>(&e)) throw binens::ConfigError(msg);
    if (dynamic_cast<const binens::DataError*>(&e)) throw binens::DataError(msg);
    if (dynamic_cast<const binens::DegenerateTrainingError*>(&e)) throw binens::DegenerateTrainingError(msg);
    throw binens::InternalError(msg);
}

void do_pipeline(const binens::PipelineConfig& cfg, const CliOptions& opt, binens::RunManifest& manifest) {
    const char* stage_name = "train-teacher";
    try {
        do_train_teacher(cfg, opt, manifest);
        stage_name = "distill-split";
        do_distill_split(cfg, opt, manifest);
        stage_name = "boost";
        do_boost(cfg, opt, manifest);
        stage_name = "eval";
        CliOptions eval_opt = opt;
        eval_opt.target = "ensemble";
        do_eval(cfg, eval_opt, manifest);
        eval_opt.target = "member0";
        do_eval(cfg, eval_opt, manifest);
        stage_name = "robustness";
        eval_opt.target = "ensemble";
        do_robustness(cfg, eval_opt, manifest);
        eval_opt.target = "member0";
        do_robustness(cfg, eval_opt, manifest);
        stage_name = "cost";
        do_cost(cfg, opt, manifest);
    } catch (const std::exception& e) {
        throw_with_nested_stage(stage_name, e);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"binens: AdaBoost ensembles of binarized transformer classifiers"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string command;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "JSON config file");
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--seed", opt.seed, "override config seed");
        sub->add_option("--threads", opt.threads, "evaluation fan-out threads");
        return sub;
    };

    auto* c_teacher = add_common(app.add_subcommand("train-teacher", "train the full-precision teacher"));
    auto* c_distill = add_common(app.add_subcommand("distill-split", "distill the ternary student, then split"));
    c_distill->add_option("--teacher", opt.teacher_path, "teacher checkpoint (default <out>/teacher.ckpt)");
    auto* c_boost = add_common(app.add_subcommand("boost", "AdaBoost over fine-tuned split students"));
    c_boost->add_option("--split", opt.split_path, "split checkpoint (default <out>/split.ckpt)");
    c_boost->add_option("--ternary", opt.ternary_path, "ternary teacher checkpoint for KD strategies B/C");
    c_boost->add_option("--kd", opt.kd, "KD strategy A|B|C");
    c_boost->add_option("--ensemble-size", opt.ensemble_size, "number of boosting rounds N");
    auto* c_eval = add_common(app.add_subcommand("eval", "dev-set metrics"));
    c_eval->add_option("--target", opt.target, "ensemble|teacher|ternary|split|memberN");
    c_eval->add_option("--model", opt.model_path, "explicit checkpoint path");
    auto* c_rob = add_common(app.add_subcommand("robustness", "noise-injection robustness report"));
    c_rob->add_option("--target", opt.target, "ensemble|teacher|ternary|split|memberN");
    c_rob->add_option("--model", opt.model_path, "explicit checkpoint path");
    c_rob->add_option("--noise-variance", opt.noise_variance, "Gaussian noise variance (default 0.01)");
    c_rob->add_option("--rounds", opt.rounds, "sampling rounds (default 10)");
    auto* c_cost = add_common(app.add_subcommand("cost", "FLOPs / model-size accounting"));
    c_cost->add_option("--geometry", opt.geometry, "student|teacher|bert-base");
    c_cost->add_option("--bits", opt.bits, "bert-base quantization: fp32|1-1-4");
    c_cost->add_option("--seq-len", opt.seq_len, "sequence length for bert-base accounting");
    c_cost->add_option("--ensemble-size", opt.ensemble_size, "ensemble size N");
    auto* c_pipe = add_common(app.add_subcommand("pipeline", "run every stage end to end"));
    c_pipe->add_option("--kd", opt.kd, "boost KD strategy A|B|C");
    c_pipe->add_option("--ensemble-size", opt.ensemble_size, "number of boosting rounds N");
    c_pipe->add_option("--noise-variance", opt.noise_variance, "robustness noise variance");
    c_pipe->add_option("--rounds", opt.rounds, "robustness sampling rounds");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    for (const auto* sub :
         {c_teacher, c_distill, c_boost, c_eval, c_rob, c_cost, c_pipe}) {
        if (sub->parsed()) command = sub->get_name();
    }

    try {
        const auto cfg = resolve_config(opt);
        fs::create_directories(opt.out_dir);
        binens::RunManifest manifest(command, json(cfg));
        manifest.set("seed", cfg.seed);
        manifest.set("out_dir", opt.out_dir);
        if (!opt.config_path.empty()) manifest.set("config_path", opt.config_path);

        if (command == "train-teacher") do_train_teacher(cfg, opt, manifest);
        else if (command == "distill-split") do_distill_split(cfg, opt, manifest);
        else if (command == "boost") do_boost(cfg, opt, manifest);
        else if (command == "eval") do_eval(cfg, opt, manifest);
        else if (command == "robustness") do_robustness(cfg, opt, manifest);
        else if (command == "cost") do_cost(cfg, opt, manifest);
        else if (command == "pipeline") do_pipeline(cfg, opt, manifest);

        manifest.write((fs::path(opt.out_dir) / ("manifest_" + command + ".json")).string());
        return 0;
    } catch (const binens::ConfigError& e) {
        binens::log_error(e.what());
        return 2;
    } catch (const binens::DataError& e) {
        binens::log_error(e.what());
        return 2;
    } catch (const binens::DegenerateTrainingError& e) {
        binens::log_error(e.what());
        return 3;
    } catch (const std::exception& e) {
        binens::log_error(e.what());
        return 4;
    }
}
