#pragma once

// Stage drivers shared by the CLI and the integration tests: dataset
// construction, full-precision teacher training, ternary distillation plus
// weight splitting, boosting, and the derived evaluations.
//
// Stage chain: fp teacher -> half-size ternary student (two-stage KD) ->
// ternary weight split -> boosted binary students. During boosting the
// ternary model serves as the teacher for strategies B and C; its widths
// match the split students, so no projection is needed there.

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "binens/data_io.hpp"
#include "binens/distillation.hpp"
#include "binens/ensemble.hpp"
#include "binens/errors.hpp"
#include "binens/evaluation.hpp"
#include "binens/model.hpp"
#include "binens/rng.hpp"

namespace binens {

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t h = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    return h;
}

struct TaskConfig {
    TaskKind kind = TaskKind::keyword_vs_keyword;
    int train_m = 2000;
    int dev_m = 600;
    int num_classes = 2;
    double noise_rate = 0.1;
    int min_len = 12;
    int max_len = 20;
    int augment_factor = 1;
    std::string train_tsv;  // when set, both TSV paths override the generator
    std::string dev_tsv;
};

struct ModelSection {
    int hidden_dim = 32;
    int num_layers = 2;
    int num_heads = 2;
    int ffn_dim = 64;
    int max_seq_len = 24;
};

struct PipelineConfig {
    std::uint64_t seed = 7;
    int threads = 1;
    TaskConfig task;
    ModelSection teacher_model;
    TrainConfig teacher_train;
    ModelSection student_model{16, 2, 2, 32, 24};
    std::map<std::string, QuantSpec> student_quant{{"weights", {QuantKind::ternary, 1.0f}},
                                                   {"embeddings", {QuantKind::ternary, 1.0f}},
                                                   {"activations", {QuantKind::uniform4, 1.0f}}};
    TrainConfig student_train;
    int ensemble_size = 2;
    KDStrategy boost_kd = KDStrategy::A;
    TrainConfig boost_train;
    double eval_noise_variance = 0.01;
    int eval_rounds = 10;
    int eval_batch_size = 64;

    PipelineConfig() {
        teacher_train.epochs = 4;
        teacher_train.learning_rate = 3e-3f;
        student_train.epochs = 3;
        student_train.learning_rate = 2e-3f;
        student_train.kd = KDStrategy::C;
        student_train.temperature = 2.0f;
        boost_train.epochs = 2;
        boost_train.learning_rate = 1e-3f;
    }

    EncoderConfig teacher_config() const {
        EncoderConfig c;
        c.vocab_size = kByteVocabSize;
        c.max_seq_len = teacher_model.max_seq_len;
        c.hidden_dim = teacher_model.hidden_dim;
        c.num_layers = teacher_model.num_layers;
        c.num_heads = teacher_model.num_heads;
        c.ffn_dim = teacher_model.ffn_dim;
        c.num_classes = task.num_classes;
        c.seed = derive_seed(seed, 11);
        return c;
    }

    EncoderConfig student_config() const {
        EncoderConfig c;
        c.vocab_size = kByteVocabSize;
        c.max_seq_len = student_model.max_seq_len;
        c.hidden_dim = student_model.hidden_dim;
        c.num_layers = student_model.num_layers;
        c.num_heads = student_model.num_heads;
        c.ffn_dim = student_model.ffn_dim;
        c.num_classes = task.num_classes;
        c.quant = student_quant;
        c.seed = derive_seed(seed, 13);
        return c;
    }
};

// --- JSON (all defaults echoed back so manifests are self-describing) -----

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"optimizer", opt_kind_name(c.optimizer)},
                       {"lr_schedule", c.lr_schedule == LrSchedule::linear_decay ? "linear_decay" : "constant"},
                       {"kd", kd_strategy_name(c.kd)},
                       {"temperature", c.temperature}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("optimizer")) c.optimizer = opt_kind_from_name(j.at("optimizer").get<std::string>());
    if (j.contains("lr_schedule")) {
        const auto s = j.at("lr_schedule").get<std::string>();
        if (s == "constant")
            c.lr_schedule = LrSchedule::constant;
        else if (s == "linear_decay")
            c.lr_schedule = LrSchedule::linear_decay;
        else
            throw ConfigError("unknown lr_schedule '" + s + "'");
    }
    if (j.contains("kd")) c.kd = kd_strategy_from_name(j.at("kd").get<std::string>());
    c.temperature = j.value("temperature", c.temperature);
}

inline void to_json(nlohmann::json& j, const TaskConfig& c) {
    j = nlohmann::json{{"kind", task_kind_name(c.kind)}, {"train_m", c.train_m},
                       {"dev_m", c.dev_m},               {"num_classes", c.num_classes},
                       {"noise_rate", c.noise_rate},     {"min_len", c.min_len},
                       {"max_len", c.max_len},           {"augment_factor", c.augment_factor},
                       {"train_tsv", c.train_tsv},       {"dev_tsv", c.dev_tsv}};
}
inline void from_json(const nlohmann::json& j, TaskConfig& c) {
    if (j.contains("kind")) c.kind = task_kind_from_name(j.at("kind").get<std::string>());
    c.train_m = j.value("train_m", c.train_m);
    c.dev_m = j.value("dev_m", c.dev_m);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.noise_rate = j.value("noise_rate", c.noise_rate);
    c.min_len = j.value("min_len", c.min_len);
    c.max_len = j.value("max_len", c.max_len);
    c.augment_factor = j.value("augment_factor", c.augment_factor);
    c.train_tsv = j.value("train_tsv", c.train_tsv);
    c.dev_tsv = j.value("dev_tsv", c.dev_tsv);
}

inline void to_json(nlohmann::json& j, const ModelSection& c) {
    j = nlohmann::json{{"hidden_dim", c.hidden_dim},
                       {"num_layers", c.num_layers},
                       {"num_heads", c.num_heads},
                       {"ffn_dim", c.ffn_dim},
                       {"max_seq_len", c.max_seq_len}};
}
inline void from_json(const nlohmann::json& j, ModelSection& c) {
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
}

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
    nlohmann::json quant = nlohmann::json::object();
    for (const auto& [k, s] : c.student_quant) quant[k] = s;
    j = nlohmann::json{
        {"seed", c.seed},
        {"threads", c.threads},
        {"task", c.task},
        {"teacher", {{"model", c.teacher_model}, {"train", c.teacher_train}}},
        {"student", {{"model", c.student_model}, {"quant", quant}, {"train", c.student_train}}},
        {"boost",
         {{"ensemble_size", c.ensemble_size}, {"kd", kd_strategy_name(c.boost_kd)}, {"train", c.boost_train}}},
        {"eval",
         {{"noise_variance", c.eval_noise_variance}, {"rounds", c.eval_rounds}, {"batch_size", c.eval_batch_size}}}};
}
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    if (j.contains("task")) j.at("task").get_to(c.task);
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        if (t.contains("model")) t.at("model").get_to(c.teacher_model);
        if (t.contains("train")) t.at("train").get_to(c.teacher_train);
    }
    if (j.contains("student")) {
        const auto& s = j.at("student");
        if (s.contains("model")) s.at("model").get_to(c.student_model);
        if (s.contains("train")) s.at("train").get_to(c.student_train);
        if (s.contains("quant")) {
            c.student_quant.clear();
            for (const auto& [k, v] : s.at("quant").items()) c.student_quant[k] = v.get<QuantSpec>();
        }
    }
    if (j.contains("boost")) {
        const auto& b = j.at("boost");
        c.ensemble_size = b.value("ensemble_size", c.ensemble_size);
        if (b.contains("kd")) c.boost_kd = kd_strategy_from_name(b.at("kd").get<std::string>());
        if (b.contains("train")) b.at("train").get_to(c.boost_train);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        c.eval_noise_variance = e.value("noise_variance", c.eval_noise_variance);
        c.eval_rounds = e.value("rounds", c.eval_rounds);
        c.eval_batch_size = e.value("batch_size", c.eval_batch_size);
    }
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    try {
        return j.get<PipelineConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

// --- Datasets ---------------------------------------------------------------

struct DatasetPair {
    Dataset train;
    Dataset dev;
};

inline DatasetPair make_datasets(const PipelineConfig& cfg) {
    DatasetPair out;
    if (!cfg.task.train_tsv.empty() || !cfg.task.dev_tsv.empty()) {
        if (cfg.task.train_tsv.empty() || cfg.task.dev_tsv.empty())
            throw ConfigError("task: train_tsv and dev_tsv must both be set when loading TSV data");
        out.train = load_tsv(cfg.task.train_tsv);
        out.dev = load_tsv(cfg.task.dev_tsv);
    } else {
        out.train = make_synthetic_task(cfg.task.kind, cfg.task.train_m, cfg.task.num_classes,
                                        derive_seed(cfg.seed, 1), cfg.task.noise_rate, cfg.task.min_len,
                                        cfg.task.max_len);
        out.dev = make_synthetic_task(cfg.task.kind, cfg.task.dev_m, cfg.task.num_classes, derive_seed(cfg.seed, 2),
                                      cfg.task.noise_rate, cfg.task.min_len, cfg.task.max_len);
    }
    out.dev.split = Split::dev;
    if (cfg.task.augment_factor > 1)
        out.train = augment(out.train, cfg.task.augment_factor, derive_seed(cfg.seed, 3));
    return out;
}

// --- Stages ------------------------------------------------------------------

struct TeacherStage {
    Checkpoint checkpoint;
    TrainReport report;
    MetricsReport dev_metrics;
};

inline TeacherStage run_train_teacher(const PipelineConfig& cfg, const DatasetPair& data,
                                      std::ostream* metrics_log = nullptr) {
    TeacherStage stage;
    auto model = build_encoder<float>(cfg.teacher_config());
    TrainConfig tc = cfg.teacher_train;
    tc.kd = KDStrategy::A;
    tc.seed = derive_seed(cfg.seed, 21);
    auto init = checkpoint_from_model(model);
    auto result = train_student(init, nullptr, data.train, init_sample_weights(data.train.size()), tc, metrics_log);
    stage.checkpoint = std::move(result.checkpoint);
    stage.report = result.report;
    auto trained = model_from_checkpoint(stage.checkpoint);
    EvalOptions opt;
    opt.batch_size = cfg.eval_batch_size;
    opt.threads = cfg.threads;
    std::vector<int> labels;
    for (const auto& ex : data.dev.examples) labels.push_back(ex.label);
    stage.dev_metrics = accuracy_and_confusion(predict_dataset(trained, data.dev, opt), labels, data.dev.num_classes);
    return stage;
}

inline TokenBatch random_token_batch(int vocab, int batch, int seq, Rng& rng) {
    TokenBatch b;
    b.batch = batch;
    b.seq = seq;
    b.ids.resize(static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq));
    b.mask.assign(b.ids.size(), 1);
    for (auto& id : b.ids) id = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(vocab - 1)));
    return b;
}

// Max |logit difference| between two models over random batches.
inline double max_logit_diff(const EncoderModelT<float>& a, const EncoderModelT<float>& b, int batches,
                             int batch_size, std::uint64_t seed) {
    if (a.config.max_seq_len != b.config.max_seq_len || a.config.vocab_size != b.config.vocab_size)
        throw ConfigError("max_logit_diff: model geometries differ");
    Rng rng(seed);
    double worst = 0.0;
    for (int i = 0; i < batches; ++i) {
        TokenBatch batch = random_token_batch(a.config.vocab_size, batch_size, a.config.max_seq_len, rng);
        const auto la = a.forward(batch).logits;
        const auto lb = b.forward(batch).logits;
        for (std::size_t k = 0; k < la.numel(); ++k)
            worst = std::max(worst, std::abs(static_cast<double>(la[k]) - static_cast<double>(lb[k])));
    }
    return worst;
}

struct DistillStage {
    Checkpoint ternary;
    Checkpoint split;
    TrainReport report;
    double exactness_max_diff = 0.0;
};

constexpr double kTwsExactnessTolerance = 1e-5;

inline DistillStage run_distill_split(const PipelineConfig& cfg, const Checkpoint& teacher_ckpt,
                                      const DatasetPair& data, std::ostream* metrics_log = nullptr,
                                      int exactness_batches = 20) {
    DistillStage stage;
    auto teacher = model_from_checkpoint(teacher_ckpt);
    auto student = build_encoder<float>(cfg.student_config());
    if (student.config.weights().kind != QuantKind::ternary)
        throw ConfigError("distill-split: student weights must be ternary");
    TrainConfig tc = cfg.student_train;
    tc.seed = derive_seed(cfg.seed, 31);
    const EncoderModelT<float>* teacher_ptr = (tc.kd == KDStrategy::A) ? nullptr : &teacher;
    auto result = train_student(checkpoint_from_model(student), teacher_ptr, data.train,
                                init_sample_weights(data.train.size()), tc, metrics_log);
    stage.ternary = std::move(result.checkpoint);
    stage.report = result.report;

    auto ternary_model = model_from_checkpoint(stage.ternary);
    auto split = split_ternary_model(ternary_model);
    stage.exactness_max_diff =
        max_logit_diff(ternary_model, split, exactness_batches, 8, derive_seed(cfg.seed, 33));
    if (stage.exactness_max_diff > kTwsExactnessTolerance)
        throw InternalError("distill-split: ternary weight split failed the exactness check (max logit diff " +
                            std::to_string(stage.exactness_max_diff) + " > " +
                            std::to_string(kTwsExactnessTolerance) + "); refusing to emit the split checkpoint");
    stage.split = checkpoint_from_model(split);
    return stage;
}

struct BoostStage {
    EnsembleModel ensemble;
    std::vector<TrainReport> member_reports;
};

// AdaBoost over fresh copies of the split checkpoint, each fine-tuned under
// the current sample weights with a per-attempt seed.
inline BoostStage run_boost(const PipelineConfig& cfg, const Checkpoint& split_ckpt,
                            const Checkpoint* ternary_teacher, const DatasetPair& data,
                            std::ostream* metrics_log = nullptr) {
    if (cfg.ensemble_size < 1) throw ConfigError("boost: ensemble_size must be >= 1");
    const bool needs_teacher = cfg.boost_kd != KDStrategy::A;
    if (needs_teacher && ternary_teacher == nullptr)
        throw ConfigError(std::string("boost: KD strategy ") + kd_strategy_name(cfg.boost_kd) +
                          " requires the ternary teacher checkpoint");
    EncoderModelT<float> teacher;
    if (needs_teacher) teacher = model_from_checkpoint(*ternary_teacher);

    BoostStage stage;
    std::vector<int> labels;
    labels.reserve(data.train.examples.size());
    for (const auto& ex : data.train.examples) labels.push_back(ex.label);

    EvalOptions popt;
    popt.batch_size = cfg.eval_batch_size;
    popt.threads = cfg.threads;

    auto train_fn = [&](int attempt, const SampleWeights& d) -> Checkpoint {
        TrainConfig tc = cfg.boost_train;
        tc.kd = cfg.boost_kd;
        tc.seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(attempt));
        auto result =
            train_student(split_ckpt, needs_teacher ? &teacher : nullptr, data.train, d, tc, metrics_log);
        stage.member_reports.push_back(result.report);
        return std::move(result.checkpoint);
    };
    auto predict_fn = [&](const Checkpoint& ck) {
        return predict_dataset(model_from_checkpoint(ck), data.train, popt);
    };
    auto boost = adaboost_train(data.train.size(), labels, data.train.num_classes, cfg.ensemble_size, train_fn,
                                predict_fn);
    stage.ensemble.num_classes = boost.num_classes;
    stage.ensemble.rounds = boost.rounds;
    for (auto& [ckpt, alpha] : boost.members)
        stage.ensemble.members.push_back({std::move(ckpt), alpha});
    return stage;
}

}  // namespace binens
