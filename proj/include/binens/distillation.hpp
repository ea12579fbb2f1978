#pragma once

// Knowledge-distillation losses and the per-round student training loop.
//
// Strategies: A trains on hard labels only, B on the soft prediction loss
// only, C interleaves a transformer-layer stage (hidden states + attention
// maps) and a prediction stage per mini-batch, costing two propagations per
// step. All losses take the boosting distribution as per-example multipliers,
// normalized within each batch.

#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "binens/data_io.hpp"
#include "binens/ensemble.hpp"
#include "binens/errors.hpp"
#include "binens/model.hpp"
#include "binens/optimizer.hpp"
#include "binens/tensor.hpp"

namespace binens {

enum class KDStrategy { A, B, C };  // D (DMD) is reserved and not implemented

inline const char* kd_strategy_name(KDStrategy s) {
    switch (s) {
        case KDStrategy::A: return "A";
        case KDStrategy::B: return "B";
        case KDStrategy::C: return "C";
    }
    return "?";
}

inline KDStrategy kd_strategy_from_name(const std::string& s) {
    if (s == "A" || s == "a") return KDStrategy::A;
    if (s == "B" || s == "b") return KDStrategy::B;
    if (s == "C" || s == "c") return KDStrategy::C;
    if (s == "D" || s == "d") throw ConfigError("KD strategy D (DMD) is not implemented");
    throw ConfigError("unknown KD strategy '" + s + "' (expected A, B, or C)");
}

enum class LrSchedule { constant, linear_decay };

struct TrainConfig {
    int epochs = 1;
    int batch_size = 32;
    float learning_rate = 1e-3f;
    OptKind optimizer = OptKind::adam;
    LrSchedule lr_schedule = LrSchedule::constant;
    std::uint64_t seed = 1;
    KDStrategy kd = KDStrategy::A;
    float temperature = 1.0f;  // soft cross-entropy temperature

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        if (epochs < 1) v.push_back("epochs must be >= 1");
        if (batch_size < 1) v.push_back("batch_size must be >= 1");
        // lr = 0 is allowed: it makes a training run a (testable) no-op.
        if (!(learning_rate >= 0.0f)) v.push_back("learning_rate must be >= 0");
        if (!(temperature > 0.0f)) v.push_back("temperature must be > 0");
        return v;
    }
};

namespace detail {

// Batch sample weights normalized to sum 1 (all-zero batches stay zero).
template <class T>
TensorT<T> normalized_weights(const std::vector<double>& w) {
    double s = 0.0;
    for (double x : w) s += x;
    TensorT<T> t = TensorT<T>::zeros({static_cast<int>(w.size())});
    if (s > 0.0)
        for (std::size_t i = 0; i < w.size(); ++i) t[i] = static_cast<T>(w[i] / s);
    return t;
}

}  // namespace detail

// L_trm = sum_{l=1}^{L+1} MSE(H_l^T, H_l^S) + sum_{l=1}^{L} MSE(A_l^T, A_l^S),
// each MSE taken per sample and averaged with the normalized batch weights.
// When teacher and student widths differ, `projection` ([h_S, h_T], frozen)
// maps student hidden states to teacher width.
template <class T>
TensorT<T> loss_trm(const ForwardTraceT<T>& teacher, const ForwardTraceT<T>& student,
                    const std::vector<double>& sample_weights, const TensorT<T>* projection = nullptr) {
    if (teacher.hidden_states.size() != student.hidden_states.size() ||
        teacher.attentions.size() != student.attentions.size())
        throw ShapeError("loss_trm: teacher has " + std::to_string(teacher.hidden_states.size()) +
                         " hidden states / " + std::to_string(teacher.attentions.size()) +
                         " attentions, student " + std::to_string(student.hidden_states.size()) + " / " +
                         std::to_string(student.attentions.size()));
    TensorT<T> wbar = detail::normalized_weights<T>(sample_weights);
    TensorT<T> total = TensorT<T>::zeros({1});
    for (std::size_t l = 0; l < teacher.hidden_states.size(); ++l) {
        TensorT<T> hs = student.hidden_states[l];
        if (projection) hs = matmul(hs, *projection);
        if (hs.shape() != teacher.hidden_states[l].shape())
            throw ShapeError("loss_trm: hidden state " + std::to_string(l) + " shapes " +
                             shape_str(teacher.hidden_states[l].shape()) + " vs " + shape_str(hs.shape()));
        TensorT<T> d = sub(teacher.hidden_states[l], hs);
        total = add(total, reduce_sum(mul(per_sample_mean(mul(d, d)), wbar)));
    }
    for (std::size_t l = 0; l < teacher.attentions.size(); ++l) {
        if (teacher.attentions[l].shape() != student.attentions[l].shape())
            throw ShapeError("loss_trm: attention " + std::to_string(l) + " shapes " +
                             shape_str(teacher.attentions[l].shape()) + " vs " +
                             shape_str(student.attentions[l].shape()));
        TensorT<T> d = sub(teacher.attentions[l], student.attentions[l]);
        total = add(total, reduce_sum(mul(per_sample_mean(mul(d, d)), wbar)));
    }
    return total;
}

// Soft cross-entropy between teacher and student logits at temperature tau:
// SCE = -sum_k softmax(P^T/tau)_k log softmax(P^S/tau)_k, weighted per sample.
template <class T>
TensorT<T> loss_pred(const TensorT<T>& teacher_logits, const TensorT<T>& student_logits,
                     const std::vector<double>& sample_weights, T temperature = T(1)) {
    if (teacher_logits.shape() != student_logits.shape())
        throw ShapeError("loss_pred: logit shapes " + shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
    if (!(temperature > T(0))) throw ConfigError("loss_pred: temperature must be > 0");
    const int K = student_logits.shape().back();
    TensorT<T> wbar = detail::normalized_weights<T>(sample_weights);
    TensorT<T> pt = row_softmax(scale(teacher_logits, T(1) / temperature));
    TensorT<T> ls = row_log_softmax(scale(student_logits, T(1) / temperature));
    // per-sample SCE = -sum_k pt * ls = -K * mean_k(pt * ls)
    TensorT<T> per = scale(per_sample_mean(mul(pt, ls)), static_cast<T>(-K));
    return reduce_sum(mul(per, wbar));
}

// Weighted cross-entropy against hard labels.
template <class T>
TensorT<T> hard_label_loss(const TensorT<T>& student_logits, const std::vector<int>& labels,
                           const std::vector<double>& sample_weights) {
    if (student_logits.ndim() != 2) throw ShapeError("hard_label_loss: logits must be rank 2");
    const int K = student_logits.dim(1);
    if (static_cast<int>(labels.size()) != student_logits.dim(0))
        throw ShapeError("hard_label_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(student_logits.dim(0)) + " rows");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= K)
            throw DataError("hard_label_loss: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " out of range [0," + std::to_string(K) + ")");
    TensorT<T> wbar = detail::normalized_weights<T>(sample_weights);
    TensorT<T> picked = row_gather(row_log_softmax(student_logits), labels);
    return scale(reduce_sum(mul(picked, wbar)), T(-1));
}

// Frozen projection used when student hidden width differs from the teacher's.
// Seeded from the two widths only, so every round of boosting sees the same map.
template <class T>
TensorT<T> make_hidden_projection(int student_dim, int teacher_dim) {
    Rng rng(0x5eedu + 1000003ull * static_cast<std::uint64_t>(student_dim) +
            static_cast<std::uint64_t>(teacher_dim));
    TensorT<T> p = TensorT<T>::zeros({student_dim, teacher_dim});
    const double sigma = 1.0 / std::sqrt(static_cast<double>(student_dim));
    for (std::size_t i = 0; i < p.numel(); ++i) p[i] = static_cast<T>(rng.gaussian(0.0, sigma));
    return p;
}

struct TrainReport {
    long steps = 0;
    long backward_passes = 0;
    double wall_seconds = 0.0;
    double final_loss = 0.0;
    KDStrategy strategy = KDStrategy::A;
};

struct StudentTrainResult {
    Checkpoint checkpoint;
    TrainReport report;
};

// One boosting round of student training (Algorithm lines 4-15): shuffled
// mini-batches, per-example weights looked up from the boosting distribution,
// strategy-dependent losses, one optimizer step per backward pass.
// `metrics_log` receives one "step= phase= loss= wall_ms=" line per pass.
inline StudentTrainResult train_student(const Checkpoint& init, const EncoderModelT<float>* teacher,
                                        const Dataset& data, const SampleWeights& sample_weights,
                                        const TrainConfig& cfg, std::ostream* metrics_log = nullptr) {
    const auto violations = cfg.validate();
    if (!violations.empty()) {
        std::string msg = "invalid train config:";
        for (const auto& s : violations) msg += "\n  - " + s;
        throw ConfigError(msg);
    }
    const bool needs_teacher = cfg.kd == KDStrategy::B || cfg.kd == KDStrategy::C;
    if (needs_teacher && teacher == nullptr)
        throw ConfigError(std::string("train_student: strategy ") + kd_strategy_name(cfg.kd) + " requires a teacher");
    if (!needs_teacher && teacher != nullptr)
        throw ConfigError("train_student: strategy A does not take a teacher");
    if (data.size() == 0) throw DataError("train_student: empty dataset");
    for (const auto& ex : data.examples)
        if (ex.weight_slot < 0 || ex.weight_slot >= sample_weights.size())
            throw DataError("train_student: example " + std::to_string(ex.id) + " has weight slot " +
                            std::to_string(ex.weight_slot) + " outside the sample-weight vector");

    auto model = model_from_checkpoint(init);
    if (teacher) {
        if (teacher->config.num_layers != model.config.num_layers)
            throw ConfigError("train_student: teacher/student layer counts differ");
        if (teacher->config.num_heads != model.config.num_heads)
            throw ConfigError("train_student: teacher/student head counts differ");
        if (teacher->config.num_classes != model.config.num_classes)
            throw ConfigError("train_student: teacher/student class counts differ");
    }
    Tensor projection;
    const bool project = teacher && teacher->config.hidden_dim != model.config.hidden_dim;
    if (project) projection = make_hidden_projection<float>(model.config.hidden_dim, teacher->config.hidden_dim);

    Optimizer opt(model.named_parameters(), cfg.optimizer, cfg.learning_rate);
    Rng rng(cfg.seed);
    const int m = data.size();
    const int seq = model.config.max_seq_len;
    std::vector<int> order(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;

    TrainReport report;
    report.strategy = cfg.kd;
    const long bp_before = g_backward_passes;
    const auto t_start = std::chrono::steady_clock::now();
    const long total_steps =
        static_cast<long>(cfg.epochs) * ((m + cfg.batch_size - 1) / cfg.batch_size);
    long step = 0;

    Tape tape;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (int start = 0; start < m; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, m - start);
            std::vector<int> idxs(order.begin() + start, order.begin() + start + bsz);
            TokenBatch batch = make_token_batch(data, idxs, seq);
            std::vector<int> labels(static_cast<std::size_t>(bsz));
            std::vector<double> w(static_cast<std::size_t>(bsz));
            for (int i = 0; i < bsz; ++i) {
                const auto& ex = data.examples[static_cast<std::size_t>(idxs[static_cast<std::size_t>(i)])];
                labels[static_cast<std::size_t>(i)] = ex.label;
                w[static_cast<std::size_t>(i)] = sample_weights.weights[static_cast<std::size_t>(ex.weight_slot)];
            }

            if (cfg.lr_schedule == LrSchedule::linear_decay)
                opt.set_lr(cfg.learning_rate *
                           static_cast<float>(1.0 - static_cast<double>(step) / static_cast<double>(total_steps)));

            ForwardTrace teacher_trace;
            if (teacher) teacher_trace = teacher->forward(batch);  // no tape: constants

            auto run_phase = [&](const char* phase, auto&& make_loss) {
                const auto t0 = std::chrono::steady_clock::now();
                TapeScope scope(tape);
                ForwardTrace st = model.forward(batch);
                Tensor loss = make_loss(st);
                tape.backprop(loss);
                opt.step();
                report.final_loss = static_cast<double>(loss.item());
                if (metrics_log) {
                    const double ms =
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                    (*metrics_log) << "step=" << step << " phase=" << phase << " loss=" << loss.item()
                                   << " wall_ms=" << ms << "\n";
                }
            };

            switch (cfg.kd) {
                case KDStrategy::A:
                    run_phase("hard", [&](const ForwardTrace& st) { return hard_label_loss(st.logits, labels, w); });
                    break;
                case KDStrategy::B:
                    run_phase("pred", [&](const ForwardTrace& st) {
                        return loss_pred(teacher_trace.logits, st.logits, w, cfg.temperature);
                    });
                    break;
                case KDStrategy::C:
                    run_phase("trm", [&](const ForwardTrace& st) {
                        return loss_trm(teacher_trace, st, w, project ? &projection : nullptr);
                    });
                    run_phase("pred", [&](const ForwardTrace& st) {
                        return loss_pred(teacher_trace.logits, st.logits, w, cfg.temperature);
                    });
                    break;
            }
            ++step;
        }
    }
    report.steps = step;
    report.backward_passes = g_backward_passes - bp_before;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    StudentTrainResult out{checkpoint_from_model(model), report};
    return out;
}

}  // namespace binens
