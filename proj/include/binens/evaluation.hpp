#pragma once

// Metrics (accuracy, Matthews correlation, confusion matrix), the
// noise-injection robustness protocol, and the closed-form FLOPs /
// model-size accountant.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "binens/data_io.hpp"
#include "binens/ensemble.hpp"
#include "binens/errors.hpp"
#include "binens/model.hpp"

namespace binens {

struct MetricsReport {
    double accuracy = 0.0;
    std::optional<double> matthews;          // binary tasks only
    std::vector<std::vector<long>> confusion;  // [true][predicted]
    long total = 0;
};

inline MetricsReport accuracy_and_confusion(const std::vector<int>& predictions, const std::vector<int>& labels,
                                            int K) {
    if (predictions.empty()) throw DataError("accuracy_and_confusion: empty input");
    if (predictions.size() != labels.size())
        throw ShapeError("accuracy_and_confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    MetricsReport r;
    r.confusion.assign(static_cast<std::size_t>(K), std::vector<long>(static_cast<std::size_t>(K), 0));
    long correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int p = predictions[i], y = labels[i];
        if (p < 0 || p >= K || y < 0 || y >= K)
            throw DataError("accuracy_and_confusion: class out of range at index " + std::to_string(i));
        ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
        if (p == y) ++correct;
    }
    r.total = static_cast<long>(predictions.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
    if (K == 2) {
        const double tp = static_cast<double>(r.confusion[1][1]);
        const double tn = static_cast<double>(r.confusion[0][0]);
        const double fp = static_cast<double>(r.confusion[0][1]);
        const double fn = static_cast<double>(r.confusion[1][0]);
        const double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
        r.matthews = denom == 0.0 ? 0.0 : (tp * tn - fp * fn) / denom;  // 0/0 -> 0
    }
    return r;
}

// ---------------------------------------------------------------------------
// Prediction fan-out. Models are read-only during evaluation, so batches may
// be sharded across threads; per-batch noise seeds keep the result identical
// for any thread count.
// ---------------------------------------------------------------------------

struct EvalOptions {
    int batch_size = 64;
    int threads = 1;
    double noise_variance = 0.0;
    std::uint64_t noise_seed = 0;
};

namespace detail {

inline std::uint64_t batch_noise_seed(std::uint64_t base, std::size_t batch_index) {
    return base + 0x9e3779b97f4a7c15ull * (batch_index + 1);
}

template <class PredictBatch>
std::vector<int> sharded_predict(int m, int batch_size, int threads, PredictBatch&& predict) {
    std::vector<int> preds(static_cast<std::size_t>(m), 0);
    const int num_batches = (m + batch_size - 1) / batch_size;
    auto worker = [&](int first, int stride) {
        for (int b = first; b < num_batches; b += stride) {
            const int start = b * batch_size;
            const int count = std::min(batch_size, m - start);
            predict(static_cast<std::size_t>(b), start, count, preds);
        }
    };
    if (threads <= 1) {
        worker(0, 1);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
        for (auto& th : pool) th.join();
    }
    return preds;
}

}  // namespace detail

inline std::vector<int> predict_dataset(const EncoderModelT<float>& model, const Dataset& data,
                                        const EvalOptions& opt = {}) {
    const int m = data.size();
    const int seq = model.config.max_seq_len;
    return detail::sharded_predict(m, opt.batch_size, opt.threads,
                                   [&](std::size_t bi, int start, int count, std::vector<int>& out) {
        std::vector<int> idxs(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) idxs[static_cast<std::size_t>(i)] = start + i;
        TokenBatch batch = make_token_batch(data, idxs, seq);
        Tensor logits;
        if (opt.noise_variance > 0.0) {
            Rng rng(detail::batch_noise_seed(opt.noise_seed, bi));
            logits = model.noise_injected_forward(batch, opt.noise_variance, rng).logits;
        } else {
            logits = model.forward(batch).logits;
        }
        const auto p = argmax_rows(logits);
        for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(start + i)] = p[static_cast<std::size_t>(i)];
    });
}

// Materialized ensemble (models built once) for repeated evaluation.
struct MaterializedEnsemble {
    std::vector<EncoderModelT<float>> models;
    std::vector<double> alphas;
    int num_classes = 2;

    static MaterializedEnsemble from(const EnsembleModel& e) {
        if (e.members.empty()) throw ConfigError("ensemble has no members");
        MaterializedEnsemble m;
        m.num_classes = e.num_classes;
        for (const auto& member : e.members) {
            m.models.push_back(model_from_checkpoint(member.checkpoint));
            m.alphas.push_back(member.alpha);
        }
        return m;
    }
};

inline std::vector<int> predict_dataset(const MaterializedEnsemble& ensemble, const Dataset& data,
                                        const EvalOptions& opt = {}) {
    const int m = data.size();
    const int seq = ensemble.models.front().config.max_seq_len;
    return detail::sharded_predict(m, opt.batch_size, opt.threads,
                                   [&](std::size_t bi, int start, int count, std::vector<int>& out) {
        std::vector<int> idxs(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) idxs[static_cast<std::size_t>(i)] = start + i;
        TokenBatch batch = make_token_batch(data, idxs, seq);
        std::vector<std::vector<int>> member_preds;
        member_preds.reserve(ensemble.models.size());
        for (const auto& model : ensemble.models) {
            Tensor logits;
            if (opt.noise_variance > 0.0) {
                // Same per-batch seed for every member: all members see the
                // same input perturbation.
                Rng rng(detail::batch_noise_seed(opt.noise_seed, bi));
                logits = model.noise_injected_forward(batch, opt.noise_variance, rng).logits;
            } else {
                logits = model.forward(batch).logits;
            }
            member_preds.push_back(argmax_rows(logits));
        }
        const auto vote = weighted_vote(member_preds, ensemble.alphas, ensemble.num_classes);
        for (int i = 0; i < count; ++i)
            out[static_cast<std::size_t>(start + i)] = vote.first[static_cast<std::size_t>(i)];
    });
}

// ---------------------------------------------------------------------------
// Robustness protocol: Gaussian input perturbation at the embedding output,
// accuracy mean and population standard deviation over sampling rounds.
// ---------------------------------------------------------------------------

struct RobustnessReport {
    std::vector<double> per_round;
    double mean = 0.0;
    double stddev = 0.0;  // population
    double noise_variance = 0.0;
    int rounds = 0;
    std::uint64_t seed = 0;
};

template <class Predictable>
RobustnessReport robustness_eval(const Predictable& subject, const Dataset& data, double variance, int rounds,
                                 std::uint64_t seed, int threads = 1) {
    if (rounds < 1) throw ConfigError("robustness_eval: rounds must be >= 1");
    if (variance < 0.0) throw ConfigError("robustness_eval: negative variance");
    RobustnessReport r;
    r.noise_variance = variance;
    r.rounds = rounds;
    r.seed = seed;
    std::vector<int> labels;
    labels.reserve(data.examples.size());
    for (const auto& ex : data.examples) labels.push_back(ex.label);
    for (int round = 1; round <= rounds; ++round) {
        EvalOptions opt;
        opt.threads = threads;
        opt.noise_variance = variance;
        opt.noise_seed = seed + static_cast<std::uint64_t>(round);
        const auto preds = predict_dataset(subject, data, opt);
        r.per_round.push_back(accuracy_and_confusion(preds, labels, data.num_classes).accuracy);
    }
    double mean = 0.0;
    for (double a : r.per_round) mean += a;
    mean /= static_cast<double>(rounds);
    double var = 0.0;
    for (double a : r.per_round) var += (a - mean) * (a - mean);
    var /= static_cast<double>(rounds);
    r.mean = mean;
    r.stddev = std::sqrt(var);
    return r;
}

// ---------------------------------------------------------------------------
// Closed-form FLOPs / model-size accounting.
//
// Size: each parameter costs bits/8 bytes per its quantization group (1-bit
// binary, 2-bit ternary, 32-bit full precision); layer norms, biases,
// position embeddings, and the classifier head are full precision; one
// float32 scale is charged per quantized tensor.
//
// Compute: every matmul contributes 2*macs*cost_factor effective FLOPs
// (multiply and accumulate counted separately) with
// cost_factor = bits_w*bits_a/64 when both operands are quantized to <= 8
// bits and 1 otherwise; the convention models a 64-lane bitwise unit doing
// 64 1x1-bit MACs per cycle-equivalent. Elementwise full-precision work
// (layer norm, softmax, GELU, residuals, pooling) is added at fixed
// per-element op counts. Ensemble totals scale by N; "parallel" echoes
// total/N, the throughput with members running concurrently.
// ---------------------------------------------------------------------------

struct CostItem {
    std::string name;
    int bits_w = 32;
    int bits_a = 32;
    double macs = 0.0;
    double flops = 0.0;
};

struct SizeItem {
    std::string name;
    int bits = 32;
    double params = 0.0;
    double bytes = 0.0;
};

struct CostReport {
    std::int64_t model_size_bytes = 0;  // ensemble total
    double flops = 0.0;                 // ensemble total, effective
    double flops_parallel = 0.0;        // total / N
    int ensemble_size = 1;
    int seq_len = 0;
    double member_size_bytes = 0.0;
    double member_flops = 0.0;
    std::vector<SizeItem> size_breakdown;   // single member
    std::vector<CostItem> flops_breakdown;  // single member
};

namespace detail {

inline double cost_factor(int bits_w, int bits_a) {
    if (bits_w <= 8 && bits_a <= 8) return static_cast<double>(bits_w) * static_cast<double>(bits_a) / 64.0;
    return 1.0;
}

}  // namespace detail

inline CostReport flops_model_size(const EncoderConfig& cfg, int ensemble_size, int seq_len) {
    const auto violations = cfg.validate();
    if (!violations.empty()) throw ConfigError("flops_model_size: invalid config: " + violations.front());
    if (ensemble_size < 1) throw ConfigError("flops_model_size: ensemble size must be >= 1");
    if (seq_len < 1 || seq_len > cfg.max_seq_len)
        throw ConfigError("flops_model_size: seq_len must be in [1, max_seq_len]");

    const double V = cfg.vocab_size, S = cfg.max_seq_len, H = cfg.hidden_dim;
    const double L = cfg.num_layers, F = cfg.ffn_dim, K = cfg.num_classes;
    const double s = seq_len;
    const int wbits = quant_bits(cfg.weights().kind);
    const int ebits = quant_bits(cfg.embeddings().kind);
    const int abits = cfg.activations().kind == QuantKind::uniform4 ? 4 : 32;
    const double bank = cfg.split_weights ? 2.0 : 1.0;  // parallel binary banks after TWS

    CostReport r;
    r.ensemble_size = ensemble_size;
    r.seq_len = seq_len;

    auto add_size = [&r](const std::string& name, int bits, double params) {
        SizeItem item{name, bits, params, params * bits / 8.0};
        r.size_breakdown.push_back(item);
    };
    add_size("embedding.word", ebits, bank * V * H);
    add_size("embedding.pos", 32, S * H);
    add_size("embedding.ln", 32, 2 * H);
    add_size("encoder.attn_weights", wbits, bank * L * 4 * H * H);
    add_size("encoder.ffn_weights", wbits, bank * L * 2 * H * F);
    add_size("encoder.biases", 32, L * (4 * H + F + H));
    add_size("encoder.layernorms", 32, L * 4 * H);
    add_size("classifier.head", 32, H * K + K);
    double quant_tensors = 0.0;
    if (ebits < 32) quant_tensors += bank;
    if (wbits < 32) quant_tensors += bank * L * 6;
    if (quant_tensors > 0) add_size("quantizer.scales", 32, quant_tensors);

    auto add_flops = [&r](const std::string& name, int bw, int ba, double macs) {
        CostItem item{name, bw, ba, macs, 2.0 * macs * detail::cost_factor(bw, ba)};
        r.flops_breakdown.push_back(item);
    };
    auto add_elementwise = [&r](const std::string& name, double flops) {
        CostItem item{name, 32, 32, 0.0, flops};
        r.flops_breakdown.push_back(item);
    };
    // Matmuls (per member, one sequence of length s).
    add_flops("attn.qkv_proj", wbits, abits, bank * L * 3 * s * H * H);
    add_flops("attn.out_proj", wbits, abits, bank * L * s * H * H);
    add_flops("attn.scores", abits, abits, L * s * s * H);
    add_flops("attn.context", abits, abits, L * s * s * H);
    add_flops("ffn", wbits, abits, bank * L * 2 * s * H * F);
    add_flops("classifier", 32, 32, H * K);
    // Full-precision elementwise work.
    add_elementwise("embedding.add_ln", s * H * (1 + 8));
    add_elementwise("encoder.layernorms", L * 2 * 8 * s * H);
    add_elementwise("encoder.residuals", L * 2 * s * H);
    add_elementwise("attn.softmax_scale_mask", L * (5.0 + 2.0) * s * s * static_cast<double>(cfg.num_heads));
    add_elementwise("ffn.gelu", L * 10 * s * F);
    add_elementwise("pooling", 2 * s * H);

    double member_bytes = 0.0;
    for (const auto& item : r.size_breakdown) member_bytes += item.bytes;
    double member_flops = 0.0;
    for (const auto& item : r.flops_breakdown) member_flops += item.flops;
    r.member_size_bytes = member_bytes;
    r.member_flops = member_flops;
    r.model_size_bytes = static_cast<std::int64_t>(std::llround(member_bytes * ensemble_size));
    r.flops = member_flops * ensemble_size;
    r.flops_parallel = r.flops / ensemble_size;
    return r;
}

// ---------------------------------------------------------------------------
// Report serialization: canonical JSON documents plus CSV for plotting.
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = nlohmann::json{{"accuracy", r.accuracy}, {"total", r.total}, {"confusion", r.confusion}};
    if (r.matthews) j["matthews"] = *r.matthews;
}

inline void to_json(nlohmann::json& j, const RobustnessReport& r) {
    j = nlohmann::json{{"per_round", r.per_round}, {"mean", r.mean},     {"stddev", r.stddev},
                       {"noise_variance", r.noise_variance}, {"rounds", r.rounds}, {"seed", r.seed}};
}

inline void to_json(nlohmann::json& j, const CostItem& c) {
    j = nlohmann::json{{"name", c.name}, {"bits_w", c.bits_w}, {"bits_a", c.bits_a}, {"macs", c.macs},
                       {"effective_flops", c.flops}};
}

inline void to_json(nlohmann::json& j, const SizeItem& s) {
    j = nlohmann::json{{"name", s.name}, {"bits", s.bits}, {"params", s.params}, {"bytes", s.bytes}};
}

inline void to_json(nlohmann::json& j, const CostReport& r) {
    j = nlohmann::json{{"model_size_bytes", r.model_size_bytes},
                       {"model_size_mb", static_cast<double>(r.model_size_bytes) / 1e6},
                       {"flops_total", r.flops},
                       {"flops_parallel", r.flops_parallel},
                       {"flops_notation", std::to_string(r.flops / 1e9) + "/" + std::to_string(r.ensemble_size)},
                       {"ensemble_size", r.ensemble_size},
                       {"seq_len", r.seq_len},
                       {"member_size_bytes", r.member_size_bytes},
                       {"member_flops", r.member_flops},
                       {"size_breakdown", r.size_breakdown},
                       {"flops_breakdown", r.flops_breakdown}};
}

inline std::string robustness_csv(const RobustnessReport& r) {
    std::string out = "round,accuracy\n";
    for (std::size_t i = 0; i < r.per_round.size(); ++i)
        out += std::to_string(i + 1) + "," + std::to_string(r.per_round[i]) + "\n";
    return out;
}

inline std::string cost_csv(const CostReport& r) {
    std::string out = "name,bits_w,bits_a,macs,effective_flops\n";
    for (const auto& c : r.flops_breakdown)
        out += c.name + "," + std::to_string(c.bits_w) + "," + std::to_string(c.bits_a) + "," +
               std::to_string(c.macs) + "," + std::to_string(c.flops) + "\n";
    return out;
}

}  // namespace binens
