#pragma once

// AdaBoost: the sample-weight ledger, per-round error/model weight, weight
// update, and the weighted-vote final hypothesis. The boosting loop is
// generic over the weak learner; the transformer pipeline instantiates it
// with checkpoint-producing student factories, the tests also instantiate it
// with decision stumps.
//
// Multiclass model weights follow SAMME: alpha = ln((1-e)/e) + ln(K-1) for
// K > 2; at K = 2 the conventional half-factor form alpha = 0.5 ln((1-e)/e)
// is used.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "binens/errors.hpp"
#include "binens/model.hpp"

namespace binens {

// The boosting distribution D over training examples. Kept in double so the
// normalization and reweighting identities hold to 1e-9.
struct SampleWeights {
    std::vector<double> weights;
    int round = 1;

    int size() const { return static_cast<int>(weights.size()); }
    double sum() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }
    void normalize() {
        const double s = sum();
        if (s <= 0.0) throw DegenerateTrainingError("sample weights sum to zero");
        for (double& w : weights) w /= s;
    }
};

inline SampleWeights init_sample_weights(int m) {
    if (m < 1) throw ConfigError("init_sample_weights: m must be >= 1");
    SampleWeights d;
    d.weights.assign(static_cast<std::size_t>(m), 1.0 / static_cast<double>(m));
    d.round = 1;
    return d;
}

inline double weighted_error(const std::vector<int>& predictions, const std::vector<int>& labels,
                             const SampleWeights& d) {
    if (predictions.size() != labels.size() || predictions.size() != d.weights.size())
        throw ShapeError("weighted_error: predictions/labels/weights lengths differ (" +
                         std::to_string(predictions.size()) + "/" + std::to_string(labels.size()) + "/" +
                         std::to_string(d.weights.size()) + ")");
    double e = 0.0;
    for (std::size_t j = 0; j < predictions.size(); ++j)
        if (predictions[j] != labels[j]) e += d.weights[j];
    return e;
}

constexpr double kErrorClamp = 1e-10;

inline double model_weight(double e, int K) {
    if (K < 2) throw ConfigError("model_weight: K must be >= 2");
    e = std::min(1.0 - kErrorClamp, std::max(kErrorClamp, e));
    if (K == 2) return 0.5 * std::log((1.0 - e) / e);
    return std::log((1.0 - e) / e) + std::log(static_cast<double>(K - 1));
}

// D'_j ~ D_j * exp(-alpha) when correct, D_j * exp(+alpha) when wrong,
// renormalized to sum 1.
inline SampleWeights update_sample_weights(const SampleWeights& d, double alpha,
                                           const std::vector<bool>& correct_mask) {
    if (correct_mask.size() != d.weights.size())
        throw ShapeError("update_sample_weights: mask length " + std::to_string(correct_mask.size()) +
                         " vs weights " + std::to_string(d.weights.size()));
    SampleWeights out = d;
    const double down = std::exp(-alpha), up = std::exp(alpha);
    for (std::size_t j = 0; j < out.weights.size(); ++j) out.weights[j] *= correct_mask[j] ? down : up;
    out.normalize();
    out.round = d.round + 1;
    return out;
}

struct RoundDiagnostics {
    int round = 0;          // 1-based member index this attempt was aimed at
    int attempt = 0;        // global attempt counter
    double error = 0.0;
    double alpha = 0.0;
    bool discarded = false;
    bool early_stop = false;
    double wall_seconds = 0.0;
};

template <class Learner>
struct BoostResult {
    std::vector<std::pair<Learner, double>> members;  // boosting order
    std::vector<RoundDiagnostics> rounds;
    int num_classes = 2;
};

// Algorithm: for i = 1..N train h_i under D_i, compute the weighted error e_i
// and weight alpha_i, reweight D_{i+1} toward the mistakes, and append
// (h_i, alpha_i). Rounds with e_i >= (K-1)/K are discarded: the member is
// dropped, D resets to uniform, and training continues with a reseeded
// attempt. A round with e_i <= clamp is a perfect learner: it receives the
// clamped maximum weight and boosting stops early.
//
// train_fn(attempt_index, D) -> Learner; predict_fn(learner) -> predictions
// over the full training set.
template <class TrainFn, class PredictFn>
auto adaboost_train(int m, const std::vector<int>& labels, int K, int N, TrainFn&& train_fn,
                    PredictFn&& predict_fn)
    -> BoostResult<std::decay_t<decltype(train_fn(0, std::declval<const SampleWeights&>()))>> {
    using Learner = std::decay_t<decltype(train_fn(0, std::declval<const SampleWeights&>()))>;
    if (N < 1) throw ConfigError("adaboost_train: N must be >= 1");
    if (m < 1 || static_cast<int>(labels.size()) != m)
        throw ConfigError("adaboost_train: bad training set size");
    if (K < 2) throw ConfigError("adaboost_train: K must be >= 2");

    BoostResult<Learner> result;
    result.num_classes = K;
    SampleWeights d = init_sample_weights(m);
    const double reject_threshold = static_cast<double>(K - 1) / static_cast<double>(K);
    const int max_attempts = 2 * N + 3;
    int attempt = 0;
    while (static_cast<int>(result.members.size()) < N && attempt < max_attempts) {
        ++attempt;
        const auto t0 = std::chrono::steady_clock::now();
        Learner h = train_fn(attempt, d);
        std::vector<int> preds = predict_fn(h);
        if (static_cast<int>(preds.size()) != m)
            throw InternalError("adaboost_train: predictor returned " + std::to_string(preds.size()) +
                                " predictions for " + std::to_string(m) + " examples");
        const double e = weighted_error(preds, labels, d);
        RoundDiagnostics diag;
        diag.round = static_cast<int>(result.members.size()) + 1;
        diag.attempt = attempt;
        diag.error = e;
        diag.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (e >= reject_threshold) {
            diag.discarded = true;
            diag.alpha = 0.0;
            result.rounds.push_back(diag);
            d = init_sample_weights(m);
            d.round = attempt + 1;
            continue;
        }
        const double alpha = model_weight(e, K);
        diag.alpha = alpha;
        if (e <= kErrorClamp) {
            diag.early_stop = true;
            result.rounds.push_back(diag);
            result.members.emplace_back(std::move(h), alpha);
            break;
        }
        result.rounds.push_back(diag);
        std::vector<bool> correct(static_cast<std::size_t>(m));
        for (int j = 0; j < m; ++j) correct[static_cast<std::size_t>(j)] = preds[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(j)];
        d = update_sample_weights(d, alpha, correct);
        result.members.emplace_back(std::move(h), alpha);
    }
    if (result.members.empty())
        throw DegenerateTrainingError("adaboost_train: every attempt was degenerate (error >= (K-1)/K); " +
                                      std::to_string(attempt) + " attempts made");
    return result;
}

// score(x, k) = sum_i alpha_i * [argmax h_i(x) = k]; prediction = argmax_k,
// ties toward the lowest class index.
inline std::pair<std::vector<int>, std::vector<std::vector<double>>> weighted_vote(
    const std::vector<std::vector<int>>& member_predictions, const std::vector<double>& alphas, int K) {
    if (member_predictions.size() != alphas.size())
        throw ShapeError("weighted_vote: " + std::to_string(member_predictions.size()) + " prediction vectors vs " +
                         std::to_string(alphas.size()) + " alphas");
    if (member_predictions.empty()) throw ConfigError("weighted_vote: no members");
    const std::size_t m = member_predictions[0].size();
    std::vector<std::vector<double>> scores(m, std::vector<double>(static_cast<std::size_t>(K), 0.0));
    for (std::size_t i = 0; i < member_predictions.size(); ++i) {
        if (member_predictions[i].size() != m) throw ShapeError("weighted_vote: prediction lengths differ");
        for (std::size_t j = 0; j < m; ++j) {
            const int c = member_predictions[i][j];
            if (c < 0 || c >= K) throw DataError("weighted_vote: prediction out of class range");
            scores[j][static_cast<std::size_t>(c)] += alphas[i];
        }
    }
    std::vector<int> preds(m, 0);
    for (std::size_t j = 0; j < m; ++j) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (scores[j][static_cast<std::size_t>(k)] > scores[j][static_cast<std::size_t>(best)]) best = k;
        preds[j] = best;
    }
    return {std::move(preds), std::move(scores)};
}

// ---------------------------------------------------------------------------
// The checkpoint-backed ensemble and its manifest.
// ---------------------------------------------------------------------------

struct EnsembleModel {
    struct Member {
        Checkpoint checkpoint;
        double alpha = 0.0;
    };
    std::vector<Member> members;
    int num_classes = 2;
    std::vector<RoundDiagnostics> rounds;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
    const int rows = logits.dim(0), cols = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(rows), 0);
    for (int r = 0; r < rows; ++r) {
        int best = 0;
        for (int c = 1; c < cols; ++c)
            if (logits[static_cast<std::size_t>(r * cols + c)] > logits[static_cast<std::size_t>(r * cols + best)])
                best = c;
        out[static_cast<std::size_t>(r)] = best;
    }
    return out;
}

inline std::pair<std::vector<int>, std::vector<std::vector<double>>> ensemble_predict(const EnsembleModel& ensemble,
                                                                                      const TokenBatch& batch) {
    if (ensemble.members.empty()) throw ConfigError("ensemble_predict: ensemble has no members");
    std::vector<std::vector<int>> member_preds;
    std::vector<double> alphas;
    member_preds.reserve(ensemble.members.size());
    for (const auto& member : ensemble.members) {
        auto model = model_from_checkpoint(member.checkpoint);
        member_preds.push_back(argmax_rows(model.forward(batch).logits));
        alphas.push_back(member.alpha);
    }
    return weighted_vote(member_preds, alphas, ensemble.num_classes);
}

inline void to_json(nlohmann::json& j, const RoundDiagnostics& r) {
    j = nlohmann::json{{"round", r.round},           {"attempt", r.attempt},
                       {"error", r.error},           {"alpha", r.alpha},
                       {"discarded", r.discarded},   {"early_stop", r.early_stop},
                       {"wall_seconds", r.wall_seconds}};
}
inline void from_json(const nlohmann::json& j, RoundDiagnostics& r) {
    r.round = j.value("round", 0);
    r.attempt = j.value("attempt", 0);
    r.error = j.value("error", 0.0);
    r.alpha = j.value("alpha", 0.0);
    r.discarded = j.value("discarded", false);
    r.early_stop = j.value("early_stop", false);
    r.wall_seconds = j.value("wall_seconds", 0.0);
}

// Writes member checkpoints plus a manifest (member paths, alphas, K, and
// per-round diagnostics) under dir; returns the manifest path.
inline std::string save_ensemble(const EnsembleModel& ensemble, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["num_classes"] = ensemble.num_classes;
    j["members"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        const std::string name = "member_" + std::to_string(i) + ".ckpt";
        save_checkpoint(ensemble.members[i].checkpoint, (fs::path(dir) / name).string());
        j["members"].push_back({{"checkpoint", name}, {"alpha", ensemble.members[i].alpha}});
    }
    j["rounds"] = ensemble.rounds;
    const std::string manifest_path = (fs::path(dir) / "ensemble.json").string();
    const std::string tmp = manifest_path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("save_ensemble: cannot write " + tmp);
        out << j.dump(2) << "\n";
    }
    fs::rename(tmp, manifest_path);
    return manifest_path;
}

inline EnsembleModel load_ensemble(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw DataError("load_ensemble: cannot open " + manifest_path);
    nlohmann::json j = nlohmann::json::parse(in);
    EnsembleModel e;
    e.num_classes = j.at("num_classes").get<int>();
    const fs::path dir = fs::path(manifest_path).parent_path();
    for (const auto& m : j.at("members")) {
        EnsembleModel::Member member;
        member.checkpoint = load_checkpoint((dir / m.at("checkpoint").get<std::string>()).string());
        member.alpha = m.at("alpha").get<double>();
        e.members.push_back(std::move(member));
    }
    if (j.contains("rounds"))
        for (const auto& r : j.at("rounds")) e.rounds.push_back(r.get<RoundDiagnostics>());
    return e;
}

}  // namespace binens
