#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "binens/ensemble.hpp"
#include "binens/rng.hpp"

using namespace binens;

namespace {

TEST(SampleWeightsOps, UniformInit) {
    auto d = init_sample_weights(4);
    for (double w : d.weights) EXPECT_DOUBLE_EQ(w, 0.25);
    EXPECT_EQ(d.round, 1);
    auto one = init_sample_weights(1);
    EXPECT_DOUBLE_EQ(one.weights[0], 1.0);
    EXPECT_THROW(init_sample_weights(0), ConfigError);
}

TEST(SampleWeightsOps, SumsToOneForRandomM) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        const int m = 1 + static_cast<int>(rng.uniform_int(5000));
        auto d = init_sample_weights(m);
        EXPECT_NEAR(d.sum(), 1.0, 1e-9);
    }
}

TEST(WeightedError, Basics) {
    auto d = init_sample_weights(4);
    std::vector<int> labels{0, 1, 0, 1};
    EXPECT_DOUBLE_EQ(weighted_error(labels, labels, d), 0.0);
    std::vector<int> one_wrong{0, 1, 0, 0};
    EXPECT_DOUBLE_EQ(weighted_error(one_wrong, labels, d), 0.25);
    std::vector<int> short_preds{0, 1};
    EXPECT_THROW(weighted_error(short_preds, labels, d), ShapeError);
}

TEST(WeightedError, MatchesExplicitLoop) {
    Rng rng(17);
    const int m = 500;
    SampleWeights d;
    d.weights.resize(m);
    double sum = 0;
    for (auto& w : d.weights) {
        w = rng.uniform();
        sum += w;
    }
    for (auto& w : d.weights) w /= sum;
    std::vector<int> preds(m), labels(m);
    for (int i = 0; i < m; ++i) {
        preds[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(3));
        labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(3));
    }
    double expected = 0;
    for (int i = 0; i < m; ++i)
        if (preds[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(i)])
            expected += d.weights[static_cast<std::size_t>(i)];
    EXPECT_DOUBLE_EQ(weighted_error(preds, labels, d), expected);
}

TEST(ModelWeight, ClosedForms) {
    EXPECT_DOUBLE_EQ(model_weight(0.5, 2), 0.0);
    EXPECT_NEAR(model_weight(0.25, 2), 0.5 * std::log(3.0), 1e-12);
    EXPECT_NEAR(model_weight(0.25, 3), std::log(3.0) + std::log(2.0), 1e-12);
    // Clamping keeps alpha finite at the extremes.
    EXPECT_TRUE(std::isfinite(model_weight(0.0, 2)));
    EXPECT_TRUE(std::isfinite(model_weight(1.0, 2)));
}

TEST(UpdateWeights, HandComputedCase) {
    // m=4 uniform, one wrong, alpha = 0.5 ln 3: unnormalized weights are
    // {0.25/sqrt(3) x3, 0.25 sqrt(3)}, Z = sqrt(3)/2.
    auto d = init_sample_weights(4);
    const double alpha = 0.5 * std::log(3.0);
    std::vector<bool> correct{true, true, true, false};
    auto d2 = update_sample_weights(d, alpha, correct);
    EXPECT_NEAR(d2.weights[0], 1.0 / 6.0, 1e-12);
    EXPECT_NEAR(d2.weights[1], 1.0 / 6.0, 1e-12);
    EXPECT_NEAR(d2.weights[2], 1.0 / 6.0, 1e-12);
    EXPECT_NEAR(d2.weights[3], 0.5, 1e-12);
    EXPECT_EQ(d2.round, 2);
}

TEST(UpdateWeights, ZeroAlphaIsIdentity) {
    Rng rng(5);
    SampleWeights d = init_sample_weights(10);
    std::vector<bool> correct(10);
    for (std::size_t i = 0; i < 10; ++i) correct[i] = rng.uniform() < 0.5;
    auto d2 = update_sample_weights(d, 0.0, correct);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(d2.weights[i], d.weights[i], 1e-15);
}

// With the exact binary alpha, the post-update misclassified mass is 1/2.
TEST(UpdateWeights, BinaryReweightIdentity) {
    Rng rng(88);
    for (int trial = 0; trial < 1000; ++trial) {
        const int m = 2 + static_cast<int>(rng.uniform_int(200));
        SampleWeights d;
        d.weights.resize(static_cast<std::size_t>(m));
        double sum = 0;
        for (auto& w : d.weights) {
            w = rng.uniform() + 1e-3;
            sum += w;
        }
        for (auto& w : d.weights) w /= sum;
        std::vector<bool> correct(static_cast<std::size_t>(m));
        bool any_wrong = false, any_right = false;
        for (auto&& c : correct) {
            const bool v = rng.uniform() < 0.7;
            c = v;
            any_wrong |= !v;
            any_right |= v;
        }
        if (!any_wrong || !any_right) continue;  // identity undefined at e in {0,1}
        double e = 0;
        for (int j = 0; j < m; ++j)
            if (!correct[static_cast<std::size_t>(j)]) e += d.weights[static_cast<std::size_t>(j)];
        const double alpha = model_weight(e, 2);
        auto d2 = update_sample_weights(d, alpha, correct);
        ASSERT_NEAR(d2.sum(), 1.0, 1e-9);
        double wrong_mass = 0;
        for (int j = 0; j < m; ++j)
            if (!correct[static_cast<std::size_t>(j)]) wrong_mass += d2.weights[static_cast<std::size_t>(j)];
        ASSERT_NEAR(wrong_mass, 0.5, 1e-9) << "trial " << trial;
        for (double w : d2.weights) ASSERT_GE(w, 0.0);
    }
}

TEST(WeightedVote, SingleMemberIsArgmax) {
    std::vector<std::vector<int>> preds{{0, 1, 2, 1}};
    auto [labels, scores] = weighted_vote(preds, {0.7}, 3);
    EXPECT_EQ(labels, (std::vector<int>{0, 1, 2, 1}));
    EXPECT_DOUBLE_EQ(scores[0][0], 0.7);
}

TEST(WeightedVote, DisagreementGoesToLargerAlpha) {
    std::vector<std::vector<int>> preds{{0}, {1}};
    auto [labels, scores] = weighted_vote(preds, {0.6, 0.4}, 2);
    EXPECT_EQ(labels[0], 0);
    auto [labels2, scores2] = weighted_vote(preds, {0.4, 0.6}, 2);
    EXPECT_EQ(labels2[0], 1);
}

TEST(WeightedVote, TieBreaksTowardLowestClass) {
    std::vector<std::vector<int>> preds{{2}, {1}};
    auto [labels, scores] = weighted_vote(preds, {0.5, 0.5}, 3);
    EXPECT_EQ(labels[0], 1);
}

TEST(WeightedVote, MatchesBruteForceLoop) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const int n_members = 1 + static_cast<int>(rng.uniform_int(6));
        const int m = 1 + static_cast<int>(rng.uniform_int(40));
        const int K = 2 + static_cast<int>(rng.uniform_int(4));
        std::vector<std::vector<int>> preds(static_cast<std::size_t>(n_members));
        std::vector<double> alphas(static_cast<std::size_t>(n_members));
        for (int i = 0; i < n_members; ++i) {
            alphas[static_cast<std::size_t>(i)] = rng.uniform(0.0, 2.0);
            preds[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(m));
            for (auto& p : preds[static_cast<std::size_t>(i)])
                p = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(K)));
        }
        auto [labels, scores] = weighted_vote(preds, alphas, K);
        for (int j = 0; j < m; ++j) {
            std::vector<double> score(static_cast<std::size_t>(K), 0.0);
            for (int i = 0; i < n_members; ++i)
                score[static_cast<std::size_t>(preds[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])] +=
                    alphas[static_cast<std::size_t>(i)];
            int best = 0;
            for (int k = 1; k < K; ++k)
                if (score[static_cast<std::size_t>(k)] > score[static_cast<std::size_t>(best)]) best = k;
            ASSERT_EQ(labels[static_cast<std::size_t>(j)], best);
            for (int k = 0; k < K; ++k)
                ASSERT_DOUBLE_EQ(scores[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)],
                                 score[static_cast<std::size_t>(k)]);
        }
    }
}

TEST(WeightedVote, AlphaRescalingInvariance) {
    Rng rng(10);
    const int m = 64, K = 3;
    std::vector<std::vector<int>> preds(4, std::vector<int>(m));
    std::vector<double> alphas{0.3, 0.9, 0.1, 0.55};
    for (auto& row : preds)
        for (auto& p : row) p = static_cast<int>(rng.uniform_int(K));
    auto base = weighted_vote(preds, alphas, K).first;
    for (double c : {0.1, 2.0, 17.5}) {
        auto scaled_alphas = alphas;
        for (auto& a : scaled_alphas) a *= c;
        EXPECT_EQ(weighted_vote(preds, scaled_alphas, K).first, base);
    }
}

TEST(WeightedVote, ZeroAlphaMemberNeverChangesPredictions) {
    Rng rng(11);
    const int m = 128, K = 4;
    std::vector<std::vector<int>> preds(3, std::vector<int>(m));
    std::vector<double> alphas{0.8, 0.5, 0.2};
    for (auto& row : preds)
        for (auto& p : row) p = static_cast<int>(rng.uniform_int(K));
    auto base = weighted_vote(preds, alphas, K).first;
    std::vector<int> extra(m);
    for (auto& p : extra) p = static_cast<int>(rng.uniform_int(K));
    auto preds2 = preds;
    preds2.push_back(extra);
    auto alphas2 = alphas;
    alphas2.push_back(0.0);
    EXPECT_EQ(weighted_vote(preds2, alphas2, K).first, base);
}

// --- decision-stump boosting oracle ---------------------------------------

struct Point {
    double x, y;
    int label;
};

struct Stump {
    int axis = 0;          // 0: x, 1: y
    double threshold = 0;
    int hi_class = 1;      // predicted class when coordinate > threshold

    int predict(const Point& p) const {
        const double v = axis == 0 ? p.x : p.y;
        return v > threshold ? hi_class : 1 - hi_class;
    }
};

Stump best_stump(const std::vector<Point>& data, const SampleWeights& d) {
    Stump best;
    double best_err = std::numeric_limits<double>::infinity();
    for (int axis = 0; axis < 2; ++axis) {
        std::vector<double> coords;
        coords.reserve(data.size());
        for (const auto& p : data) coords.push_back(axis == 0 ? p.x : p.y);
        std::sort(coords.begin(), coords.end());
        coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        std::vector<double> thresholds;
        thresholds.push_back(coords.front() - 1.0);
        for (std::size_t i = 0; i + 1 < coords.size(); ++i) thresholds.push_back(0.5 * (coords[i] + coords[i + 1]));
        for (double t : thresholds) {
            for (int hi : {0, 1}) {
                Stump s{axis, t, hi};
                double err = 0;
                for (std::size_t j = 0; j < data.size(); ++j)
                    if (s.predict(data[j]) != data[j].label) err += d.weights[j];
                if (err < best_err) {
                    best_err = err;
                    best = s;
                }
            }
        }
    }
    return best;
}

// XOR rotated 45 degrees: east/west clusters labeled 1, north/south labeled
// 0. No single axis threshold separates it, yet boosted stumps carve the
// bands and drive the training error to zero.
std::vector<Point> xor_like_dataset(int n, std::uint64_t seed) {
    Rng rng(seed);
    const double px[] = {1.0, -1.0, 0.0, 0.0};
    const double py[] = {0.0, 0.0, 1.0, -1.0};
    const int labels[] = {1, 1, 0, 0};
    const double mass[] = {0.3, 0.2, 0.3, 0.2};
    std::vector<Point> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        int c = 0;
        double acc = 0;
        for (int k = 0; k < 4; ++k) {
            acc += mass[k];
            if (u < acc) {
                c = k;
                break;
            }
        }
        out.push_back({px[c] + rng.uniform(-0.35, 0.35), py[c] + rng.uniform(-0.35, 0.35), labels[c]});
    }
    return out;
}

TEST(AdaBoostStumps, EnsembleBeatsBestSingleStump) {
    const auto data = xor_like_dataset(400, 2024);
    const int m = static_cast<int>(data.size());
    std::vector<int> labels;
    for (const auto& p : data) labels.push_back(p.label);

    const auto single = best_stump(data, init_sample_weights(m));
    double single_err = 0;
    for (const auto& p : data)
        if (single.predict(p) != p.label) single_err += 1.0;
    single_err /= m;
    ASSERT_LT(single_err, 0.5);
    ASSERT_GT(single_err, 0.05);

    auto train_fn = [&](int, const SampleWeights& d) { return best_stump(data, d); };
    auto predict_fn = [&](const Stump& s) {
        std::vector<int> preds;
        preds.reserve(data.size());
        for (const auto& p : data) preds.push_back(s.predict(p));
        return preds;
    };
    auto result = adaboost_train(m, labels, 2, 10, train_fn, predict_fn);
    ASSERT_GE(result.members.size(), 3u);

    std::vector<double> running_errors;
    double bound = 1.0;
    for (std::size_t upto = 1; upto <= result.members.size(); ++upto) {
        std::vector<std::vector<int>> preds;
        std::vector<double> alphas;
        for (std::size_t i = 0; i < upto; ++i) {
            preds.push_back(predict_fn(result.members[i].first));
            alphas.push_back(result.members[i].second);
        }
        auto vote = weighted_vote(preds, alphas, 2).first;
        double err = 0;
        for (int j = 0; j < m; ++j)
            if (vote[static_cast<std::size_t>(j)] != labels[static_cast<std::size_t>(j)]) err += 1.0;
        running_errors.push_back(err / m);
        // AdaBoost training-error bound: err_t <= prod_i 2 sqrt(e_i (1-e_i)).
        const double e = result.rounds[upto - 1].error;
        bound *= 2.0 * std::sqrt(e * (1.0 - e));
        EXPECT_LE(running_errors.back(), bound + 1e-12) << "round " << upto;
    }
    // Strict improvement over the best single stump.
    EXPECT_LT(running_errors.back(), single_err);
    // Non-increasing once the vote is non-degenerate (a 2-member weighted
    // argmax vote is pointwise the heavier member, so start at 2).
    for (std::size_t t = 2; t < running_errors.size(); ++t)
        EXPECT_LE(running_errors[t], running_errors[t - 1] + 1e-12) << "round " << t + 1;
    for (const auto& r : result.rounds) {
        EXPECT_LT(r.error, 0.5);
        EXPECT_GT(r.alpha, 0.0);
    }
}

TEST(AdaBoostStumps, WeightsStayNormalizedThroughRounds) {
    const auto data = xor_like_dataset(200, 77);
    const int m = static_cast<int>(data.size());
    std::vector<int> labels;
    for (const auto& p : data) labels.push_back(p.label);
    SampleWeights d = init_sample_weights(m);
    for (int round = 0; round < 12; ++round) {
        auto s = best_stump(data, d);
        std::vector<bool> correct(static_cast<std::size_t>(m));
        for (int j = 0; j < m; ++j) correct[static_cast<std::size_t>(j)] = s.predict(data[static_cast<std::size_t>(j)]) == labels[static_cast<std::size_t>(j)];
        double e = 0;
        for (int j = 0; j < m; ++j)
            if (!correct[static_cast<std::size_t>(j)]) e += d.weights[static_cast<std::size_t>(j)];
        if (e <= kErrorClamp || e >= 0.5) break;
        d = update_sample_weights(d, model_weight(e, 2), correct);
        ASSERT_NEAR(d.sum(), 1.0, 1e-9);
        for (double w : d.weights) ASSERT_GE(w, 0.0);
    }
}

TEST(AdaBoost, RejectsBadArguments) {
    std::vector<int> labels{0, 1};
    auto train_fn = [](int, const SampleWeights&) { return 0; };
    auto predict_fn = [&](const int&) { return std::vector<int>{0, 1}; };
    EXPECT_THROW(adaboost_train(2, labels, 2, 0, train_fn, predict_fn), ConfigError);
    EXPECT_THROW(adaboost_train(3, labels, 2, 1, train_fn, predict_fn), ConfigError);
}

TEST(AdaBoost, AllDegenerateRaises) {
    // A learner that always predicts class 0 on perfectly balanced labels has
    // error exactly 0.5 under the uniform and reset distributions.
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) labels.push_back(i % 2);
    auto train_fn = [](int, const SampleWeights&) { return 0; };
    auto predict_fn = [&](const int&) { return std::vector<int>(10, 0); };
    EXPECT_THROW(adaboost_train(10, labels, 2, 3, train_fn, predict_fn), DegenerateTrainingError);
}

TEST(AdaBoost, PerfectLearnerStopsEarlyWithClampedAlpha) {
    std::vector<int> labels{0, 1, 0, 1, 1, 0};
    auto train_fn = [&](int, const SampleWeights&) { return 1; };
    auto predict_fn = [&](const int&) { return labels; };
    auto result = adaboost_train(6, labels, 2, 5, train_fn, predict_fn);
    ASSERT_EQ(result.members.size(), 1u);
    EXPECT_TRUE(result.rounds.front().early_stop);
    EXPECT_NEAR(result.members.front().second, model_weight(kErrorClamp, 2), 1e-12);
}

}  // namespace
