#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "binens/manifest.hpp"
#include "binens/model.hpp"
#include "binens/pipeline.hpp"
#include "binens/rng.hpp"

using namespace binens;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.vocab_size = 64;
    c.max_seq_len = 8;
    c.hidden_dim = 16;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 24;
    c.num_classes = 3;
    c.seed = 9;
    return c;
}

TokenBatch toy_batch(int batch, int seq, int vocab, std::uint64_t seed, int pad_from = -1) {
    Rng rng(seed);
    TokenBatch b;
    b.batch = batch;
    b.seq = seq;
    b.ids.resize(static_cast<std::size_t>(batch * seq));
    b.mask.assign(b.ids.size(), 1);
    for (int i = 0; i < batch; ++i)
        for (int j = 0; j < seq; ++j) {
            auto& id = b.ids[static_cast<std::size_t>(i * seq + j)];
            auto& m = b.mask[static_cast<std::size_t>(i * seq + j)];
            if (pad_from >= 0 && j >= pad_from) {
                id = kPadToken;
                m = 0;
            } else {
                id = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(vocab - 1)));
            }
        }
    return b;
}

// Closed-form parameter count for an unsplit model.
std::size_t expected_param_count(const EncoderConfig& c) {
    const std::size_t V = c.vocab_size, S = c.max_seq_len, H = c.hidden_dim;
    const std::size_t L = c.num_layers, F = c.ffn_dim, K = c.num_classes;
    const std::size_t embeddings = V * H + S * H + 2 * H;
    const std::size_t per_layer = 4 * (H * H + H) + (H * F + F) + (F * H + H) + 2 * (2 * H);
    const std::size_t head = H * K + K;
    return embeddings + L * per_layer + head;
}

TEST(BuildEncoder, DeterministicForFixedSeed) {
    auto cfg = small_config();
    auto m1 = build_encoder<float>(cfg);
    auto m2 = build_encoder<float>(cfg);
    auto p1 = m1.named_parameters();
    auto p2 = m2.named_parameters();
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        ASSERT_EQ(p1[i].first, p2[i].first);
        for (std::size_t k = 0; k < p1[i].second.numel(); ++k)
            ASSERT_EQ(p1[i].second[k], p2[i].second[k]) << p1[i].first;
    }
}

TEST(BuildEncoder, ParameterCountMatchesClosedForm) {
    EncoderConfig c;
    c.vocab_size = 256;
    c.max_seq_len = 16;
    c.hidden_dim = 64;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_dim = 256;
    c.num_classes = 2;
    auto m = build_encoder<float>(c);
    EXPECT_EQ(m.parameter_count(), expected_param_count(c));
}

TEST(BuildEncoder, HalfSizeHasUnderThirtyPercentLayerParams) {
    EncoderConfig full;
    full.hidden_dim = 64;
    full.ffn_dim = 256;
    full.num_layers = 2;
    full.num_heads = 2;
    EncoderConfig half = full;
    half.hidden_dim = 32;
    half.ffn_dim = 128;
    auto layer_params = [](const EncoderConfig& c) {
        const std::size_t H = c.hidden_dim, F = c.ffn_dim;
        return c.num_layers * (4 * (H * H + H) + H * F + F + F * H + H + 4 * H);
    };
    EXPECT_LT(static_cast<double>(layer_params(half)), 0.30 * static_cast<double>(layer_params(full)));
    // And the built models agree with the closed form.
    auto mf = build_encoder<float>(full);
    auto mh = build_encoder<float>(half);
    EXPECT_EQ(mf.parameter_count(), expected_param_count(full));
    EXPECT_EQ(mh.parameter_count(), expected_param_count(half));
}

TEST(BuildEncoder, InvalidConfigListsViolations) {
    EncoderConfig c = small_config();
    c.hidden_dim = 15;  // not divisible by heads
    c.num_classes = 1;
    try {
        build_encoder<float>(c);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("divisible"), std::string::npos);
        EXPECT_NE(msg.find("num_classes"), std::string::npos);
    }
}

TEST(Forward, SingleTokenAttentionIsOne) {
    EncoderConfig c = small_config();
    c.num_layers = 1;
    c.max_seq_len = 1;
    auto m = build_encoder<float>(c);
    TokenBatch b;
    b.batch = 1;
    b.seq = 1;
    b.ids = {5};
    b.mask = {1};
    auto trace = m.forward(b);
    ASSERT_EQ(trace.attentions.size(), 1u);
    EXPECT_FLOAT_EQ(trace.attentions[0][0], 1.0f);
    for (std::size_t i = 0; i < trace.logits.numel(); ++i) EXPECT_TRUE(std::isfinite(trace.logits[i]));
}

TEST(Forward, TraceShapesAndAttentionRowSums) {
    auto cfg = small_config();
    auto m = build_encoder<float>(cfg);
    auto b = toy_batch(3, 8, cfg.vocab_size, 77, 6);
    auto trace = m.forward(b);
    ASSERT_EQ(trace.hidden_states.size(), static_cast<std::size_t>(cfg.num_layers) + 1);
    ASSERT_EQ(trace.attentions.size(), static_cast<std::size_t>(cfg.num_layers));
    EXPECT_EQ(trace.logits.shape(), (Shape{3, cfg.num_classes}));
    for (const auto& h : trace.hidden_states) EXPECT_EQ(h.shape(), (Shape{3, 8, cfg.hidden_dim}));
    for (const auto& a : trace.attentions) {
        EXPECT_EQ(a.shape(), (Shape{3, cfg.num_heads, 8, 8}));
        const int rows = 3 * cfg.num_heads * 8;
        for (int r = 0; r < rows; ++r) {
            double s = 0;
            for (int cidx = 0; cidx < 8; ++cidx) s += a[static_cast<std::size_t>(r * 8 + cidx)];
            ASSERT_NEAR(s, 1.0, 1e-5);
        }
    }
}

TEST(Forward, BinaryConfigWeightsHaveTwoValues) {
    auto cfg = small_config();
    cfg.quant["weights"] = QuantSpec{QuantKind::binary, 1.0f};
    cfg.quant["embeddings"] = QuantSpec{QuantKind::binary, 1.0f};
    cfg.quant["activations"] = QuantSpec{QuantKind::uniform4, 1.0f};
    auto m = build_encoder<float>(cfg);
    for (const auto& layer : m.layers) {
        for (const auto* lin : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.ffn1, &layer.ffn2}) {
            auto q = lin->weight.w.quantized_values();
            std::set<float> vals(q.data().begin(), q.data().end());
            EXPECT_EQ(vals.size(), 2u);
        }
    }
}

TEST(Forward, PaddingInvariance) {
    auto cfg = small_config();
    auto m = build_encoder<float>(cfg);
    auto b_short = toy_batch(2, 8, cfg.vocab_size, 123, 5);  // positions 5.. padded
    auto trace1 = m.forward(b_short);
    // Same content, but mask out the tail even harder: identical ids/mask
    // means identical logits; now extend padding by re-tokenizing with more
    // explicit pad tokens (same real prefix).
    TokenBatch b2 = b_short;
    auto trace2 = m.forward(b2);
    for (std::size_t i = 0; i < trace1.logits.numel(); ++i)
        EXPECT_FLOAT_EQ(trace1.logits[i], trace2.logits[i]);

    // Shorter sequence vs the same tokens with appended fully-masked pads.
    EncoderConfig c5 = cfg;
    c5.max_seq_len = 5;
    auto m5 = build_encoder<float>(c5);
    TokenBatch five;
    five.batch = 2;
    five.seq = 5;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 5; ++j) {
            five.ids.push_back(b_short.ids[static_cast<std::size_t>(i * 8 + j)]);
            five.mask.push_back(1);
        }
    // Copy the 5-seq model's parameters from the 8-seq model is not possible
    // (position table sizes differ), so instead compare the 8-seq model on
    // (5 real + 3 pad) against itself with the pad tokens' ids changed:
    // masked positions must not influence the logits.
    TokenBatch altered = b_short;
    for (int i = 0; i < 2; ++i)
        for (int j = 5; j < 8; ++j)
            altered.ids[static_cast<std::size_t>(i * 8 + j)] = 7;  // arbitrary ids under zero mask
    auto trace3 = m.forward(altered);
    for (std::size_t i = 0; i < trace1.logits.numel(); ++i)
        EXPECT_NEAR(trace1.logits[i], trace3.logits[i], 1e-5f);
}

TEST(Forward, OutOfRangeTokenNamesPosition) {
    auto cfg = small_config();
    auto m = build_encoder<float>(cfg);
    auto b = toy_batch(2, 8, cfg.vocab_size, 5);
    b.ids[11] = cfg.vocab_size + 3;
    try {
        m.forward(b);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("row 1"), std::string::npos);
        EXPECT_NE(msg.find("position 3"), std::string::npos);
    }
}

TEST(NoiseInjection, ZeroVarianceIsBitIdentical) {
    auto cfg = small_config();
    auto m = build_encoder<float>(cfg);
    auto b = toy_batch(2, 8, cfg.vocab_size, 5);
    Rng rng(1);
    auto clean = m.forward(b);
    auto noisy = m.noise_injected_forward(b, 0.0, rng);
    for (std::size_t i = 0; i < clean.logits.numel(); ++i) EXPECT_EQ(clean.logits[i], noisy.logits[i]);
}

TEST(NoiseInjection, SeededDeterminism) {
    auto cfg = small_config();
    auto m = build_encoder<float>(cfg);
    auto b = toy_batch(2, 8, cfg.vocab_size, 5);
    Rng r1(33), r2(33);
    auto t1 = m.noise_injected_forward(b, 0.01, r1);
    auto t2 = m.noise_injected_forward(b, 0.01, r2);
    for (std::size_t i = 0; i < t1.logits.numel(); ++i) EXPECT_EQ(t1.logits[i], t2.logits[i]);
    EXPECT_THROW(m.noise_injected_forward(b, -0.1, r1), ConfigError);
}

TEST(NoiseInjection, EmpiricalVarianceMatches) {
    Rng rng(2024);
    const int n = 10000;
    double sum = 0, sum2 = 0;
    const double stddev = std::sqrt(0.01);
    for (int i = 0; i < n; ++i) {
        const double v = rng.gaussian(0.0, stddev);
        sum += v;
        sum2 += v * v;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    EXPECT_NEAR(var, 0.01, 0.0005);  // within 5%
}

TEST(Checkpoint, RoundTripIsIdentity) {
    namespace fs = std::filesystem;
    auto cfg = small_config();
    cfg.quant["weights"] = QuantSpec{QuantKind::ternary, 1.0f};
    cfg.quant["activations"] = QuantSpec{QuantKind::uniform4, 1.0f};
    auto m = build_encoder<float>(cfg);
    auto ck = checkpoint_from_model(m);
    const auto path = fs::temp_directory_path() / "binens_ckpt_test.ckpt";
    save_checkpoint(ck, path.string());
    auto loaded = load_checkpoint(path.string());
    EXPECT_EQ(loaded.format_version, ck.format_version);
    EXPECT_TRUE(loaded.config == ck.config);
    ASSERT_EQ(loaded.tensors.size(), ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        EXPECT_EQ(loaded.tensors[i].first, ck.tensors[i].first);
        ASSERT_EQ(loaded.tensors[i].second.shape(), ck.tensors[i].second.shape());
        for (std::size_t k = 0; k < ck.tensors[i].second.numel(); ++k)
            ASSERT_EQ(loaded.tensors[i].second[k], ck.tensors[i].second[k]) << ck.tensors[i].first;
    }
    // Logits identical through the round trip.
    auto m2 = model_from_checkpoint(loaded);
    auto b = toy_batch(2, 8, cfg.vocab_size, 5);
    auto l1 = m.forward(b).logits;
    auto l2 = m2.forward(b).logits;
    for (std::size_t i = 0; i < l1.numel(); ++i) EXPECT_EQ(l1[i], l2[i]);
    // Byte-level determinism of the save itself.
    const auto path2 = fs::temp_directory_path() / "binens_ckpt_test2.ckpt";
    save_checkpoint(ck, path2.string());
    EXPECT_EQ(file_hash(path.string()), file_hash(path2.string()));
    fs::remove(path);
    fs::remove(path2);
}

// Full-precision model gradients vs central differences on a 2-token batch
// (double instantiation of the same templated forward).
TEST(ModelGradCheck, TwoTokenBatch) {
    EncoderConfig cfg;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 2;
    cfg.hidden_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_dim = 12;
    cfg.num_classes = 2;
    cfg.seed = 4;
    auto m = build_encoder<double>(cfg);
    TokenBatch b;
    b.batch = 1;
    b.seq = 2;
    b.ids = {3, 7};
    b.mask = {1, 1};
    std::vector<int> labels{1};

    auto loss_of = [&]() {
        auto trace = m.forward(b);
        auto picked = row_gather(row_log_softmax(trace.logits), labels);
        return scale(reduce_mean(picked), -1.0);
    };

    TapeT<double> tape;
    {
        TapeScopeT<double> scope(tape);
        auto loss = loss_of();
        tape.backprop(loss);
    }
    auto params = m.named_parameters();
    double worst = 0;
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto f = [&](TensorT<double>&) { return loss_of().item(); };
        auto numeric = finite_diff_grad<double>(f, p, 1e-4);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double diff = std::abs(analytic[i] - numeric[i]);
            const double mag = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
            worst = std::max(worst, diff / mag);
            ASSERT_LT(diff / mag, 1e-3) << name << "[" << i << "]";
        }
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(SplitModel, MatchesTernaryWithinTolerance) {
    auto cfg = small_config();
    cfg.quant["weights"] = QuantSpec{QuantKind::ternary, 1.0f};
    cfg.quant["embeddings"] = QuantSpec{QuantKind::ternary, 1.0f};
    cfg.quant["activations"] = QuantSpec{QuantKind::uniform4, 1.0f};
    auto ternary = build_encoder<float>(cfg);
    auto split = split_ternary_model(ternary);
    EXPECT_TRUE(split.config.split_weights);
    EXPECT_EQ(split.config.weights().kind, QuantKind::binary);
    const double diff = max_logit_diff(ternary, split, 20, 4, 321);
    EXPECT_LT(diff, 1e-5);
    // Parameter count: split model doubles every quantized matrix.
    const std::size_t base = ternary.parameter_count();
    const std::size_t quantized = static_cast<std::size_t>(cfg.vocab_size) * cfg.hidden_dim +
                                  static_cast<std::size_t>(cfg.num_layers) *
                                      (4u * cfg.hidden_dim * cfg.hidden_dim + 2u * cfg.hidden_dim * cfg.ffn_dim);
    EXPECT_EQ(split.parameter_count(), base + quantized);
}

}  // namespace
