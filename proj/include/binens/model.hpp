#pragma once

// Tiny transformer encoder classifier with per-group quantization. The
// forward pass exposes the intermediates the distillation losses consume:
// hidden states (embedding output plus every layer output), per-layer
// attention matrices, and logits.
//
// Block ordering is post-layer-norm (original BERT): x = LN(x + Sublayer(x)).
// Classification mean-pools the unmasked positions and applies a
// full-precision linear head. Activations are quantized at the inputs of
// every matmul inside the encoder layers; word embeddings follow the
// embedding quantization rule; position embeddings, biases, layer-norm
// parameters, and the classifier head stay full-precision.

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "binens/data_io.hpp"
#include "binens/errors.hpp"
#include "binens/quantization.hpp"
#include "binens/rng.hpp"
#include "binens/tensor.hpp"

namespace binens {

struct EncoderConfig {
    int vocab_size = kByteVocabSize;
    int max_seq_len = 24;
    int hidden_dim = 32;
    int num_layers = 2;
    int num_heads = 2;
    int ffn_dim = 64;
    int num_classes = 2;
    // Parameter-group quantization: keys "weights", "embeddings", "activations".
    std::map<std::string, QuantSpec> quant;
    // After ternary weight splitting each binary weight group is represented
    // as two parallel banks whose outputs are summed.
    bool split_weights = false;
    std::uint64_t seed = 1;

    QuantSpec group(const std::string& name) const {
        auto it = quant.find(name);
        return it == quant.end() ? QuantSpec{} : it->second;
    }
    QuantSpec weights() const { return group("weights"); }
    QuantSpec embeddings() const { return group("embeddings"); }
    QuantSpec activations() const { return group("activations"); }

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        if (vocab_size < 2) v.push_back("vocab_size must be >= 2");
        if (max_seq_len < 1) v.push_back("max_seq_len must be >= 1");
        if (hidden_dim < 1) v.push_back("hidden_dim must be >= 1");
        if (num_layers < 1) v.push_back("num_layers must be >= 1");
        if (num_heads < 1) v.push_back("num_heads must be >= 1");
        if (num_heads >= 1 && hidden_dim % std::max(1, num_heads) != 0)
            v.push_back("hidden_dim must be divisible by num_heads");
        if (ffn_dim < 1) v.push_back("ffn_dim must be >= 1");
        if (num_classes < 2) v.push_back("num_classes must be >= 2");
        for (const auto& [k, s] : quant) {
            if (k != "weights" && k != "embeddings" && k != "activations")
                v.push_back("unknown quantization group '" + k + "'");
            if (!(s.ste_clip > 0.0f)) v.push_back("ste_clip must be > 0 for group '" + k + "'");
        }
        const auto act = activations().kind;
        if (act != QuantKind::full_precision && act != QuantKind::uniform4)
            v.push_back("activations must be full_precision or uniform4");
        if (weights().kind == QuantKind::uniform4) v.push_back("weights cannot use uniform4");
        if (embeddings().kind == QuantKind::uniform4) v.push_back("embeddings cannot use uniform4");
        if (split_weights && weights().kind != QuantKind::binary)
            v.push_back("split_weights requires binary weights");
        if (split_weights && embeddings().kind == QuantKind::ternary)
            v.push_back("split_weights requires binary or full-precision embeddings");
        return v;
    }

    bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const QuantSpec& s) {
    j = nlohmann::json{{"kind", quant_kind_name(s.kind)}, {"ste_clip", s.ste_clip}};
}
inline void from_json(const nlohmann::json& j, QuantSpec& s) {
    if (j.is_string()) {
        s.kind = quant_kind_from_name(j.get<std::string>());
        return;
    }
    s.kind = quant_kind_from_name(j.at("kind").get<std::string>());
    s.ste_clip = j.value("ste_clip", 1.0f);
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                       {"hidden_dim", c.hidden_dim},   {"num_layers", c.num_layers},
                       {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
                       {"num_classes", c.num_classes}, {"split_weights", c.split_weights},
                       {"seed", c.seed}};
    nlohmann::json q = nlohmann::json::object();
    for (const auto& [k, s] : c.quant) q[k] = s;
    j["quant"] = q;
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    c = EncoderConfig{};
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.split_weights = j.value("split_weights", false);
    c.seed = j.value("seed", std::uint64_t{1});
    c.quant.clear();
    if (j.contains("quant"))
        for (const auto& [k, v] : j.at("quant").items()) c.quant[k] = v.get<QuantSpec>();
}

template <class T>
struct ForwardTraceT {
    TensorT<T> logits;                       // [batch, K]
    std::vector<TensorT<T>> hidden_states;   // L+1 x [batch, seq, hidden]
    std::vector<TensorT<T>> attentions;      // L x [batch, heads, seq, seq]
};

using ForwardTrace = ForwardTraceT<float>;

namespace detail {

// A possibly-split quantized weight matrix.
template <class T>
struct QuantWeight {
    QuantizedParamT<T> w;
    std::optional<QuantizedParamT<T>> w2;
};

template <class T>
struct LinearQ {
    QuantWeight<T> weight;
    TensorT<T> bias;
};

template <class T>
struct LayerNormP {
    TensorT<T> gamma;
    TensorT<T> beta;
};

template <class T>
struct EncoderLayerP {
    LinearQ<T> wq, wk, wv, wo;
    LayerNormP<T> ln1;
    LinearQ<T> ffn1, ffn2;
    LayerNormP<T> ln2;
};

}  // namespace detail

template <class T>
class EncoderModelT {
public:
    EncoderConfig config;

    detail::QuantWeight<T> word_emb;     // [vocab, hidden]
    TensorT<T> pos_emb;                  // [max_seq, hidden], full-precision
    detail::LayerNormP<T> emb_ln;
    std::vector<detail::EncoderLayerP<T>> layers;
    TensorT<T> cls_w;                    // [hidden, K], full-precision head
    TensorT<T> cls_b;                    // [K]

    // Builds a model with seeded initialization: truncated normal sigma=0.02
    // for weight matrices and embeddings, zeros for biases, ones/zeros for
    // layer norms. Identical config+seed yields bit-identical parameters.
    static EncoderModelT build(const EncoderConfig& cfg) {
        const auto violations = cfg.validate();
        if (!violations.empty()) {
            std::string msg = "invalid encoder config:";
            for (const auto& s : violations) msg += "\n  - " + s;
            throw ConfigError(msg);
        }
        EncoderModelT m;
        m.config = cfg;
        Rng rng(cfg.seed);
        const auto wspec = cfg.weights();
        const auto espec = cfg.embeddings();

        m.word_emb = m.make_weight({cfg.vocab_size, cfg.hidden_dim}, espec, cfg.split_weights, rng);
        m.pos_emb = m.init_matrix({cfg.max_seq_len, cfg.hidden_dim}, rng);
        m.emb_ln = m.make_ln(cfg.hidden_dim);
        m.layers.resize(static_cast<std::size_t>(cfg.num_layers));
        for (auto& layer : m.layers) {
            layer.wq = m.make_linear(cfg.hidden_dim, cfg.hidden_dim, wspec, cfg.split_weights, rng);
            layer.wk = m.make_linear(cfg.hidden_dim, cfg.hidden_dim, wspec, cfg.split_weights, rng);
            layer.wv = m.make_linear(cfg.hidden_dim, cfg.hidden_dim, wspec, cfg.split_weights, rng);
            layer.wo = m.make_linear(cfg.hidden_dim, cfg.hidden_dim, wspec, cfg.split_weights, rng);
            layer.ln1 = m.make_ln(cfg.hidden_dim);
            layer.ffn1 = m.make_linear(cfg.hidden_dim, cfg.ffn_dim, wspec, cfg.split_weights, rng);
            layer.ffn2 = m.make_linear(cfg.ffn_dim, cfg.hidden_dim, wspec, cfg.split_weights, rng);
            layer.ln2 = m.make_ln(cfg.hidden_dim);
        }
        m.cls_w = m.init_matrix({cfg.hidden_dim, cfg.num_classes}, rng);
        m.cls_b = TensorT<T>::zeros({cfg.num_classes}, true);
        return m;
    }

    ForwardTraceT<T> forward(const TokenBatch& batch) const { return run(batch, nullptr); }

    // Identical to forward except i.i.d. Gaussian noise of the given variance
    // is added to the embedding-layer output before the first encoder layer.
    ForwardTraceT<T> noise_injected_forward(const TokenBatch& batch, double variance, Rng& rng) const {
        if (variance < 0.0) throw ConfigError("noise_injected_forward: negative variance");
        if (variance == 0.0) return run(batch, nullptr);
        TensorT<T> noise = TensorT<T>::zeros({batch.batch, batch.seq, config.hidden_dim});
        const double stddev = std::sqrt(variance);
        for (std::size_t i = 0; i < noise.numel(); ++i) noise[i] = static_cast<T>(rng.gaussian(0.0, stddev));
        return run(batch, &noise);
    }

    // Stable traversal order; names are the checkpoint tensor names.
    std::vector<std::pair<std::string, TensorT<T>>> named_parameters() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        auto add_weight = [&out](const std::string& name, const detail::QuantWeight<T>& w) {
            if (w.w2) {
                out.emplace_back(name + ".a", w.w.latent);
                out.emplace_back(name + ".b", w.w2->latent);
            } else {
                out.emplace_back(name, w.w.latent);
            }
        };
        add_weight("embedding.word", word_emb);
        out.emplace_back("embedding.pos", pos_emb);
        out.emplace_back("embedding.ln.gamma", emb_ln.gamma);
        out.emplace_back("embedding.ln.beta", emb_ln.beta);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            const auto& layer = layers[l];
            add_weight(p + "attn.wq", layer.wq.weight);
            out.emplace_back(p + "attn.bq", layer.wq.bias);
            add_weight(p + "attn.wk", layer.wk.weight);
            out.emplace_back(p + "attn.bk", layer.wk.bias);
            add_weight(p + "attn.wv", layer.wv.weight);
            out.emplace_back(p + "attn.bv", layer.wv.bias);
            add_weight(p + "attn.wo", layer.wo.weight);
            out.emplace_back(p + "attn.bo", layer.wo.bias);
            out.emplace_back(p + "ln1.gamma", layer.ln1.gamma);
            out.emplace_back(p + "ln1.beta", layer.ln1.beta);
            add_weight(p + "ffn.w1", layer.ffn1.weight);
            out.emplace_back(p + "ffn.b1", layer.ffn1.bias);
            add_weight(p + "ffn.w2", layer.ffn2.weight);
            out.emplace_back(p + "ffn.b2", layer.ffn2.bias);
            out.emplace_back(p + "ln2.gamma", layer.ln2.gamma);
            out.emplace_back(p + "ln2.beta", layer.ln2.beta);
        }
        out.emplace_back("classifier.w", cls_w);
        out.emplace_back("classifier.b", cls_b);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

private:
    TensorT<T> init_matrix(Shape shape, Rng& rng) const {
        TensorT<T> t = TensorT<T>::zeros(shape, true);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.truncated_normal(0.02));
        return t;
    }

    detail::QuantWeight<T> make_weight(Shape shape, QuantSpec spec, bool split, Rng& rng) const {
        detail::QuantWeight<T> w;
        w.w = QuantizedParamT<T>(init_matrix(shape, rng), spec);
        if (split && spec.kind == QuantKind::binary)
            w.w2 = QuantizedParamT<T>(init_matrix(shape, rng), spec);
        return w;
    }

    detail::LinearQ<T> make_linear(int in, int out, QuantSpec spec, bool split, Rng& rng) const {
        detail::LinearQ<T> lin;
        lin.weight = make_weight({in, out}, spec, split, rng);
        lin.bias = TensorT<T>::zeros({out}, true);
        return lin;
    }

    detail::LayerNormP<T> make_ln(int width) const {
        detail::LayerNormP<T> ln;
        ln.gamma = TensorT<T>::full({width}, T(1), true);
        ln.beta = TensorT<T>::zeros({width}, true);
        return ln;
    }

    TensorT<T> apply_linear(const detail::LinearQ<T>& lin, const TensorT<T>& x) const {
        if (lin.weight.w2) {
            TensorT<T> y = matmul_pair(x, quantize_weight(lin.weight.w), quantize_weight(*lin.weight.w2));
            return add(y, lin.bias);
        }
        return add(matmul(x, quantize_weight(lin.weight.w)), lin.bias);
    }

    TensorT<T> embed(const TokenBatch& batch) const {
        for (std::size_t i = 0; i < batch.ids.size(); ++i) {
            if (batch.ids[i] < 0 || batch.ids[i] >= config.vocab_size) {
                const int row = static_cast<int>(i) / batch.seq;
                const int col = static_cast<int>(i) % batch.seq;
                throw DataError("forward: token id " + std::to_string(batch.ids[i]) + " out of range [0," +
                                std::to_string(config.vocab_size) + ") at batch row " + std::to_string(row) +
                                ", position " + std::to_string(col));
            }
        }
        const Shape ids_shape{batch.batch, batch.seq};
        TensorT<T> tok = embedding_lookup(quantize_weight(word_emb.w), batch.ids, ids_shape);
        if (word_emb.w2) tok = add(tok, embedding_lookup(quantize_weight(*word_emb.w2), batch.ids, ids_shape));
        std::vector<int> pos_ids(batch.ids.size());
        for (int b = 0; b < batch.batch; ++b)
            for (int s = 0; s < batch.seq; ++s) pos_ids[static_cast<std::size_t>(b * batch.seq + s)] = s;
        if (batch.seq > config.max_seq_len)
            throw ConfigError("forward: sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                              std::to_string(config.max_seq_len));
        TensorT<T> pos = embedding_lookup(pos_emb, pos_ids, ids_shape);
        return layer_norm(add(tok, pos), emb_ln.gamma, emb_ln.beta, T(1e-5));
    }

    ForwardTraceT<T> run(const TokenBatch& batch, const TensorT<T>* noise) const {
        if (static_cast<int>(batch.ids.size()) != batch.batch * batch.seq ||
            batch.mask.size() != batch.ids.size())
            throw ShapeError("forward: batch ids/mask sizes do not match batch*seq");
        const int B = batch.batch, S = batch.seq, H = config.hidden_dim;
        const int heads = config.num_heads, hd = H / heads;
        const auto aspec = config.activations();

        ForwardTraceT<T> trace;
        TensorT<T> x = embed(batch);
        if (noise) x = add(x, *noise);
        trace.hidden_states.push_back(x);

        // Additive attention bias: 0 over real key positions, -1e9 over pads.
        TensorT<T> attn_bias = TensorT<T>::zeros({B * heads, S, S});
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < S; ++j)
                if (batch.mask[static_cast<std::size_t>(b * S + j)] == 0)
                    for (int h = 0; h < heads; ++h)
                        for (int i = 0; i < S; ++i)
                            attn_bias[(static_cast<std::size_t>(b * heads + h) * S + static_cast<std::size_t>(i)) * S +
                                      static_cast<std::size_t>(j)] = T(-1e9);

        TensorT<T> maskf = TensorT<T>::zeros({B, S});
        for (std::size_t i = 0; i < batch.mask.size(); ++i) maskf[i] = static_cast<T>(batch.mask[i]);

        auto split_heads = [&](const TensorT<T>& t) {
            return reshape(permute(reshape(t, {B, S, heads, hd}), {0, 2, 1, 3}), {B * heads, S, hd});
        };

        for (const auto& layer : layers) {
            TensorT<T> xq = quantize_activation(x, aspec);
            TensorT<T> q = split_heads(apply_linear(layer.wq, xq));
            TensorT<T> k = split_heads(apply_linear(layer.wk, xq));
            TensorT<T> v = split_heads(apply_linear(layer.wv, xq));
            TensorT<T> scores = matmul(quantize_activation(q, aspec),
                                       permute(quantize_activation(k, aspec), {0, 2, 1}));
            scores = add(scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)))), attn_bias);
            TensorT<T> attn = row_softmax(scores);
            trace.attentions.push_back(reshape(attn, {B, heads, S, S}));
            TensorT<T> ctx = matmul(quantize_activation(attn, aspec), quantize_activation(v, aspec));
            ctx = reshape(permute(reshape(ctx, {B, heads, S, hd}), {0, 2, 1, 3}), {B, S, H});
            TensorT<T> attn_out = apply_linear(layer.wo, quantize_activation(ctx, aspec));
            x = layer_norm(add(x, attn_out), layer.ln1.gamma, layer.ln1.beta, T(1e-5));
            TensorT<T> ff = apply_linear(layer.ffn2, quantize_activation(gelu(apply_linear(layer.ffn1, quantize_activation(x, aspec))), aspec));
            x = layer_norm(add(x, ff), layer.ln2.gamma, layer.ln2.beta, T(1e-5));
            trace.hidden_states.push_back(x);
        }

        TensorT<T> pooled = masked_mean_pool(x, maskf);
        trace.logits = add(matmul(pooled, cls_w), cls_b);
        return trace;
    }
};

using EncoderModel = EncoderModelT<float>;

template <class T>
EncoderModelT<T> build_encoder(const EncoderConfig& cfg) {
    return EncoderModelT<T>::build(cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned header (format version + config as JSON text)
// followed by named raw little-endian float32 arrays. Round-trips are
// byte-exact on parameters.
// ---------------------------------------------------------------------------

struct Checkpoint {
    int format_version = 1;
    EncoderConfig config;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline Checkpoint checkpoint_from_model(const EncoderModelT<float>& m) {
    Checkpoint ck;
    ck.config = m.config;
    for (const auto& [name, t] : m.named_parameters()) ck.tensors.emplace_back(name, t.clone());
    return ck;
}

inline EncoderModelT<float> model_from_checkpoint(const Checkpoint& ck) {
    auto m = EncoderModelT<float>::build(ck.config);
    auto params = m.named_parameters();
    if (params.size() != ck.tensors.size())
        throw DataError("checkpoint: tensor count " + std::to_string(ck.tensors.size()) + " does not match model (" +
                        std::to_string(params.size()) + ")");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [cname, ct] = ck.tensors[i];
        auto& [mname, mt] = params[i];
        if (cname != mname) throw DataError("checkpoint: tensor '" + cname + "' where '" + mname + "' expected");
        if (ct.shape() != mt.shape())
            throw DataError("checkpoint: tensor '" + cname + "' has shape " + shape_str(ct.shape()) + ", expected " +
                            shape_str(mt.shape()));
        std::copy(ct.data().begin(), ct.data().end(), mt.data().begin());
    }
    return m;
}

// Model-level ternary weight splitting: every ternary parameter group is
// replaced by two parallel binary banks whose outputs are summed; biases,
// layer norms, position embeddings, and the classifier head are copied.
// The split model computes the same function as the ternary model (up to
// float rounding) before any fine-tuning.
inline EncoderModelT<float> split_ternary_model(const EncoderModelT<float>& src) {
    if (src.config.weights().kind != QuantKind::ternary)
        throw ConfigError("split_ternary_model: model weights are not ternary");
    if (src.config.split_weights) throw ConfigError("split_ternary_model: model is already split");

    EncoderConfig cfg = src.config;
    cfg.split_weights = true;
    cfg.quant["weights"] = QuantSpec{QuantKind::binary, src.config.weights().ste_clip};
    if (src.config.embeddings().kind == QuantKind::ternary)
        cfg.quant["embeddings"] = QuantSpec{QuantKind::binary, src.config.embeddings().ste_clip};

    auto dst = EncoderModelT<float>::build(cfg);
    auto copy_tensor = [](const Tensor& from, Tensor& to) {
        std::copy(from.data().begin(), from.data().end(), to.data().begin());
    };
    auto split_weight = [&](const detail::QuantWeight<float>& from, detail::QuantWeight<float>& to) {
        if (from.w.spec.kind == QuantKind::ternary) {
            auto [a, b] = ternary_weight_split(from.w);
            copy_tensor(a.latent, to.w.latent);
            copy_tensor(b.latent, to.w2->latent);
        } else {
            copy_tensor(from.w.latent, to.w.latent);
        }
    };
    split_weight(src.word_emb, dst.word_emb);
    copy_tensor(src.pos_emb, dst.pos_emb);
    copy_tensor(src.emb_ln.gamma, dst.emb_ln.gamma);
    copy_tensor(src.emb_ln.beta, dst.emb_ln.beta);
    for (std::size_t l = 0; l < src.layers.size(); ++l) {
        const auto& a = src.layers[l];
        auto& b = dst.layers[l];
        const std::pair<const detail::LinearQ<float>*, detail::LinearQ<float>*> linears[] = {
            {&a.wq, &b.wq}, {&a.wk, &b.wk}, {&a.wv, &b.wv}, {&a.wo, &b.wo}, {&a.ffn1, &b.ffn1}, {&a.ffn2, &b.ffn2}};
        for (const auto& [from, to] : linears) {
            split_weight(from->weight, to->weight);
            copy_tensor(from->bias, to->bias);
        }
        copy_tensor(a.ln1.gamma, b.ln1.gamma);
        copy_tensor(a.ln1.beta, b.ln1.beta);
        copy_tensor(a.ln2.gamma, b.ln2.gamma);
        copy_tensor(a.ln2.beta, b.ln2.beta);
    }
    copy_tensor(src.cls_w, dst.cls_w);
    copy_tensor(src.cls_b, dst.cls_b);
    return dst;
}

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_checkpoint: cannot open " + path + " for writing");
    nlohmann::json cfg = ck.config;
    out << "BINENS_CKPT " << ck.format_version << "\n";
    out << cfg.dump() << "\n";
    out << ck.tensors.size() << "\n";
    for (const auto& [name, t] : ck.tensors) {
        out << name << " " << t.ndim();
        for (int d = 0; d < t.ndim(); ++d) out << " " << t.dim(d);
        out << "\n";
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
        out << "\n";
    }
    if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    std::string magic;
    Checkpoint ck;
    in >> magic >> ck.format_version;
    if (magic != "BINENS_CKPT") throw DataError("load_checkpoint: " + path + " is not a checkpoint file");
    if (ck.format_version != 1)
        throw DataError("load_checkpoint: unsupported format version " + std::to_string(ck.format_version));
    std::string line;
    std::getline(in, line);  // rest of header line
    std::getline(in, line);
    ck.config = nlohmann::json::parse(line).get<EncoderConfig>();
    std::size_t count = 0;
    in >> count;
    std::getline(in, line);
    ck.tensors.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        int ndim = 0;
        in >> name >> ndim;
        if (!in || ndim < 0 || ndim > 8) throw DataError("load_checkpoint: corrupt tensor header in " + path);
        Shape shape(static_cast<std::size_t>(ndim));
        for (auto& d : shape) in >> d;
        std::getline(in, line);
        Tensor t = Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!in) throw DataError("load_checkpoint: truncated tensor data in " + path);
        std::getline(in, line);
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

}  // namespace binens
