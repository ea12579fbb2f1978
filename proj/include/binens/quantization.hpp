#pragma once

// Weight binarization / ternarization, 4-bit uniform activation quantization,
// straight-through gradient rules, and ternary weight splitting.
//
// Scaling rules: binary weights use the mean-|w| scaling factor, ternary
// weights the 0.7*mean-|w| threshold with the surviving-magnitude mean.
// sign(0) := +1 everywhere. Quantized views are recomputed from the latent
// weights on every forward; scales are never cached across updates.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "binens/errors.hpp"
#include "binens/tensor.hpp"

namespace binens {

enum class QuantKind { full_precision, binary, ternary, uniform4 };

inline const char* quant_kind_name(QuantKind k) {
    switch (k) {
        case QuantKind::full_precision: return "full_precision";
        case QuantKind::binary: return "binary";
        case QuantKind::ternary: return "ternary";
        case QuantKind::uniform4: return "uniform4";
    }
    return "?";
}

inline QuantKind quant_kind_from_name(const std::string& s) {
    if (s == "full_precision" || s == "fp" || s == "fp32") return QuantKind::full_precision;
    if (s == "binary") return QuantKind::binary;
    if (s == "ternary") return QuantKind::ternary;
    if (s == "uniform4") return QuantKind::uniform4;
    throw ConfigError("unknown quantization kind '" + s + "'");
}

// Storage bits per parameter under a given rule.
inline int quant_bits(QuantKind k) {
    switch (k) {
        case QuantKind::binary: return 1;
        case QuantKind::ternary: return 2;
        case QuantKind::uniform4: return 4;
        case QuantKind::full_precision: return 32;
    }
    return 32;
}

struct QuantSpec {
    QuantKind kind = QuantKind::full_precision;
    float ste_clip = 1.0f;  // pass-through window for the straight-through estimator

    bool quantized() const { return kind != QuantKind::full_precision; }
    bool operator==(const QuantSpec&) const = default;
};

template <class T>
struct QuantResult {
    TensorT<T> values;
    T scale = T(0);
    bool degenerate = false;  // all-zero input (binary) or empty survivor set (ternary)
};

template <class T>
inline T sign_pos(T v) {
    return v < T(0) ? T(-1) : T(1);  // sign(0) := +1
}

// scale = mean(|w|); values = scale * sign(w). All-zero input yields scale 0
// and the degenerate flag.
template <class T>
QuantResult<T> binarize(const TensorT<T>& latent) {
    if (latent.numel() == 0) throw ShapeError("binarize: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < latent.numel(); ++i) acc += std::abs(static_cast<double>(latent[i]));
    const T scale = static_cast<T>(acc / static_cast<double>(latent.numel()));
    QuantResult<T> r;
    r.scale = scale;
    r.degenerate = scale == T(0);
    r.values = TensorT<T>::zeros(latent.shape());
    for (std::size_t i = 0; i < latent.numel(); ++i) r.values[i] = scale * sign_pos(latent[i]);
    return r;
}

// threshold = 0.7 * mean(|w|); entries inside map to 0, survivors to
// scale * sign(w) with scale = mean(|w|) over survivors.
template <class T>
QuantResult<T> ternarize(const TensorT<T>& latent) {
    if (latent.numel() == 0) throw ShapeError("ternarize: empty tensor");
    const std::size_t n = latent.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(latent[i]));
    const double threshold = 0.7 * acc / static_cast<double>(n);
    double surv = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = std::abs(static_cast<double>(latent[i]));
        if (a > threshold) {
            surv += a;
            ++count;
        }
    }
    QuantResult<T> r;
    r.values = TensorT<T>::zeros(latent.shape());
    if (count == 0) {
        r.scale = T(0);
        r.degenerate = true;
        return r;
    }
    r.scale = static_cast<T>(surv / static_cast<double>(count));
    for (std::size_t i = 0; i < n; ++i) {
        const double a = std::abs(static_cast<double>(latent[i]));
        r.values[i] = a > threshold ? r.scale * sign_pos(latent[i]) : T(0);
    }
    return r;
}

// Symmetric 15-level lattice: s = max(|x|)/7, values = clip(round(x/s), -7, 7) * s.
// The ratio and reconstruction are formed in double so that requantizing a
// lattice point returns it bit-exactly.
template <class T>
QuantResult<T> quantize_uniform4(const TensorT<T>& x) {
    if (x.numel() == 0) throw ShapeError("quantize_uniform4: empty tensor");
    T maxabs = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) maxabs = std::max(maxabs, std::abs(x[i]));
    QuantResult<T> r;
    r.values = TensorT<T>::zeros(x.shape());
    if (maxabs == T(0)) {
        r.scale = T(1);
        return r;
    }
    const double m = static_cast<double>(maxabs);
    r.scale = static_cast<T>(m / 7.0);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double ratio = static_cast<double>(x[i]) * 7.0 / m;
        long k = std::llround(ratio);
        k = std::min<long>(7, std::max<long>(-7, k));
        r.values[i] = static_cast<T>(static_cast<double>(k) * m / 7.0);
    }
    return r;
}

// The straight-through estimator: upstream gradient passes where the latent
// lies inside the quantizer's linear window, and is zeroed elsewhere.
//   binary/ternary: |latent| <= ste_clip
//   uniform4:       |latent| <= 7s with s = max(|latent|)/7
template <class T>
TensorT<T> ste_backward(const TensorT<T>& upstream_grad, const TensorT<T>& latent, const QuantSpec& spec) {
    if (upstream_grad.shape() != latent.shape())
        throw ShapeError("ste_backward: grad shape " + shape_str(upstream_grad.shape()) + " vs latent " +
                         shape_str(latent.shape()));
    TensorT<T> out = TensorT<T>::zeros(latent.shape());
    if (spec.kind == QuantKind::uniform4) {
        T maxabs = T(0);
        for (std::size_t i = 0; i < latent.numel(); ++i) maxabs = std::max(maxabs, std::abs(latent[i]));
        for (std::size_t i = 0; i < latent.numel(); ++i)
            out[i] = std::abs(latent[i]) <= maxabs ? upstream_grad[i] : T(0);
        return out;
    }
    const T c = static_cast<T>(spec.ste_clip);
    for (std::size_t i = 0; i < latent.numel(); ++i)
        out[i] = std::abs(latent[i]) <= c ? upstream_grad[i] : T(0);
    return out;
}

// A latent full-precision master weight plus its quantization rule. The
// quantized view is derived on demand; `scale` reflects the last derivation.
template <class T>
struct QuantizedParamT {
    TensorT<T> latent;
    QuantSpec spec;
    mutable T scale = T(0);
    mutable bool degenerate = false;

    QuantizedParamT() = default;
    QuantizedParamT(TensorT<T> latent_, QuantSpec spec_) : latent(std::move(latent_)), spec(spec_) {}

    // Plain quantized view (no tape participation).
    TensorT<T> quantized_values() const {
        switch (spec.kind) {
            case QuantKind::full_precision:
                scale = T(1);
                return latent;
            case QuantKind::binary: {
                auto r = binarize(latent);
                scale = r.scale;
                degenerate = r.degenerate;
                return r.values;
            }
            case QuantKind::ternary: {
                auto r = ternarize(latent);
                scale = r.scale;
                degenerate = r.degenerate;
                return r.values;
            }
            case QuantKind::uniform4: {
                auto r = quantize_uniform4(latent);
                scale = r.scale;
                degenerate = r.degenerate;
                return r.values;
            }
        }
        throw InternalError("quantized_values: bad kind");
    }
};

using QuantizedParam = QuantizedParamT<float>;

// Forward view of a weight for use in a traced graph. Gradients reaching the
// quantized view flow to the latent weights through ste_backward.
template <class T>
TensorT<T> quantize_weight(const QuantizedParamT<T>& param) {
    if (param.spec.kind == QuantKind::full_precision) {
        param.scale = T(1);
        return param.latent;
    }
    TensorT<T> out = param.quantized_values();
    const TensorT<T>& latent = param.latent;
    if (detail::track<T>({&latent})) {
        detail::mark_output(out);
        const QuantSpec spec = param.spec;
        TapeT<T>::current()->record("quantize_weight", {latent}, out, [latent, out, spec]() {
            if (!latent.requires_grad()) return;
            auto gl = const_cast<TensorT<T>&>(latent);
            gl.ensure_grad();
            TensorT<T> up(out.shape(), out.grad());
            TensorT<T> masked = ste_backward(up, latent, spec);
            for (std::size_t i = 0; i < masked.numel(); ++i) gl.grad()[i] += masked[i];
        });
    }
    return out;
}

// Activation quantizer (uniform4 or pass-through).
template <class T>
TensorT<T> quantize_activation(const TensorT<T>& x, const QuantSpec& spec) {
    if (spec.kind == QuantKind::full_precision) return x;
    if (spec.kind != QuantKind::uniform4)
        throw ConfigError(std::string("quantize_activation: unsupported activation kind ") + quant_kind_name(spec.kind));
    auto r = quantize_uniform4(x);
    TensorT<T> out = r.values;
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        const QuantSpec s = spec;
        TapeT<T>::current()->record("quantize_activation", {x}, out, [x, out, s]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            TensorT<T> up(out.shape(), out.grad());
            TensorT<T> masked = ste_backward(up, x, s);
            for (std::size_t i = 0; i < masked.numel(); ++i) gx.grad()[i] += masked[i];
        });
    }
    return out;
}

// Ternary weight splitting: replaces one ternary parameter with two binary
// parameters of scale beta = alpha_t/2 whose quantized sum reproduces the
// ternary tensor exactly:
//   +a -> (+b,+b)   -a -> (-b,-b)   0 -> (+b,-b) / (-b,+b), alternating over
// zero entries in flattened order, starting with (+b,-b).
//
// Latent halves start from latent/2 +- delta (delta = beta/2, sign matching
// the assigned binary sign; the latent/2 term of zero entries is clamped into
// (-delta, delta) so the sign assignment wins) and are then rescaled so their
// mean magnitude equals beta, which makes the mean-|w| binarizer reproduce
// the assigned values.
template <class T>
std::pair<QuantizedParamT<T>, QuantizedParamT<T>> ternary_weight_split(const QuantizedParamT<T>& param) {
    if (param.spec.kind != QuantKind::ternary)
        throw ConfigError(std::string("ternary_weight_split: parameter is ") + quant_kind_name(param.spec.kind) +
                          ", expected ternary");
    auto t = ternarize(param.latent);
    if (t.degenerate)
        throw DegenerateTrainingError("ternary_weight_split: all-zero ternary tensor cannot be split exactly");
    const T beta = t.scale / T(2);
    const T delta = beta / T(2);
    const std::size_t n = param.latent.numel();

    TensorT<T> la = TensorT<T>::zeros(param.latent.shape());
    TensorT<T> lb = TensorT<T>::zeros(param.latent.shape());
    std::size_t zero_ordinal = 0;
    for (std::size_t i = 0; i < n; ++i) {
        T sa, sb;
        if (t.values[i] > T(0)) {
            sa = sb = T(1);
        } else if (t.values[i] < T(0)) {
            sa = sb = T(-1);
        } else {
            sa = (zero_ordinal % 2 == 0) ? T(1) : T(-1);
            sb = -sa;
            ++zero_ordinal;
        }
        T base = param.latent[i] / T(2);
        if (t.values[i] == T(0)) base = std::min(T(0.9) * delta, std::max(T(-0.9) * delta, base));
        la[i] = base + delta * sa;
        lb[i] = base + delta * sb;
    }

    // Rescale each half so the mean-|w| binarizer reproduces beta EXACTLY,
    // not to within an ulp: the split model's forward then matches the
    // ternary model's bit for bit, which the downstream activation-lattice
    // quantizer requires (a one-ulp scale error can flip a lattice cell and
    // move logits by whole quantization steps).
    //
    // Step 1 rescales multiplicatively. Step 2 snaps every magnitude onto a
    // power-of-two grid u (all snapped values and their double-precision
    // partial sums are exact) and distributes unit bumps until the mean-abs
    // equals beta to below half an ulp, which makes the float32 mean come
    // out as beta itself.
    const auto renorm_exact = [beta, n](TensorT<T>& l) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(l[i]));
        const double c = static_cast<double>(beta) * static_cast<double>(n) / acc;
        T maxabs = beta;
        for (std::size_t i = 0; i < n; ++i) {
            l[i] = static_cast<T>(static_cast<double>(l[i]) * c);
            maxabs = std::max(maxabs, std::abs(l[i]));
        }
        int exp = 0;
        std::frexp(static_cast<double>(maxabs), &exp);
        const double u = std::ldexp(1.0, exp - 24);  // grid: magnitudes become k*u, k <= 2^24
        constexpr long long kMax = (1LL << 24) - 8;
        std::vector<long long> k(n);
        long long total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            k[i] = std::llround(std::abs(static_cast<double>(l[i])) / u);
            k[i] = std::min(kMax, std::max<long long>(1, k[i]));
            total += k[i];
        }
        const long long target = std::llround(static_cast<double>(beta) * static_cast<double>(n) / u);
        long long deficit = target - total;
        const long long step = deficit > 0 ? 1 : -1;
        std::size_t idx = 0;
        for (int pass = 0; pass < 8 && deficit != 0; ++pass) {
            for (std::size_t seen = 0; seen < n && deficit != 0; ++seen, idx = (idx + 1) % n) {
                const long long next = k[idx] + step;
                if (next < 1 || next > kMax) continue;
                k[idx] = next;
                deficit -= step;
            }
        }
        if (deficit != 0)
            throw InternalError("ternary_weight_split: could not renormalize a half onto the exact-scale grid");
        for (std::size_t i = 0; i < n; ++i)
            l[i] = static_cast<T>(sign_pos(l[i]) * static_cast<T>(static_cast<double>(k[i]) * u));
    };
    renorm_exact(la);
    renorm_exact(lb);
    if (binarize(la).scale != beta || binarize(lb).scale != beta)
        throw InternalError("ternary_weight_split: half scale did not land on alpha/2 exactly");

    QuantSpec bspec{QuantKind::binary, param.spec.ste_clip};
    QuantizedParamT<T> a(std::move(la), bspec);
    QuantizedParamT<T> b(std::move(lb), bspec);
    a.latent.set_requires_grad(param.latent.requires_grad());
    b.latent.set_requires_grad(param.latent.requires_grad());
    a.scale = beta;
    b.scale = beta;
    return {std::move(a), std::move(b)};
}

}  // namespace binens
