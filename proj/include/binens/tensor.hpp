#pragma once

// Dense row-major tensors with define-by-run reverse-mode autodiff.
// The tape is rebuilt on every forward pass; quantizers register custom
// (straight-through) backward rules through the same mechanism.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "binens/errors.hpp"

namespace binens {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
template <class T>
struct Storage {
    std::vector<T> data;
    std::vector<T> grad;  // empty until touched by a backward pass
    bool requires_grad = false;
};
}  // namespace detail

template <class T>
class TapeT;

template <class T>
class TensorT {
public:
    TensorT() : shape_{0}, st_(std::make_shared<detail::Storage<T>>()) {}

    TensorT(Shape shape, std::vector<T> values, bool requires_grad = false)
        : shape_(std::move(shape)), st_(std::make_shared<detail::Storage<T>>()) {
        if (values.size() != shape_numel(shape_))
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape_));
        st_->data = std::move(values);
        st_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), T(0));
        return TensorT(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), value);
        return TensorT(std::move(shape), std::move(v), requires_grad);
    }

    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::size_t numel() const { return shape_numel(shape_); }

    std::vector<T>& data() { return st_->data; }
    const std::vector<T>& data() const { return st_->data; }
    T& operator[](std::size_t i) { return st_->data[i]; }
    T operator[](std::size_t i) const { return st_->data[i]; }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool rg) { st_->requires_grad = rg; }

    bool has_grad() const { return !st_->grad.empty(); }
    std::vector<T>& grad() {
        ensure_grad();
        return st_->grad;
    }
    const std::vector<T>& grad() const { return st_->grad; }

    void ensure_grad() {
        if (st_->grad.size() != st_->data.size()) st_->grad.assign(st_->data.size(), T(0));
    }
    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape_));
        return st_->data[0];
    }

    // Deep copy (fresh storage, grad not copied).
    TensorT clone() const {
        TensorT out(shape_, st_->data, st_->requires_grad);
        return out;
    }

    // Storage identity; copies of a tensor alias the same buffers.
    const void* storage_id() const { return st_.get(); }

private:
    Shape shape_;
    std::shared_ptr<detail::Storage<T>> st_;

    friend class TapeT<T>;
};

using Tensor = TensorT<float>;

// Counts backprop invocations; the distillation trainer reads the delta to
// verify the per-strategy propagation counts.
inline thread_local long g_backward_passes = 0;

template <class T>
class TapeT {
public:
    struct Op {
        const char* name;
        std::vector<int> inputs;
        int output;
        std::function<void()> backward;
    };

    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT*& current() {
        static thread_local TapeT* cur = nullptr;
        return cur;
    }
    static bool active() { return current() != nullptr; }

    std::size_t size() const { return ops_.size(); }
    bool empty() const { return ops_.empty(); }
    const std::vector<Op>& ops() const { return ops_; }

    int node_id(const TensorT<T>& t) {
        auto it = ids_.find(t.storage_id());
        if (it != ids_.end()) return it->second;
        const int id = next_id_++;
        ids_.emplace(t.storage_id(), id);
        return id;
    }

    void record(const char* name, const std::vector<TensorT<T>>& inputs, const TensorT<T>& output,
                std::function<void()> backward) {
        Op op;
        op.name = name;
        op.inputs.reserve(inputs.size());
        for (const auto& in : inputs) op.inputs.push_back(node_id(in));
        op.output = node_id(output);
        op.backward = std::move(backward);
        ops_.push_back(std::move(op));
        tracked_.push_back(output);
        for (const auto& in : inputs) tracked_.push_back(in);
    }

    // Reverse sweep from a scalar loss. Visits every recorded op exactly once,
    // newest first, then clears the tape. Gradients of all tracked tensors are
    // reset before accumulation, so each backprop yields d(loss)/d(leaf).
    void backprop(TensorT<T>& loss) {
        if (loss.numel() != 1)
            throw ShapeError("backprop: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (ops_.empty()) throw InternalError("backprop: tape is empty");
        for (auto& t : tracked_) {
            if (t.requires_grad()) {
                t.ensure_grad();
                t.zero_grad();
            }
        }
        loss.ensure_grad();
        loss.zero_grad();
        loss.grad()[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
        clear();
        ++g_backward_passes;
    }

    void clear() {
        ops_.clear();
        tracked_.clear();
        ids_.clear();
        next_id_ = 0;
    }

private:
    std::vector<Op> ops_;
    std::vector<TensorT<T>> tracked_;
    std::unordered_map<const void*, int> ids_;
    int next_id_ = 0;
};

using Tape = TapeT<float>;

// Activates a tape for the enclosing scope; ops record themselves while one
// is active and any input requires gradients.
template <class T>
class TapeScopeT {
public:
    explicit TapeScopeT(TapeT<T>& tape) : prev_(TapeT<T>::current()) { TapeT<T>::current() = &tape; }
    ~TapeScopeT() { TapeT<T>::current() = prev_; }
    TapeScopeT(const TapeScopeT&) = delete;
    TapeScopeT& operator=(const TapeScopeT&) = delete;

private:
    TapeT<T>* prev_;
};

using TapeScope = TapeScopeT<float>;

namespace detail {

template <class T>
bool track(std::initializer_list<const TensorT<T>*> inputs) {
    if (!TapeT<T>::active()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class T>
void mark_output(TensorT<T>& out) {
    out.set_requires_grad(true);
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Forward computes values; when a tape is active and any input
// requires gradients, a backward rule is recorded.
// ---------------------------------------------------------------------------

// matmul: [m,k]x[k,n], [b,m,k]x[k,n], or [b,m,k]x[b,k,n].
// Accumulation runs in double (float operands promote exactly), which keeps
// algebraically-equal weight decompositions numerically equal; see
// matmul_pair.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const bool a3 = sa.size() == 3, b3 = sb.size() == 3;
    if (!((sa.size() == 2 && sb.size() == 2) || (a3 && sb.size() == 2) || (a3 && b3)))
        detail::shape_fail("matmul", sa, sb);
    const int batch = a3 ? sa[0] : 1;
    const int m = a3 ? sa[1] : sa[0];
    const int k = a3 ? sa[2] : sa[1];
    const int kb = b3 ? sb[1] : sb[0];
    const int n = b3 ? sb[2] : sb[1];
    if (k != kb || (b3 && (!a3 || sb[0] != batch))) detail::shape_fail("matmul", sa, sb);

    Shape out_shape = a3 ? Shape{batch, m, n} : Shape{m, n};
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    const std::size_t a_stride = static_cast<std::size_t>(m) * k;
    const std::size_t b_stride = b3 ? static_cast<std::size_t>(k) * n : 0;
    const std::size_t o_stride = static_cast<std::size_t>(m) * n;
    std::vector<double> acc(static_cast<std::size_t>(n));
    for (int bi = 0; bi < batch; ++bi) {
        const T* A = pa + bi * a_stride;
        const T* B = pb + bi * b_stride;
        T* O = po + bi * o_stride;
        for (int i = 0; i < m; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int kk = 0; kk < k; ++kk) {
                const double av = static_cast<double>(A[i * k + kk]);
                if (av == 0.0) continue;
                const T* brow = B + kk * n;
                for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += av * static_cast<double>(brow[j]);
            }
            T* orow = O + i * n;
            for (int j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[static_cast<std::size_t>(j)]);
        }
    }
    if (detail::track<T>({&a, &b})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("matmul", {a, b}, out, [a, b, out, batch, m, k, n, b3]() {
            const std::size_t a_str = static_cast<std::size_t>(m) * k;
            const std::size_t b_str = b3 ? static_cast<std::size_t>(k) * n : 0;
            const std::size_t o_str = static_cast<std::size_t>(m) * n;
            const T* pgo = out.grad().data();
            if (a.requires_grad()) {
                auto ga = const_cast<TensorT<T>&>(a);
                ga.ensure_grad();
                T* pga = ga.grad().data();
                const T* pb2 = b.data().data();
                for (int bi = 0; bi < batch; ++bi)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const T g = pgo[bi * o_str + i * n + j];
                            if (g == T(0)) continue;
                            const T* brow = pb2 + bi * b_str + j;
                            T* garow = pga + bi * a_str + i * k;
                            for (int kk = 0; kk < k; ++kk) garow[kk] += g * brow[kk * n];
                        }
            }
            if (b.requires_grad()) {
                auto gb = const_cast<TensorT<T>&>(b);
                gb.ensure_grad();
                T* pgb = gb.grad().data();
                const T* pa2 = a.data().data();
                for (int bi = 0; bi < batch; ++bi)
                    for (int kk = 0; kk < k; ++kk)
                        for (int i = 0; i < m; ++i) {
                            const T av = pa2[bi * a_str + i * k + kk];
                            if (av == T(0)) continue;
                            const T* gorow = pgo + bi * o_str + i * n;
                            T* gbrow = pgb + bi * b_str + kk * n;
                            for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
                        }
            }
        });
    }
    return out;
}

// Fused x*A + x*B for a pair of parallel weight banks: [.., k] x ([k,n], [k,n]).
// Each output element accumulates the combined per-k contribution in one
// double accumulator, so when A + B equals some W elementwise the result is
// bit-identical to matmul(x, W). This is what keeps a ternary-weight-split
// model's forward equal to its ternary source.
template <class T>
TensorT<T> matmul_pair(const TensorT<T>& x, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape() || a.ndim() != 2) detail::shape_fail("matmul_pair", a.shape(), b.shape());
    const auto& sx = x.shape();
    const bool x3 = sx.size() == 3;
    if (!(sx.size() == 2 || x3)) detail::shape_fail("matmul_pair", sx, a.shape());
    const int batch = x3 ? sx[0] : 1;
    const int m = x3 ? sx[1] : sx[0];
    const int k = x3 ? sx[2] : sx[1];
    const int n = a.dim(1);
    if (k != a.dim(0)) detail::shape_fail("matmul_pair", sx, a.shape());

    Shape out_shape = x3 ? Shape{batch, m, n} : Shape{m, n};
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const T* px = x.data().data();
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    const std::size_t x_stride = static_cast<std::size_t>(m) * k;
    const std::size_t o_stride = static_cast<std::size_t>(m) * n;
    std::vector<double> acc(static_cast<std::size_t>(n));
    for (int bi = 0; bi < batch; ++bi) {
        const T* X = px + bi * x_stride;
        T* O = po + bi * o_stride;
        for (int i = 0; i < m; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int kk = 0; kk < k; ++kk) {
                const double xv = static_cast<double>(X[i * k + kk]);
                if (xv == 0.0) continue;
                const T* arow = pa + kk * n;
                const T* brow = pb + kk * n;
                for (int j = 0; j < n; ++j)
                    acc[static_cast<std::size_t>(j)] +=
                        xv * static_cast<double>(arow[j]) + xv * static_cast<double>(brow[j]);
            }
            T* orow = O + i * n;
            for (int j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[static_cast<std::size_t>(j)]);
        }
    }
    if (detail::track<T>({&x, &a, &b})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("matmul_pair", {x, a, b}, out, [x, a, b, out, batch, m, k, n]() {
            const std::size_t x_str = static_cast<std::size_t>(m) * k;
            const std::size_t o_str = static_cast<std::size_t>(m) * n;
            const T* pgo = out.grad().data();
            if (x.requires_grad()) {
                auto gx = const_cast<TensorT<T>&>(x);
                gx.ensure_grad();
                T* pgx = gx.grad().data();
                const T* pa2 = a.data().data();
                const T* pb2 = b.data().data();
                for (int bi = 0; bi < batch; ++bi)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const T g = pgo[bi * o_str + i * n + j];
                            if (g == T(0)) continue;
                            T* gxrow = pgx + bi * x_str + i * k;
                            for (int kk = 0; kk < k; ++kk)
                                gxrow[kk] += g * (pa2[kk * n + j] + pb2[kk * n + j]);
                        }
            }
            for (const TensorT<T>* w : {&a, &b}) {
                if (!w->requires_grad()) continue;
                auto gw = const_cast<TensorT<T>&>(*w);
                gw.ensure_grad();
                T* pgw = gw.grad().data();
                const T* px2 = x.data().data();
                for (int bi = 0; bi < batch; ++bi)
                    for (int kk = 0; kk < k; ++kk)
                        for (int i = 0; i < m; ++i) {
                            const T xv = px2[bi * x_str + i * k + kk];
                            if (xv == T(0)) continue;
                            const T* gorow = pgo + bi * o_str + i * n;
                            T* gwrow = pgw + kk * n;
                            for (int j = 0; j < n; ++j) gwrow[j] += xv * gorow[j];
                        }
            }
        });
    }
    return out;
}

// add: identical shapes, or broadcast of a 1-d bias over the last axis.
template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    const bool same = a.shape() == b.shape();
    const bool bias = b.ndim() == 1 && a.ndim() >= 1 && a.shape().back() == b.dim(0);
    if (!same && !bias) detail::shape_fail("add", a.shape(), b.shape());
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    const std::size_t last = static_cast<std::size_t>(a.shape().back());
    for (std::size_t i = 0; i < n; ++i)
        out[i] = a[i] + (same ? b[i] : b[i % last]);
    if (detail::track<T>({&a, &b})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("add", {a, b}, out, [a, b, out, same, last]() {
            const std::size_t n2 = out.numel();
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto ga = const_cast<TensorT<T>&>(a);
                ga.ensure_grad();
                for (std::size_t i = 0; i < n2; ++i) ga.grad()[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = const_cast<TensorT<T>&>(b);
                gb.ensure_grad();
                if (same)
                    for (std::size_t i = 0; i < n2; ++i) gb.grad()[i] += go[i];
                else
                    for (std::size_t i = 0; i < n2; ++i) gb.grad()[i % last] += go[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) detail::shape_fail("sub", a.shape(), b.shape());
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    if (detail::track<T>({&a, &b})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("sub", {a, b}, out, [a, b, out]() {
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto ga = const_cast<TensorT<T>&>(a);
                ga.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga.grad()[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = const_cast<TensorT<T>&>(b);
                gb.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb.grad()[i] -= go[i];
            }
        });
    }
    return out;
}

// Elementwise (Hadamard) product.
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    if (detail::track<T>({&a, &b})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("mul", {a, b}, out, [a, b, out]() {
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto ga = const_cast<TensorT<T>&>(a);
                ga.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga.grad()[i] += go[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = const_cast<TensorT<T>&>(b);
                gb.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb.grad()[i] += go[i] * a[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    if (detail::track<T>({&a})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("scale", {a}, out, [a, out, c]() {
            if (!a.requires_grad()) return;
            auto ga = const_cast<TensorT<T>&>(a);
            ga.ensure_grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga.grad()[i] += go[i] * c;
        });
    }
    return out;
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& dims) {
    const int nd = x.ndim();
    if (static_cast<int>(dims.size()) != nd)
        throw ShapeError("permute: " + std::to_string(dims.size()) + " dims for rank " + std::to_string(nd));
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(dims[static_cast<std::size_t>(i)]);

    std::vector<std::size_t> in_strides(static_cast<std::size_t>(nd), 1), out_strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i) {
        in_strides[i] = in_strides[i + 1] * static_cast<std::size_t>(x.dim(i + 1));
        out_strides[i] = out_strides[i + 1] * static_cast<std::size_t>(out_shape[i + 1]);
    }
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const std::size_t n = x.numel();
    for (std::size_t oi = 0; oi < n; ++oi) {
        std::size_t rem = oi, ii = 0;
        for (int d = 0; d < nd; ++d) {
            const std::size_t idx = rem / out_strides[d];
            rem %= out_strides[d];
            ii += idx * in_strides[static_cast<std::size_t>(dims[static_cast<std::size_t>(d)])];
        }
        out[oi] = x[ii];
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("permute", {x}, out, [x, out, dims, in_strides, out_strides]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            const int nd2 = static_cast<int>(dims.size());
            const std::size_t n2 = out.numel();
            for (std::size_t oi = 0; oi < n2; ++oi) {
                std::size_t rem = oi, ii = 0;
                for (int d = 0; d < nd2; ++d) {
                    const std::size_t idx = rem / out_strides[d];
                    rem %= out_strides[d];
                    ii += idx * in_strides[static_cast<std::size_t>(dims[static_cast<std::size_t>(d)])];
                }
                gx.grad()[ii] += out.grad()[oi];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> transpose2d(const TensorT<T>& x) {
    if (x.ndim() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        detail::shape_fail("reshape", x.shape(), new_shape);
    TensorT<T> out(new_shape, x.data());
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("reshape", {x}, out, [x, out]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            const auto& go = out.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx.grad()[i] += go[i];
        });
    }
    return out;
}

// Softmax over the last axis, max-shifted for stability.
template <class T>
TensorT<T> row_softmax(const TensorT<T>& x) {
    if (x.ndim() < 1) throw ShapeError("row_softmax: rank 0 input");
    const std::size_t cols = static_cast<std::size_t>(x.shape().back());
    const std::size_t rows = x.numel() / cols;
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T* o = out.data().data() + r * cols;
        T mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("row_softmax", {x}, out, [x, out, rows, cols]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = out.data().data() + r * cols;
                const T* gy = out.grad().data() + r * cols;
                T dot = T(0);
                for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                T* g = gx.grad().data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) g[c] += y[c] * (gy[c] - dot);
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> row_log_softmax(const TensorT<T>& x) {
    if (x.ndim() < 1) throw ShapeError("row_log_softmax: rank 0 input");
    const std::size_t cols = static_cast<std::size_t>(x.shape().back());
    const std::size_t rows = x.numel() / cols;
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T* o = out.data().data() + r * cols;
        T mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) sum += std::exp(in[c] - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("row_log_softmax", {x}, out, [x, out, rows, cols]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = out.data().data() + r * cols;
                const T* gy = out.grad().data() + r * cols;
                T gsum = T(0);
                for (std::size_t c = 0; c < cols; ++c) gsum += gy[c];
                T* g = gx.grad().data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) g[c] += gy[c] - std::exp(y[c]) * gsum;
            }
        });
    }
    return out;
}

// Layer normalization over the last axis with affine (gamma, beta).
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps = T(1e-5)) {
    const std::size_t cols = static_cast<std::size_t>(x.shape().back());
    if (gamma.numel() != cols || beta.numel() != cols)
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match last axis of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / cols;
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * cols;
        T mean = T(0);
        for (std::size_t c = 0; c < cols; ++c) mean += in[c];
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = in[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        T* o = out.data().data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            const T h = (in[c] - mean) * istd;
            xhat[r * cols + c] = h;
            o[c] = gamma[c] * h + beta[c];
        }
    }
    if (detail::track<T>({&x, &gamma, &beta})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("layer_norm", {x, gamma, beta}, out,
                                    [x, gamma, beta, out, rows, cols, xhat = std::move(xhat),
                                     inv_std = std::move(inv_std)]() {
            const auto& go = out.grad();
            if (gamma.requires_grad()) {
                auto gg = const_cast<TensorT<T>&>(gamma);
                gg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gg.grad()[c] += go[r * cols + c] * xhat[r * cols + c];
            }
            if (beta.requires_grad()) {
                auto gb = const_cast<TensorT<T>&>(beta);
                gb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb.grad()[c] += go[r * cols + c];
            }
            if (x.requires_grad()) {
                auto gx = const_cast<TensorT<T>&>(x);
                gx.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T sum_g = T(0), sum_gh = T(0);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T gy = go[r * cols + c] * gamma[c];
                        sum_g += gy;
                        sum_gh += gy * xhat[r * cols + c];
                    }
                    const T inv_n = T(1) / static_cast<T>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T gy = go[r * cols + c] * gamma[c];
                        gx.grad()[r * cols + c] +=
                            inv_std[r] * (gy - inv_n * sum_g - xhat[r * cols + c] * inv_n * sum_gh);
                    }
                }
            }
        });
    }
    return out;
}

// GELU, tanh approximation. The inner cubic uses the conventional
// coefficient 0.044715.
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = static_cast<double>(x[i]);
        const double u = kC * (v + kA * v * v * v);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("gelu", {x}, out, [x, out]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double v = static_cast<double>(x[i]);
                const double u = kC * (v + kA * v * v * v);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                gx.grad()[i] += out.grad()[i] * static_cast<T>(d);
            }
        });
    }
    return out;
}

// Table lookup: ids indexes rows of table [vocab, width]; out shape = [rows(ids), width]
// with ids given as a flat index list plus its logical shape.
template <class T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<int>& ids, const Shape& ids_shape) {
    if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
    if (ids.size() != shape_numel(ids_shape))
        throw ShapeError("embedding_lookup: " + std::to_string(ids.size()) + " ids for shape " + shape_str(ids_shape));
    const int vocab = table.dim(0);
    const std::size_t width = static_cast<std::size_t>(table.dim(1));
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= vocab)
            throw DataError("embedding_lookup: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                            " out of range [0," + std::to_string(vocab) + ")");
    Shape out_shape = ids_shape;
    out_shape.push_back(static_cast<int>(width));
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * width, width,
                    out.data().data() + i * width);
    if (detail::track<T>({&table})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("embedding_lookup", {table}, out, [table, out, ids, width]() {
            if (!table.requires_grad()) return;
            auto gt = const_cast<TensorT<T>&>(table);
            gt.ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* dst = gt.grad().data() + static_cast<std::size_t>(ids[i]) * width;
                const T* src = out.grad().data() + i * width;
                for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> reduce_sum(const TensorT<T>& x) {
    T s = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
    TensorT<T> out({1}, {s});
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("reduce_sum", {x}, out, [x, out]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            const T g = out.grad()[0];
            for (std::size_t i = 0; i < x.numel(); ++i) gx.grad()[i] += g;
        });
    }
    return out;
}

template <class T>
TensorT<T> reduce_mean(const TensorT<T>& x) {
    if (x.numel() == 0) throw ShapeError("reduce_mean: empty tensor");
    T s = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
    const T inv = T(1) / static_cast<T>(x.numel());
    TensorT<T> out({1}, {s * inv});
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("reduce_mean", {x}, out, [x, out, inv]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            const T g = out.grad()[0] * inv;
            for (std::size_t i = 0; i < x.numel(); ++i) gx.grad()[i] += g;
        });
    }
    return out;
}

// Mean over all axes but the first: [n, ...] -> [n].
template <class T>
TensorT<T> per_sample_mean(const TensorT<T>& x) {
    if (x.ndim() < 2) throw ShapeError("per_sample_mean: need rank >= 2, got " + shape_str(x.shape()));
    const std::size_t n = static_cast<std::size_t>(x.dim(0));
    const std::size_t inner = x.numel() / n;
    TensorT<T> out = TensorT<T>::zeros({static_cast<int>(n)});
    const T inv = T(1) / static_cast<T>(inner);
    for (std::size_t i = 0; i < n; ++i) {
        T s = T(0);
        const T* p = x.data().data() + i * inner;
        for (std::size_t j = 0; j < inner; ++j) s += p[j];
        out[i] = s * inv;
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("per_sample_mean", {x}, out, [x, out, n, inner, inv]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T g = out.grad()[i] * inv;
                T* p = gx.grad().data() + i * inner;
                for (std::size_t j = 0; j < inner; ++j) p[j] += g;
            }
        });
    }
    return out;
}

// Elementwise clamp to [lo, hi]; gradient passes through the closed interior.
template <class T>
TensorT<T> clip(const TensorT<T>& x, T lo, T hi) {
    if (lo > hi) throw ShapeError("clip: lo > hi");
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::min(hi, std::max(lo, x[i]));
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("clip", {x}, out, [x, out, lo, hi]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < x.numel(); ++i)
                if (x[i] >= lo && x[i] <= hi) gx.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

// Elementwise max against a constant; gradient passes where x wins.
template <class T>
TensorT<T> cmax(const TensorT<T>& x, T c) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::max(x[i], c);
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("cmax", {x}, out, [x, out, c]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < x.numel(); ++i)
                if (x[i] >= c) gx.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

// out[i] = x[i, idx[i]] for a rank-2 input.
template <class T>
TensorT<T> row_gather(const TensorT<T>& x, const std::vector<int>& idx) {
    if (x.ndim() != 2) throw ShapeError("row_gather: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = static_cast<std::size_t>(x.dim(0));
    const std::size_t cols = static_cast<std::size_t>(x.dim(1));
    if (idx.size() != rows)
        throw ShapeError("row_gather: " + std::to_string(idx.size()) + " indices for " + std::to_string(rows) + " rows");
    for (std::size_t i = 0; i < rows; ++i)
        if (idx[i] < 0 || idx[i] >= static_cast<int>(cols))
            throw DataError("row_gather: index " + std::to_string(idx[i]) + " at row " + std::to_string(i) +
                            " out of range [0," + std::to_string(cols) + ")");
    TensorT<T> out = TensorT<T>::zeros({static_cast<int>(rows)});
    for (std::size_t i = 0; i < rows; ++i) out[i] = x[i * cols + static_cast<std::size_t>(idx[i])];
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("row_gather", {x}, out, [x, out, idx, cols]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                gx.grad()[i * cols + static_cast<std::size_t>(idx[i])] += out.grad()[i];
        });
    }
    return out;
}

// Mean over unmasked sequence positions: x [b,s,h], mask [b,s] in {0,1} -> [b,h].
// Rows whose mask is all zero pool to zero.
template <class T>
TensorT<T> masked_mean_pool(const TensorT<T>& x, const TensorT<T>& mask) {
    if (x.ndim() != 3 || mask.ndim() != 2 || x.dim(0) != mask.dim(0) || x.dim(1) != mask.dim(1))
        detail::shape_fail("masked_mean_pool", x.shape(), mask.shape());
    const std::size_t b = static_cast<std::size_t>(x.dim(0));
    const std::size_t s = static_cast<std::size_t>(x.dim(1));
    const std::size_t h = static_cast<std::size_t>(x.dim(2));
    TensorT<T> out = TensorT<T>::zeros({static_cast<int>(b), static_cast<int>(h)});
    std::vector<T> inv_count(b, T(0));
    for (std::size_t i = 0; i < b; ++i) {
        T cnt = T(0);
        for (std::size_t j = 0; j < s; ++j) cnt += mask[i * s + j];
        inv_count[i] = cnt > T(0) ? T(1) / cnt : T(0);
        for (std::size_t j = 0; j < s; ++j) {
            const T m = mask[i * s + j];
            if (m == T(0)) continue;
            const T* p = x.data().data() + (i * s + j) * h;
            T* o = out.data().data() + i * h;
            for (std::size_t c = 0; c < h; ++c) o[c] += m * p[c];
        }
        for (std::size_t c = 0; c < h; ++c) out[i * h + c] *= inv_count[i];
    }
    if (detail::track<T>({&x})) {
        detail::mark_output(out);
        TapeT<T>::current()->record("masked_mean_pool", {x}, out,
                                    [x, mask, out, b, s, h, inv_count = std::move(inv_count)]() {
            if (!x.requires_grad()) return;
            auto gx = const_cast<TensorT<T>&>(x);
            gx.ensure_grad();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < s; ++j) {
                    const T m = mask[i * s + j];
                    if (m == T(0)) continue;
                    const T w = m * inv_count[i];
                    T* p = gx.grad().data() + (i * s + j) * h;
                    const T* g = out.grad().data() + i * h;
                    for (std::size_t c = 0; c < h; ++c) p[c] += w * g[c];
                }
        });
    }
    return out;
}

// Convenience scalar loss driver.
template <class T>
void backprop(TapeT<T>& tape, TensorT<T>& loss) {
    tape.backprop(loss);
}

// Central-difference gradient oracle: g_k = (f(x+eps e_k) - f(x-eps e_k)) / (2 eps).
// f receives the same tensor with one coordinate perturbed in place.
template <class T>
TensorT<T> finite_diff_grad(const std::function<T(TensorT<T>&)>& f, TensorT<T>& x, T eps) {
    if (!(eps > T(0))) throw ConfigError("finite_diff_grad: eps must be > 0");
    TensorT<T> g = TensorT<T>::zeros(x.shape());
    for (std::size_t k = 0; k < x.numel(); ++k) {
        const T old = x[k];
        x[k] = old + eps;
        const T fp = f(x);
        x[k] = old - eps;
        const T fm = f(x);
        x[k] = old;
        g[k] = (fp - fm) / (T(2) * eps);
    }
    return g;
}

}  // namespace binens
