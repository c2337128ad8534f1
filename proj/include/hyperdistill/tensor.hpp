#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <hyperdistill/rng.hpp>

namespace hyperdistill {

// ---------------------------------------------------------------------------
// Dense row-major 64-bit tensors plus a reverse-mode tape.
//
// Scope is deliberately small: rank 1 and 2 only, no views, no strides.
// Every differentiable operation is a tape primitive with a hand-written
// adjoint; backward walks the tape in reverse creation order, which is a
// valid reverse topological order because an operation is always recorded
// after its inputs.
// ---------------------------------------------------------------------------

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

class TapeError : public std::runtime_error {
public:
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ')';
    return os.str();
}

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

class Tensor {
public:
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_size(shape_) != values_.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                             std::to_string(values_.size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor vector(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
        return Tensor({r, c}, std::move(v));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.values_.begin(), t.values_.end(), v);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : t.values_) x = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (double& x : t.values_) x = rng.uniform(lo, hi);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    bool is_scalar() const { return values_.size() == 1; }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : shape_.empty() ? 0 : shape_[0]; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& operator()(std::size_t i, std::size_t j) {
        assert(rank() == 2);
        return values_[i * shape_[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        assert(rank() == 2);
        return values_[i * shape_[1] + j];
    }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    bool all_finite() const {
        for (double v : values_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Multiply counter. Counts the multiplies of matrix-product primitives only
// (the quantity the linear-layer FLOPs convention is defined over); element-
// wise scaling, activations and normalizations are excluded on both sides of
// the analytic-vs-instrumented comparison.
// ---------------------------------------------------------------------------

inline std::uint64_t& multiply_counter() {
    thread_local std::uint64_t count = 0;
    return count;
}

inline void reset_multiply_counter() { multiply_counter() = 0; }
inline void count_multiplies(std::uint64_t n) { multiply_counter() += n; }

// Plain (untaped) matrix product helper shared with compiled-policy execution.
// a: m x k, b: k x n, out: m x n (accumulated as out = a*b).
inline void matmul_into(const double* a, const double* b, double* out,
                        std::size_t m, std::size_t k, std::size_t n) {
    std::fill(out, out + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    count_multiplies(static_cast<std::uint64_t>(m) * k * n);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class Op : std::uint8_t {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_rowvec,
    tanh_fn,
    relu,
    exp_fn,
    clamp,
    reduce_mean_axis0,
    reduce_mean_axis1,
    reduce_sum_all,
    reduce_mean_all,
    softmax_rows,
    layernorm_rows,
    dropout,
    reshape,
    transpose,
    concat_rows,
    slice_cols,
    tile,
};

enum class DropoutMode : std::uint8_t { train, eval };

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

// Gradients keyed by leaf node id, in leaf creation order.
class GradientMap {
public:
    void add(int id, Tensor grad) { entries_.emplace_back(id, std::move(grad)); }

    bool contains(Var v) const {
        return std::any_of(entries_.begin(), entries_.end(),
                           [&](const auto& e) { return e.first == v.id; });
    }

    const Tensor& at(Var v) const {
        for (const auto& e : entries_) {
            if (e.first == v.id) return e.second;
        }
        throw TapeError("gradient map: no entry for node " + std::to_string(v.id));
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<std::pair<int, Tensor>> entries_;
};

class Tape {
public:
    struct Node {
        Tensor value;
        Op op = Op::constant;
        bool needs_grad = false;
        int a = -1, b = -1, c = -1;
        std::vector<int> inputs;    // concat_rows only
        double s0 = 0.0, s1 = 0.0;  // scale factor, clamp bounds, slice window
        std::vector<double> aux;    // dropout mask / layernorm row stats
    };

    // Leaf: tracked iff the tensor asks for gradients.
    Var leaf(const Tensor& t) {
        Node n;
        n.value = t;
        n.op = Op::leaf;
        n.needs_grad = t.requires_grad;
        return push(std::move(n));
    }

    Var constant(Tensor t) {
        Node n;
        n.value = std::move(t);
        n.op = Op::constant;
        n.needs_grad = false;
        return push(std::move(n));
    }

    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    std::size_t size() const { return nodes_.size(); }

    // Reverse pass from a scalar loss. Deterministic: fixed reverse creation
    // order, fixed accumulation order.
    GradientMap backward(Var loss) {
        std::size_t li = check(loss);
        if (!nodes_[li].value.is_scalar()) {
            throw TapeError("backward: loss must be scalar, got shape " +
                            shape_str(nodes_[li].value.shape()));
        }
        std::vector<std::vector<double>> grads(nodes_.size());
        if (nodes_[li].needs_grad) {
            grads[li].assign(1, 1.0);
        }
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (grads[i].empty() || !nodes_[i].needs_grad) continue;
            propagate(static_cast<int>(i), grads);
        }
        GradientMap out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].op == Op::leaf && nodes_[i].needs_grad && !grads[i].empty()) {
                out.add(static_cast<int>(i), Tensor(nodes_[i].value.shape(), std::move(grads[i])));
            }
        }
        return out;
    }

    // Used by the op primitives below; not part of the user-facing surface.
    bool needs(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Var push(Node n) {
#ifndef NDEBUG
        assert(n.value.all_finite() && "tape op produced non-finite values");
#endif
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size() - 1)};
    }

private:
    std::vector<Node> nodes_;

    std::size_t check(Var v) const {
        if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw TapeError("variable does not belong to this tape");
        }
        return static_cast<std::size_t>(v.id);
    }

    static void axpy(std::vector<double>& dst, std::size_t size, const double* src, double s = 1.0) {
        if (dst.empty()) dst.assign(size, 0.0);
        for (std::size_t i = 0; i < size; ++i) dst[i] += s * src[i];
    }

    void propagate(int idx, std::vector<std::vector<double>>& grads);
};

namespace detail {

inline Tape* same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw TapeError("operands recorded on different tapes");
    }
    return a.tape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward definitions of the primitives
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Tape* t = detail::same_tape(a, b);
    const Tensor& A = t->value(a);
    const Tensor& B = t->value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
    }
    std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
    Tensor out({m, n});
    matmul_into(A.values().data(), B.values().data(), out.values().data(), m, k, n);
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::matmul;
    node.a = a.id;
    node.b = b.id;
    node.needs_grad = t->needs(a.id) || t->needs(b.id);
    return t->push(std::move(node));
}

namespace detail {

enum class Broadcast { none, left_scalar, right_scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* opname) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (a.is_scalar()) return Broadcast::left_scalar;
    if (b.is_scalar()) return Broadcast::right_scalar;
    throw ShapeError(std::string(opname) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
}

template <typename F>
Var binary_elementwise(Var a, Var b, Op op, const char* name, F&& f) {
    Tape* t = same_tape(a, b);
    const Tensor& A = t->value(a);
    const Tensor& B = t->value(b);
    Broadcast bc = broadcast_kind(A, B, name);
    const Tensor& big = (bc == Broadcast::left_scalar) ? B : A;
    Tensor out(big.shape());
    std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        double av = (bc == Broadcast::left_scalar) ? A[0] : A[i];
        double bv = (bc == Broadcast::right_scalar) ? B[0] : B[i];
        out[i] = f(av, bv);
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = op;
    node.a = a.id;
    node.b = b.id;
    node.needs_grad = t->needs(a.id) || t->needs(b.id);
    return t->push(std::move(node));
}

}  // namespace detail

inline Var add(Var a, Var b) {
    return detail::binary_elementwise(a, b, Op::add, "add", [](double x, double y) { return x + y; });
}

inline Var sub(Var a, Var b) {
    return detail::binary_elementwise(a, b, Op::sub, "sub", [](double x, double y) { return x - y; });
}

inline Var mul(Var a, Var b) {
    return detail::binary_elementwise(a, b, Op::mul, "mul", [](double x, double y) { return x * y; });
}

inline Var scale(Var a, double s) {
    Tape* t = a.tape;
    Tensor out = t->value(a);
    for (double& v : out.values()) v *= s;
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::scale;
    node.a = a.id;
    node.s0 = s;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// matrix (r x c) plus a length-c vector added to every row
inline Var add_rowvec(Var m, Var v) {
    Tape* t = detail::same_tape(m, v);
    const Tensor& M = t->value(m);
    const Tensor& V = t->value(v);
    if (M.rank() != 2 || V.rank() != 1 || M.shape()[1] != V.shape()[0]) {
        throw ShapeError("add_rowvec: incompatible shapes " + shape_str(M.shape()) + " and " +
                         shape_str(V.shape()));
    }
    Tensor out = M;
    std::size_t r = M.shape()[0], c = M.shape()[1];
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += V[j];
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::add_rowvec;
    node.a = m.id;
    node.b = v.id;
    node.needs_grad = t->needs(m.id) || t->needs(v.id);
    return t->push(std::move(node));
}

namespace detail {

template <typename F>
Var unary_elementwise(Var a, Op op, F&& f) {
    Tape* t = a.tape;
    Tensor out = t->value(a);
    for (double& v : out.values()) v = f(v);
    Tape::Node node;
    node.value = std::move(out);
    node.op = op;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

}  // namespace detail

inline Var vtanh(Var a) {
    return detail::unary_elementwise(a, Op::tanh_fn, [](double x) { return std::tanh(x); });
}

inline Var relu(Var a) {
    return detail::unary_elementwise(a, Op::relu, [](double x) { return x > 0.0 ? x : 0.0; });
}

inline Var vexp(Var a) {
    return detail::unary_elementwise(a, Op::exp_fn, [](double x) { return std::exp(x); });
}

inline Var clamp(Var a, double lo, double hi) {
    Tape* t = a.tape;
    Tensor out = t->value(a);
    for (double& v : out.values()) v = std::min(std::max(v, lo), hi);
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::clamp;
    node.a = a.id;
    node.s0 = lo;
    node.s1 = hi;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// axis 0: column means (length cols); axis 1: row means (length rows)
inline Var reduce_mean(Var a, int axis) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    if (A.rank() != 2 || (axis != 0 && axis != 1)) {
        throw ShapeError("reduce_mean: need a matrix and axis 0 or 1, got " +
                         shape_str(A.shape()) + " axis " + std::to_string(axis));
    }
    std::size_t r = A.shape()[0], c = A.shape()[1];
    Tensor out({axis == 0 ? c : r});
    if (axis == 0) {
        for (std::size_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < r; ++i) s += A(i, j);
            out[j] = s / static_cast<double>(r);
        }
    } else {
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += A(i, j);
            out[i] = s / static_cast<double>(c);
        }
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = axis == 0 ? Op::reduce_mean_axis0 : Op::reduce_mean_axis1;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

inline Var reduce_sum_all(Var a) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    double s = std::accumulate(A.values().begin(), A.values().end(), 0.0);
    Tape::Node node;
    node.value = Tensor::scalar(s);
    node.op = Op::reduce_sum_all;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

inline Var reduce_mean_all(Var a) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    double s = std::accumulate(A.values().begin(), A.values().end(), 0.0);
    Tape::Node node;
    node.value = Tensor::scalar(s / static_cast<double>(A.size()));
    node.op = Op::reduce_mean_all;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// numerically stabilized by row-max subtraction
inline Var softmax_rows(Var a) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    if (A.rank() != 2) {
        throw ShapeError("softmax_rows: need a matrix, got " + shape_str(A.shape()));
    }
    std::size_t r = A.shape()[0], c = A.shape()[1];
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        double mx = A(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, A(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double e = std::exp(A(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < c; ++j) out(i, j) /= sum;
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::softmax_rows;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// per-row: gain * (x - mean) / sqrt(var + eps) + bias
inline Var layernorm_rows(Var x, Var gain, Var bias) {
    Tape* t = detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    const Tensor& X = t->value(x);
    const Tensor& G = t->value(gain);
    const Tensor& B = t->value(bias);
    if (X.rank() != 2 || G.rank() != 1 || B.rank() != 1 || G.shape()[0] != X.shape()[1] ||
        B.shape()[0] != X.shape()[1]) {
        throw ShapeError("layernorm_rows: incompatible shapes " + shape_str(X.shape()) + ", " +
                         shape_str(G.shape()) + ", " + shape_str(B.shape()));
    }
    constexpr double kEps = 1e-5;
    std::size_t r = X.shape()[0], c = X.shape()[1];
    Tensor out({r, c});
    std::vector<double> aux;            // per row: [normalized row..., inv_std]
    aux.reserve(r * (c + 1));
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += X(i, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double d = X(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double inv_std = 1.0 / std::sqrt(var + kEps);
        for (std::size_t j = 0; j < c; ++j) {
            double xn = (X(i, j) - mean) * inv_std;
            aux.push_back(xn);
            out(i, j) = G[j] * xn + B[j];
        }
        aux.push_back(inv_std);
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::layernorm_rows;
    node.a = x.id;
    node.b = gain.id;
    node.c = bias.id;
    node.aux = std::move(aux);
    node.needs_grad = t->nodes_[x.id].needs_grad || t->nodes_[gain.id].needs_grad ||
                      t->nodes_[bias.id].needs_grad;
    return t->push(std::move(node));
}

// Inverted dropout: survivors scaled by 1/(1-p) at train time, eval is identity.
inline Var dropout(Var a, double p, DropoutMode mode, Rng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("dropout: p must be in [0, 1), got " + std::to_string(p));
    }
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    Tape::Node node;
    node.op = Op::dropout;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    if (mode == DropoutMode::eval || p == 0.0) {
        node.value = A;
        node.aux.assign(A.size(), 1.0);
        return t->push(std::move(node));
    }
    double keep_scale = 1.0 / (1.0 - p);
    Tensor out(A.shape());
    node.aux.resize(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) {
        double m = (rng.uniform() < p) ? 0.0 : keep_scale;
        node.aux[i] = m;
        out[i] = A[i] * m;
    }
    node.value = std::move(out);
    return t->push(std::move(node));
}

inline Var reshape(Var a, Shape shape) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    if (shape_size(shape) != A.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(A.shape()) + " as " +
                         shape_str(shape));
    }
    Tape::Node node;
    node.value = Tensor(std::move(shape), A.values());
    node.op = Op::reshape;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

inline Var transpose(Var a) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    if (A.rank() != 2) {
        throw ShapeError("transpose: need a matrix, got " + shape_str(A.shape()));
    }
    std::size_t r = A.shape()[0], c = A.shape()[1];
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out(j, i) = A(i, j);
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::transpose;
    node.a = a.id;
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// stacks matrices with equal column counts along axis 0
inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: empty input list");
    }
    Tape* t = parts[0].tape;
    std::size_t c = t->value(parts[0]).shape().back();
    std::size_t total_rows = 0;
    bool needs = false;
    for (Var p : parts) {
        detail::same_tape(parts[0], p);
        const Tensor& P = t->value(p);
        if (P.rank() != 2 || P.shape()[1] != c) {
            throw ShapeError("concat_rows: inconsistent shapes, expected columns " +
                             std::to_string(c) + ", got " + shape_str(P.shape()));
        }
        total_rows += P.shape()[0];
        needs = needs || t->needs(p.id);
    }
    Tensor out({total_rows, c});
    std::size_t row = 0;
    for (Var p : parts) {
        const Tensor& P = t->value(p);
        std::copy(P.values().begin(), P.values().end(), out.values().begin() + row * c);
        row += P.shape()[0];
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::concat_rows;
    node.inputs.reserve(parts.size());
    for (Var p : parts) node.inputs.push_back(p.id);
    node.needs_grad = needs;
    return t->push(std::move(node));
}

inline Var slice_cols(Var a, std::size_t from, std::size_t to) {
    Tape* t = a.tape;
    const Tensor& A = t->value(a);
    if (A.rank() != 2 || from >= to || to > A.shape()[1]) {
        throw ShapeError("slice_cols: window [" + std::to_string(from) + ", " +
                         std::to_string(to) + ") invalid for " + shape_str(A.shape()));
    }
    std::size_t r = A.shape()[0], c = A.shape()[1], w = to - from;
    Tensor out({r, w});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < w; ++j) out(i, j) = A(i, from + j);
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::slice_cols;
    node.a = a.id;
    node.s0 = static_cast<double>(from);
    node.s1 = static_cast<double>(c);
    node.needs_grad = t->needs(a.id);
    return t->push(std::move(node));
}

// vector repeated end-to-end; adjoint sums the repeats back
inline Var tile(Var v, std::size_t repeats) {
    Tape* t = v.tape;
    const Tensor& V = t->value(v);
    if (V.rank() != 1 || repeats == 0) {
        throw ShapeError("tile: need a vector and repeats > 0, got " + shape_str(V.shape()));
    }
    std::size_t n = V.shape()[0];
    Tensor out({n * repeats});
    for (std::size_t k = 0; k < repeats; ++k) {
        std::copy(V.values().begin(), V.values().end(), out.values().begin() + k * n);
    }
    Tape::Node node;
    node.value = std::move(out);
    node.op = Op::tile;
    node.a = v.id;
    node.needs_grad = t->needs(v.id);
    return t->push(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward dispatch
// ---------------------------------------------------------------------------

inline void Tape::propagate(int idx, std::vector<std::vector<double>>& grads) {
    Node& n = nodes_[idx];
    const std::vector<double>& g = grads[idx];

    auto in_needs = [&](int id) { return id >= 0 && nodes_[id].needs_grad; };

    auto accumulate_broadcast = [&](int id, const Tensor& operand, auto&& per_element) {
        // operand may be scalar-broadcast against the output
        if (!in_needs(id)) return;
        std::size_t out_size = n.value.size();
        if (operand.is_scalar() && out_size != 1) {
            double s = 0.0;
            for (std::size_t i = 0; i < out_size; ++i) s += per_element(i);
            if (grads[id].empty()) grads[id].assign(1, 0.0);
            grads[id][0] += s;
        } else {
            if (grads[id].empty()) grads[id].assign(out_size, 0.0);
            for (std::size_t i = 0; i < out_size; ++i) grads[id][i] += per_element(i);
        }
    };

    switch (n.op) {
        case Op::leaf:
        case Op::constant:
            break;

        case Op::matmul: {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            std::size_t m = A.shape()[0], k = A.shape()[1], c = B.shape()[1];
            if (in_needs(n.a)) {
                // dA = g * B^T
                if (grads[n.a].empty()) grads[n.a].assign(m * k, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        double gv = g[i * c + j];
                        if (gv == 0.0) continue;
                        const double* brow = B.values().data() + j;
                        for (std::size_t p = 0; p < k; ++p) {
                            grads[n.a][i * k + p] += gv * brow[p * c];
                        }
                    }
                }
            }
            if (in_needs(n.b)) {
                // dB = A^T * g
                if (grads[n.b].empty()) grads[n.b].assign(k * c, 0.0);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = A.values().data() + i * k;
                    const double* grow = g.data() + i * c;
                    for (std::size_t p = 0; p < k; ++p) {
                        double av = arow[p];
                        if (av == 0.0) continue;
                        double* drow = grads[n.b].data() + p * c;
                        for (std::size_t j = 0; j < c; ++j) drow[j] += av * grow[j];
                    }
                }
            }
            break;
        }

        case Op::add:
            accumulate_broadcast(n.a, nodes_[n.a].value, [&](std::size_t i) { return g[i]; });
            accumulate_broadcast(n.b, nodes_[n.b].value, [&](std::size_t i) { return g[i]; });
            break;

        case Op::sub:
            accumulate_broadcast(n.a, nodes_[n.a].value, [&](std::size_t i) { return g[i]; });
            accumulate_broadcast(n.b, nodes_[n.b].value, [&](std::size_t i) { return -g[i]; });
            break;

        case Op::mul: {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            accumulate_broadcast(n.a, A, [&](std::size_t i) {
                return g[i] * (B.is_scalar() ? B[0] : B[i]);
            });
            accumulate_broadcast(n.b, B, [&](std::size_t i) {
                return g[i] * (A.is_scalar() ? A[0] : A[i]);
            });
            break;
        }

        case Op::scale:
            if (in_needs(n.a)) {
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) grads[n.a][i] += n.s0 * g[i];
            }
            break;

        case Op::add_rowvec: {
            std::size_t r = n.value.shape()[0], c = n.value.shape()[1];
            if (in_needs(n.a)) axpy(grads[n.a], r * c, g.data());
            if (in_needs(n.b)) {
                if (grads[n.b].empty()) grads[n.b].assign(c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.b][j] += g[i * c + j];
                }
            }
            break;
        }

        case Op::tanh_fn:
            if (in_needs(n.a)) {
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    double y = n.value[i];
                    grads[n.a][i] += g[i] * (1.0 - y * y);
                }
            }
            break;

        case Op::relu:
            if (in_needs(n.a)) {
                const Tensor& A = nodes_[n.a].value;
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    grads[n.a][i] += A[i] > 0.0 ? g[i] : 0.0;
                }
            }
            break;

        case Op::exp_fn:
            if (in_needs(n.a)) {
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) grads[n.a][i] += g[i] * n.value[i];
            }
            break;

        case Op::clamp:
            if (in_needs(n.a)) {
                const Tensor& A = nodes_[n.a].value;
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (A[i] > n.s0 && A[i] < n.s1) grads[n.a][i] += g[i];
                }
            }
            break;

        case Op::reduce_mean_axis0: {
            if (in_needs(n.a)) {
                const Tensor& A = nodes_[n.a].value;
                std::size_t r = A.shape()[0], c = A.shape()[1];
                double inv = 1.0 / static_cast<double>(r);
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.a][i * c + j] += g[j] * inv;
                }
            }
            break;
        }

        case Op::reduce_mean_axis1: {
            if (in_needs(n.a)) {
                const Tensor& A = nodes_[n.a].value;
                std::size_t r = A.shape()[0], c = A.shape()[1];
                double inv = 1.0 / static_cast<double>(c);
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.a][i * c + j] += g[i] * inv;
                }
            }
            break;
        }

        case Op::reduce_sum_all:
            if (in_needs(n.a)) {
                std::size_t sz = nodes_[n.a].value.size();
                if (grads[n.a].empty()) grads[n.a].assign(sz, 0.0);
                for (std::size_t i = 0; i < sz; ++i) grads[n.a][i] += g[0];
            }
            break;

        case Op::reduce_mean_all:
            if (in_needs(n.a)) {
                std::size_t sz = nodes_[n.a].value.size();
                double inv = 1.0 / static_cast<double>(sz);
                if (grads[n.a].empty()) grads[n.a].assign(sz, 0.0);
                for (std::size_t i = 0; i < sz; ++i) grads[n.a][i] += g[0] * inv;
            }
            break;

        case Op::softmax_rows: {
            if (in_needs(n.a)) {
                std::size_t r = n.value.shape()[0], c = n.value.shape()[1];
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * n.value(i, j);
                    for (std::size_t j = 0; j < c; ++j) {
                        grads[n.a][i * c + j] += n.value(i, j) * (g[i * c + j] - dot);
                    }
                }
            }
            break;
        }

        case Op::layernorm_rows: {
            std::size_t r = n.value.shape()[0], c = n.value.shape()[1];
            const Tensor& G = nodes_[n.b].value;
            auto xn = [&](std::size_t i, std::size_t j) { return n.aux[i * (c + 1) + j]; };
            auto inv_std = [&](std::size_t i) { return n.aux[i * (c + 1) + c]; };
            if (in_needs(n.b)) {
                if (grads[n.b].empty()) grads[n.b].assign(c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.b][j] += g[i * c + j] * xn(i, j);
                }
            }
            if (in_needs(n.c)) {
                if (grads[n.c].empty()) grads[n.c].assign(c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.c][j] += g[i * c + j];
                }
            }
            if (in_needs(n.a)) {
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                std::vector<double> u(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double mean_u = 0.0, mean_uxn = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        u[j] = g[i * c + j] * G[j];
                        mean_u += u[j];
                        mean_uxn += u[j] * xn(i, j);
                    }
                    mean_u /= static_cast<double>(c);
                    mean_uxn /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        grads[n.a][i * c + j] +=
                            inv_std(i) * (u[j] - mean_u - xn(i, j) * mean_uxn);
                    }
                }
            }
            break;
        }

        case Op::dropout:
            if (in_needs(n.a)) {
                if (grads[n.a].empty()) grads[n.a].assign(g.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) grads[n.a][i] += g[i] * n.aux[i];
            }
            break;

        case Op::reshape:
            if (in_needs(n.a)) axpy(grads[n.a], g.size(), g.data());
            break;

        case Op::transpose: {
            if (in_needs(n.a)) {
                std::size_t r = n.value.shape()[0], c = n.value.shape()[1];  // output dims
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) grads[n.a][j * r + i] += g[i * c + j];
                }
            }
            break;
        }

        case Op::concat_rows: {
            std::size_t c = n.value.shape()[1];
            std::size_t row = 0;
            for (int id : n.inputs) {
                std::size_t pr = nodes_[id].value.shape()[0];
                if (in_needs(id)) {
                    if (grads[id].empty()) grads[id].assign(pr * c, 0.0);
                    for (std::size_t i = 0; i < pr * c; ++i) {
                        grads[id][i] += g[row * c + i];
                    }
                }
                row += pr;
            }
            break;
        }

        case Op::slice_cols: {
            if (in_needs(n.a)) {
                std::size_t r = n.value.shape()[0], w = n.value.shape()[1];
                std::size_t from = static_cast<std::size_t>(n.s0);
                std::size_t c = static_cast<std::size_t>(n.s1);
                if (grads[n.a].empty()) grads[n.a].assign(r * c, 0.0);
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        grads[n.a][i * c + from + j] += g[i * w + j];
                    }
                }
            }
            break;
        }

        case Op::tile: {
            if (in_needs(n.a)) {
                std::size_t len = nodes_[n.a].value.size();
                std::size_t repeats = n.value.size() / len;
                if (grads[n.a].empty()) grads[n.a].assign(len, 0.0);
                for (std::size_t k = 0; k < repeats; ++k) {
                    for (std::size_t j = 0; j < len; ++j) grads[n.a][j] += g[k * len + j];
                }
            }
            break;
        }
    }
}

}  // namespace hyperdistill
