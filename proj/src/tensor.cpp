#include "amc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace amc {

namespace {

// Graph tensors routinely cross glibc's default 128 KiB mmap threshold;
// without this every fusion-width buffer costs an mmap/munmap pair.
[[maybe_unused]] const bool malloc_tuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
    return true;
}();

} // namespace

namespace detail {

std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

namespace {

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

void check_shape(const std::vector<std::size_t>& s, const char* who) {
    for (auto d : s)
        if (d == 0) throw ValidationError(std::string(who) + ": zero dimension in shape " + shape_str(s));
}

} // namespace

// ----------------------------------------------------------------------
// TensorT basics
// ----------------------------------------------------------------------

template <typename S>
TensorT<S> TensorT<S>::from(std::vector<std::size_t> shape, std::vector<S> values) {
    check_shape(shape, "Tensor::from");
    if (shape_numel(shape) != values.size())
        throw ValidationError("Tensor::from: shape " + shape_str(shape) + " expects " +
                              std::to_string(shape_numel(shape)) + " values, got " +
                              std::to_string(values.size()));
    TensorT t;
    t.node_ = std::make_shared<NodeT<S>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->seq = detail::next_seq();
    return t;
}

template <typename S>
TensorT<S> TensorT<S>::zeros(std::vector<std::size_t> shape) {
    check_shape(shape, "Tensor::zeros");
    return from(std::move(shape), std::vector<S>(shape_numel(shape), S(0)));
}

template <typename S>
TensorT<S> TensorT<S>::ones(std::vector<std::size_t> shape) {
    check_shape(shape, "Tensor::ones");
    return from(std::move(shape), std::vector<S>(shape_numel(shape), S(1)));
}

template <typename S>
TensorT<S> TensorT<S>::full(std::vector<std::size_t> shape, S value) {
    check_shape(shape, "Tensor::full");
    return from(std::move(shape), std::vector<S>(shape_numel(shape), value));
}

template <typename S>
TensorT<S> TensorT<S>::scalar(S value) {
    return from({1}, {value});
}

template <typename S>
TensorT<S> TensorT<S>::param(std::vector<std::size_t> shape, std::vector<S> values) {
    TensorT t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

template <typename S>
const std::vector<std::size_t>& TensorT<S>::shape() const {
    if (!node_) throw ValidationError("Tensor: use of undefined tensor");
    return node_->shape;
}

template <typename S>
std::size_t TensorT<S>::size() const {
    return shape_numel(shape());
}

template <typename S>
bool TensorT<S>::requires_grad() const {
    return node_ && node_->requires_grad;
}

template <typename S>
TensorT<S>& TensorT<S>::set_requires_grad(bool b) {
    if (!node_) throw ValidationError("Tensor: use of undefined tensor");
    if (node_->backward)
        throw ValidationError("Tensor: requires_grad can only be toggled on leaves");
    node_->requires_grad = b;
    return *this;
}

template <typename S>
bool TensorT<S>::is_leaf() const {
    return node_ && !node_->backward;
}

template <typename S>
const char* TensorT<S>::op() const {
    return node_ ? node_->op : "undefined";
}

template <typename S>
std::uint64_t TensorT<S>::seq() const {
    return node_ ? node_->seq : 0;
}

template <typename S>
S TensorT<S>::item() const {
    if (size() != 1) throw ValidationError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
    return node_->values[0];
}

template <typename S>
S TensorT<S>::at(std::size_t flat) const {
    if (flat >= size()) throw ValidationError("Tensor::at: index out of range");
    return node_->values[flat];
}

template <typename S>
const std::vector<S>& TensorT<S>::values() const {
    if (!node_) throw ValidationError("Tensor: use of undefined tensor");
    return node_->values;
}

template <typename S>
std::vector<S>& TensorT<S>::mutable_values() {
    if (!node_) throw ValidationError("Tensor: use of undefined tensor");
    if (node_->backward)
        throw ValidationError("Tensor: only graph-free leaves may be mutated");
    return node_->values;
}

template <typename S>
TensorT<S> TensorT<S>::make_op(const char* op, std::vector<std::size_t> shape, std::vector<S> values,
                               std::vector<TensorT> parents,
                               std::function<std::vector<TensorT>(const TensorT&)> backward) {
    check_shape(shape, op);
    if (shape_numel(shape) != values.size())
        throw ValidationError(std::string(op) + ": internal shape/value mismatch");
    TensorT t;
    t.node_ = std::make_shared<NodeT<S>>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->seq = detail::next_seq();
    t.node_->op = op;
    bool record = detail::grad_mode();
    if (record) {
        record = false;
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) { record = true; break; }
    }
    if (record) {
        t.node_->requires_grad = true;
        t.node_->parents = std::move(parents);
        t.node_->backward = std::move(backward);
    }
    return t;
}

// ----------------------------------------------------------------------
// Elementwise
// ----------------------------------------------------------------------

namespace {

// equal shapes, or one side is a single element broadcast over the other
enum class BinKind { same, a_scalar, b_scalar };

template <typename S>
BinKind classify_binary(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() == b.shape()) return BinKind::same;
    if (b.size() == 1) return BinKind::b_scalar;
    if (a.size() == 1) return BinKind::a_scalar;
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

// reduce a broadcast gradient back to a 1-element parent's shape
template <typename S>
TensorT<S> to_scalar_shape(const TensorT<S>& g, const std::vector<std::size_t>& shape) {
    TensorT<S> s = sum(g);
    if (s.shape() != shape) s = reshape(s, shape);
    return s;
}

} // namespace

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    BinKind k = classify_binary(a, b, "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<S> out;
    std::vector<std::size_t> shp = (k == BinKind::a_scalar) ? b.shape() : a.shape();
    out.resize(shape_numel(shp));
    if (k == BinKind::same)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    else if (k == BinKind::b_scalar)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
    else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] + bv[i];
    auto ash = a.shape();
    auto bsh = b.shape();
    return TensorT<S>::make_op(
        "add", std::move(shp), std::move(out), {a, b},
        [k, ash, bsh](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            TensorT<S> ga = (k == BinKind::a_scalar) ? to_scalar_shape(g, ash) : g;
            TensorT<S> gb = (k == BinKind::b_scalar) ? to_scalar_shape(g, bsh) : g;
            return {ga, gb};
        });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    BinKind k = classify_binary(a, b, "sub");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<std::size_t> shp = (k == BinKind::a_scalar) ? b.shape() : a.shape();
    std::vector<S> out(shape_numel(shp));
    if (k == BinKind::same)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    else if (k == BinKind::b_scalar)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[0];
    else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] - bv[i];
    auto ash = a.shape();
    auto bsh = b.shape();
    return TensorT<S>::make_op(
        "sub", std::move(shp), std::move(out), {a, b},
        [k, ash, bsh](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            TensorT<S> ga = (k == BinKind::a_scalar) ? to_scalar_shape(g, ash) : g;
            TensorT<S> gn = neg(g);
            TensorT<S> gb = (k == BinKind::b_scalar) ? to_scalar_shape(gn, bsh) : gn;
            return {ga, gb};
        });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    BinKind k = classify_binary(a, b, "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<std::size_t> shp = (k == BinKind::a_scalar) ? b.shape() : a.shape();
    std::vector<S> out(shape_numel(shp));
    if (k == BinKind::same)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    else if (k == BinKind::b_scalar)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[0];
    else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] * bv[i];
    auto ash = a.shape();
    auto bsh = b.shape();
    return TensorT<S>::make_op(
        "mul", std::move(shp), std::move(out), {a, b},
        [k, ash, bsh, a, b](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            TensorT<S> ga = mul(g, b);
            TensorT<S> gb = mul(g, a);
            if (k == BinKind::a_scalar) ga = to_scalar_shape(ga, ash);
            if (k == BinKind::b_scalar) gb = to_scalar_shape(gb, bsh);
            return {ga, gb};
        });
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    BinKind k = classify_binary(a, b, "div");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<std::size_t> shp = (k == BinKind::a_scalar) ? b.shape() : a.shape();
    std::vector<S> out(shape_numel(shp));
    if (k == BinKind::same)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    else if (k == BinKind::b_scalar)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[0];
    else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] / bv[i];
    auto ash = a.shape();
    auto bsh = b.shape();
    return TensorT<S>::make_op(
        "div", std::move(shp), std::move(out), {a, b},
        [k, ash, bsh, a, b](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            TensorT<S> ga = div(g, b);
            TensorT<S> gb = neg(div(mul(g, a), mul(b, b)));
            if (k == BinKind::a_scalar) ga = to_scalar_shape(ga, ash);
            if (k == BinKind::b_scalar) gb = to_scalar_shape(gb, bsh);
            return {ga, gb};
        });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& a) {
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
    return TensorT<S>::make_op("neg", a.shape(), std::move(out), {a},
                               [](const TensorT<S>& g) -> std::vector<TensorT<S>> { return {neg(g)}; });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > S(0) ? av[i] : S(0);
    return TensorT<S>::make_op(
        "relu", a.shape(), std::move(out), {a},
        [a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            // subgradient at exactly 0 is 0
            const auto& v = a.values();
            std::vector<S> m(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] > S(0) ? S(1) : S(0);
            TensorT<S> mask = TensorT<S>::from(a.shape(), std::move(m));
            return {mul(g, mask)};
        });
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return TensorT<S>::make_op("exp", a.shape(), std::move(out), {a},
                               [a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {mul(g, exp(a))};
                               });
}

template <typename S>
TensorT<S> log(const TensorT<S>& a) {
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > S(0)))
            throw NumericError("log: non-positive input " + std::to_string(static_cast<double>(av[i])));
        out[i] = std::log(av[i]);
    }
    return TensorT<S>::make_op("log", a.shape(), std::move(out), {a},
                               [a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {div(g, a)};
                               });
}

template <typename S>
TensorT<S> sqrt(const TensorT<S>& a) {
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av[i] < S(0)) throw NumericError("sqrt: negative input");
        out[i] = std::sqrt(av[i]);
    }
    return TensorT<S>::make_op("sqrt", a.shape(), std::move(out), {a},
                               [a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {div(mul(g, S(0.5)), sqrt(a))};
                               });
}

template <typename S> TensorT<S> add(const TensorT<S>& a, S b) { return add(a, TensorT<S>::scalar(b)); }
template <typename S> TensorT<S> sub(const TensorT<S>& a, S b) { return sub(a, TensorT<S>::scalar(b)); }
template <typename S> TensorT<S> mul(const TensorT<S>& a, S b) { return mul(a, TensorT<S>::scalar(b)); }
template <typename S> TensorT<S> div(const TensorT<S>& a, S b) { return div(a, TensorT<S>::scalar(b)); }

template <typename S>
TensorT<S> elementwise(EwOp op, const TensorT<S>& a, const TensorT<S>& b) {
    switch (op) {
        case EwOp::add: return add(a, b);
        case EwOp::sub: return sub(a, b);
        case EwOp::mul: return mul(a, b);
        case EwOp::relu:
            if (b.defined()) throw ValidationError("elementwise: relu is unary");
            return relu(a);
        case EwOp::exp:
            if (b.defined()) throw ValidationError("elementwise: exp is unary");
            return exp(a);
        case EwOp::log:
            if (b.defined()) throw ValidationError("elementwise: log is unary");
            return log(a);
    }
    throw ValidationError("elementwise: unknown op");
}

// ----------------------------------------------------------------------
// matmul / transpose / reshape
// ----------------------------------------------------------------------

namespace {

// c[m,n] += a[m,k] x b[k,n]
template <typename S>
void gemm_nn(const S* __restrict av, const S* __restrict bv, S* __restrict cv, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        S* ci = cv + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S aik = av[i * k + kk];
            const S* bk = bv + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
}

// c[m,n] += a[m,k] x b[n,k]^T. A materialized transpose plus the nn sweep
// beats the dot-product form by ~3x: the reduction loop does not vectorize
// under strict FP semantics.
template <typename S>
void gemm_nt(const S* __restrict av, const S* __restrict bv, S* __restrict cv, std::size_t m,
             std::size_t k, std::size_t n) {
    std::vector<S> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = bv[j * k + kk];
    gemm_nn(av, bt.data(), cv, m, k, n);
}

// c[k,n] += a[m,k]^T x b[m,n]
template <typename S>
void gemm_tn(const S* __restrict av, const S* __restrict bv, S* __restrict cv, std::size_t m,
             std::size_t k, std::size_t n) {
    std::vector<S> at(k * m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) at[kk * m + i] = av[i * k + kk];
    gemm_nn(at.data(), bv, cv, k, m, n);
}

void check_rank2(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                 const char* who) {
    if (a.size() != 2 || b.size() != 2)
        throw ValidationError(std::string(who) + ": expects rank-2 tensors, got " + shape_str(a) +
                              " and " + shape_str(b));
}

} // namespace

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    check_rank2(a.shape(), b.shape(), "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ValidationError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    std::vector<S> out(m * n, S(0));
    gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return TensorT<S>::make_op(
        "matmul", {m, n}, std::move(out), {a, b},
        [a, b](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {matmul_nt(g, b), matmul_tn(a, g)};
        });
}

template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    check_rank2(a.shape(), b.shape(), "matmul_nt");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t n = b.shape()[0];
    if (b.shape()[1] != k)
        throw ValidationError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()) + "^T");
    std::vector<S> out(m * n, S(0));
    gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
    return TensorT<S>::make_op(
        "matmul_nt", {m, n}, std::move(out), {a, b},
        [a, b](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {matmul(g, b), matmul_tn(g, a)};
        });
}

template <typename S>
TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b) {
    check_rank2(a.shape(), b.shape(), "matmul_tn");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    if (b.shape()[0] != m)
        throw ValidationError("matmul_tn: outer dimensions disagree, " + shape_str(a.shape()) +
                              "^T x " + shape_str(b.shape()));
    std::vector<S> out(k * n, S(0));
    gemm_tn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return TensorT<S>::make_op(
        "matmul_tn", {k, n}, std::move(out), {a, b},
        [a, b](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {matmul_nt(b, g), matmul(a, g)};
        });
}

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    check_rank2(x.shape(), w.shape(), "linear");
    const std::size_t r = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
    if (w.shape()[0] != in || b.size() != out_dim)
        throw ValidationError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                              shape_str(w.shape()) + " + bias[" + std::to_string(b.size()) + "]");
    std::vector<S> out(r * out_dim);
    const S* bv = b.values().data();
    for (std::size_t i = 0; i < r; ++i) std::memcpy(out.data() + i * out_dim, bv, out_dim * sizeof(S));
    gemm_nn(x.values().data(), w.values().data(), out.data(), r, in, out_dim);
    auto bshape = b.shape();
    return TensorT<S>::make_op(
        "linear", {r, out_dim}, std::move(out), {x, w, b},
        [x, w, bshape](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            TensorT<S> gb = sum(g, 0);
            if (gb.shape() != bshape) gb = reshape(gb, bshape);
            return {matmul_nt(g, w), matmul_tn(x, g), gb};
        });
}

template <typename S>
TensorT<S> bmm_nn(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks) {
    check_rank2(a.shape(), b.shape(), "bmm_nn");
    if (blocks == 0 || a.shape()[0] % blocks != 0 || b.shape()[0] % blocks != 0)
        throw ValidationError("bmm_nn: row counts not divisible by block count");
    const std::size_t m = a.shape()[0] / blocks, k = a.shape()[1];
    const std::size_t kb = b.shape()[0] / blocks, n = b.shape()[1];
    if (kb != k)
        throw ValidationError("bmm_nn: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
    std::vector<S> out(blocks * m * n, S(0));
    for (std::size_t h = 0; h < blocks; ++h)
        gemm_nn(a.values().data() + h * m * k, b.values().data() + h * k * n, out.data() + h * m * n,
                m, k, n);
    return TensorT<S>::make_op(
        "bmm_nn", {blocks * m, n}, std::move(out), {a, b},
        [a, b, blocks](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {bmm_nt(g, b, blocks), bmm_tn(a, g, blocks)};
        });
}

template <typename S>
TensorT<S> bmm_nt(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks) {
    check_rank2(a.shape(), b.shape(), "bmm_nt");
    if (blocks == 0 || a.shape()[0] % blocks != 0 || b.shape()[0] % blocks != 0)
        throw ValidationError("bmm_nt: row counts not divisible by block count");
    const std::size_t m = a.shape()[0] / blocks, k = a.shape()[1];
    const std::size_t n = b.shape()[0] / blocks;
    if (b.shape()[1] != k)
        throw ValidationError("bmm_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()) + "^T");
    std::vector<S> out(blocks * m * n, S(0));
    for (std::size_t h = 0; h < blocks; ++h)
        gemm_nt(a.values().data() + h * m * k, b.values().data() + h * n * k, out.data() + h * m * n,
                m, k, n);
    return TensorT<S>::make_op(
        "bmm_nt", {blocks * m, n}, std::move(out), {a, b},
        [a, b, blocks](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {bmm_nn(g, b, blocks), bmm_tn(g, a, blocks)};
        });
}

template <typename S>
TensorT<S> bmm_tn(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks) {
    check_rank2(a.shape(), b.shape(), "bmm_tn");
    if (blocks == 0 || a.shape()[0] % blocks != 0 || b.shape()[0] % blocks != 0)
        throw ValidationError("bmm_tn: row counts not divisible by block count");
    const std::size_t m = a.shape()[0] / blocks, k = a.shape()[1];
    const std::size_t mb = b.shape()[0] / blocks, n = b.shape()[1];
    if (mb != m)
        throw ValidationError("bmm_tn: outer dimensions disagree, " + shape_str(a.shape()) + "^T x " +
                              shape_str(b.shape()));
    std::vector<S> out(blocks * k * n, S(0));
    for (std::size_t h = 0; h < blocks; ++h)
        gemm_tn(a.values().data() + h * m * k, b.values().data() + h * m * n, out.data() + h * k * n,
                m, k, n);
    return TensorT<S>::make_op(
        "bmm_tn", {blocks * k, n}, std::move(out), {a, b},
        [a, b, blocks](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {bmm_nt(b, g, blocks), bmm_nn(a, g, blocks)};
        });
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
    if (a.rank() != 2) throw ValidationError("transpose: expects rank-2 tensor");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    const auto& av = a.values();
    std::vector<S> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return TensorT<S>::make_op("transpose", {c, r}, std::move(out), {a},
                               [](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {transpose(g)};
                               });
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<std::size_t> shape) {
    check_shape(shape, "reshape");
    if (shape_numel(shape) != a.size())
        throw ValidationError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto old_shape = a.shape();
    return TensorT<S>::make_op("reshape", std::move(shape), a.values(), {a},
                               [old_shape](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {reshape(g, old_shape)};
                               });
}

// ----------------------------------------------------------------------
// Reductions
// ----------------------------------------------------------------------

namespace {

// views a tensor as [outer, len, inner] around the reduction axis
struct AxisSplit {
    std::size_t outer, len, inner;
};

AxisSplit axis_split(const std::vector<std::size_t>& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::vector<std::size_t> drop_axis(const std::vector<std::size_t>& shape, std::size_t axis) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (i != axis) out.push_back(shape[i]);
    if (out.empty()) out.push_back(1);
    return out;
}

} // namespace

template <typename S>
TensorT<S> sum(const TensorT<S>& a, std::optional<std::size_t> axis) {
    if (a.size() == 0) throw EmptyDomainError("sum: empty reduction domain");
    const auto& av = a.values();
    if (!axis) {
        S acc = 0;
        for (S v : av) acc += v;
        return TensorT<S>::make_op("sum", {1}, {acc}, {a},
                                   [a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                       return {mul(TensorT<S>::ones(a.shape()), g)};
                                   });
    }
    if (*axis >= a.rank()) throw ValidationError("sum: axis out of range");
    AxisSplit sp = axis_split(a.shape(), *axis);
    std::vector<S> out(sp.outer * sp.inner, S(0));
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l) {
            const S* src = av.data() + (o * sp.len + l) * sp.inner;
            S* dst = out.data() + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    std::size_t ax = *axis, ln = sp.len;
    return TensorT<S>::make_op("sum", drop_axis(a.shape(), *axis), std::move(out), {a},
                               [ax, ln](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {expand_axis(g, ax, ln)};
                               });
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a, std::optional<std::size_t> axis) {
    std::size_t n = axis ? a.shape().at(*axis) : a.size();
    return mul(sum(a, axis), S(1) / static_cast<S>(n));
}

template <typename S>
TensorT<S> max(const TensorT<S>& a, std::optional<std::size_t> axis) {
    if (a.size() == 0) throw EmptyDomainError("max: empty reduction domain");
    const auto& av = a.values();
    if (!axis) {
        std::size_t arg = 0;
        S best = av[0];
        for (std::size_t i = 1; i < av.size(); ++i)
            if (av[i] > best) { best = av[i]; arg = i; }
        auto ash = a.shape();
        return TensorT<S>::make_op(
            "max", {1}, {best}, {a},
            [ash, arg](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                std::vector<S> m(shape_numel(ash), S(0));
                m[arg] = S(1);
                return {mul(TensorT<S>::from(ash, std::move(m)), g)};
            });
    }
    if (*axis >= a.rank()) throw ValidationError("max: axis out of range");
    AxisSplit sp = axis_split(a.shape(), *axis);
    std::vector<S> out(sp.outer * sp.inner);
    std::vector<std::size_t> args(sp.outer * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t base = o * sp.len * sp.inner + i;
            S best = av[base];
            std::size_t argl = 0;
            for (std::size_t l = 1; l < sp.len; ++l) {
                S v = av[base + l * sp.inner];
                if (v > best) { best = v; argl = l; }
            }
            out[o * sp.inner + i] = best;
            args[o * sp.inner + i] = argl;
        }
    auto ash = a.shape();
    std::size_t ax = *axis;
    AxisSplit spc = sp;
    return TensorT<S>::make_op(
        "max", drop_axis(a.shape(), *axis), std::move(out), {a},
        [ash, ax, spc, args](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            std::vector<S> m(shape_numel(ash), S(0));
            for (std::size_t o = 0; o < spc.outer; ++o)
                for (std::size_t i = 0; i < spc.inner; ++i)
                    m[o * spc.len * spc.inner + args[o * spc.inner + i] * spc.inner + i] = S(1);
            return {mul(TensorT<S>::from(ash, std::move(m)), expand_axis(g, ax, spc.len))};
        });
}

template <typename S>
TensorT<S> reduce(ReduceOp op, const TensorT<S>& a, std::optional<std::size_t> axis) {
    switch (op) {
        case ReduceOp::sum: return sum(a, axis);
        case ReduceOp::mean: return mean(a, axis);
        case ReduceOp::max: return max(a, axis);
    }
    throw ValidationError("reduce: unknown op");
}

template <typename S>
TensorT<S> expand_axis(const TensorT<S>& a, std::size_t axis, std::size_t n) {
    if (axis > a.rank()) throw ValidationError("expand_axis: axis out of range");
    if (n == 0) throw ValidationError("expand_axis: zero length");
    std::vector<std::size_t> shp = a.shape();
    shp.insert(shp.begin() + static_cast<std::ptrdiff_t>(axis), n);
    // special case: expanding a 1-element tensor of rank 1 keeps shape [n]
    if (a.rank() == 1 && a.shape()[0] == 1 && axis == 0) shp = {n};
    AxisSplit sp{1, n, 1};
    {
        std::size_t outer = 1, inner = 1;
        const auto& as = a.shape();
        bool collapse = (a.rank() == 1 && as[0] == 1 && axis == 0);
        if (collapse) {
            outer = 1;
            inner = 1;
        } else {
            for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
            for (std::size_t i = axis; i < as.size(); ++i) inner *= as[i];
        }
        sp.outer = outer;
        sp.inner = inner;
    }
    const auto& av = a.values();
    std::vector<S> out(sp.outer * n * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < n; ++l)
            std::memcpy(out.data() + (o * n + l) * sp.inner, av.data() + o * sp.inner,
                        sp.inner * sizeof(S));
    return TensorT<S>::make_op("expand_axis", std::move(shp), std::move(out), {a},
                               [axis, a](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   TensorT<S> s = sum(g, axis);
                                   if (s.shape() != a.shape()) s = reshape(s, a.shape());
                                   return {s};
                               });
}

// ----------------------------------------------------------------------
// Gather / scatter / concatenation
// ----------------------------------------------------------------------

template <typename S>
TensorT<S> gather_flat(const TensorT<S>& a, IndexVec idx, std::vector<std::size_t> out_shape) {
    if (!idx) throw ValidationError("gather_flat: null index vector");
    if (shape_numel(out_shape) != idx->size())
        throw ValidationError("gather_flat: out shape does not match index count");
    const auto& av = a.values();
    std::vector<S> out(idx->size());
    for (std::size_t i = 0; i < idx->size(); ++i) {
        std::size_t j = (*idx)[i];
        if (j >= av.size()) throw ValidationError("gather_flat: index out of range");
        out[i] = av[j];
    }
    auto in_shape = a.shape();
    return TensorT<S>::make_op("gather", std::move(out_shape), std::move(out), {a},
                               [idx, in_shape](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {scatter_flat(g, idx, in_shape)};
                               });
}

template <typename S>
TensorT<S> scatter_flat(const TensorT<S>& src, IndexVec idx, std::vector<std::size_t> out_shape) {
    if (!idx) throw ValidationError("scatter_flat: null index vector");
    if (src.size() != idx->size())
        throw ValidationError("scatter_flat: source size does not match index count");
    std::size_t n = shape_numel(out_shape);
    const auto& sv = src.values();
    std::vector<S> out(n, S(0));
    for (std::size_t i = 0; i < idx->size(); ++i) {
        std::size_t j = (*idx)[i];
        if (j >= n) throw ValidationError("scatter_flat: index out of range");
        out[j] += sv[i];
    }
    auto src_shape = src.shape();
    return TensorT<S>::make_op("scatter", std::move(out_shape), std::move(out), {src},
                               [idx, src_shape](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {gather_flat(g, idx, src_shape)};
                               });
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& a, std::size_t begin, std::size_t end) {
    if (a.rank() != 2) throw ValidationError("slice_rows: expects rank-2 tensor");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    if (begin >= end || end > r) throw ValidationError("slice_rows: bad row range");
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve((end - begin) * c);
    for (std::size_t i = begin * c; i < end * c; ++i) idx->push_back(i);
    return gather_flat(a, idx, {end - begin, c});
}

template <typename S>
TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw ValidationError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
    const std::size_t ra = a.shape()[0], rb = b.shape()[0], c = a.shape()[1];
    std::vector<S> out;
    out.reserve((ra + rb) * c);
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    return TensorT<S>::make_op(
        "concat_rows", {ra + rb, c}, std::move(out), {a, b},
        [ra, rb, c](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            return {slice_rows(g, 0, ra), slice_rows(g, ra, ra + rb)};
        });
}

template <typename S>
TensorT<S> stack_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ValidationError("stack_rows: no parts");
    std::size_t c = parts[0].size();
    for (const auto& p : parts) {
        if (p.rank() != 1 && !(p.rank() == 2 && p.shape()[0] == 1))
            throw ValidationError("stack_rows: parts must be rank-1 rows");
        if (p.size() != c) throw ValidationError("stack_rows: row lengths differ");
    }
    std::size_t k = parts.size();
    std::vector<S> out;
    out.reserve(k * c);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return TensorT<S>::make_op(
        "stack_rows", {k, c}, std::move(out), parts,
        [k, c](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            std::vector<TensorT<S>> gs;
            gs.reserve(k);
            for (std::size_t i = 0; i < k; ++i) gs.push_back(reshape(slice_rows(g, i, i + 1), {c}));
            return gs;
        });
}

// ----------------------------------------------------------------------
// softmax / cross-entropy / layer norm
// ----------------------------------------------------------------------

template <typename S>
TensorT<S> softmax(const TensorT<S>& a, std::size_t axis) {
    if (axis >= a.rank()) throw ValidationError("softmax: axis out of range");
    for (S v : a.values())
        if (std::isnan(static_cast<double>(v))) throw NumericError("softmax: NaN input");
    // single fused node, max-subtracted for stability; the backward rule
    // recomputes softmax(a) through this same op so higher-order
    // derivatives stay exact (capturing the result would create a cycle)
    AxisSplit sp = axis_split(a.shape(), axis);
    const auto& av = a.values();
    std::vector<S> out(av.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            S mx = av[base];
            for (std::size_t l = 1; l < sp.len; ++l)
                mx = std::max(mx, av[base + l * sp.inner]);
            S total = 0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                S e = std::exp(av[base + l * sp.inner] - mx);
                out[base + l * sp.inner] = e;
                total += e;
            }
            const S inv = S(1) / total;
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] *= inv;
        }
    return TensorT<S>::make_op(
        "softmax", a.shape(), std::move(out), {a},
        [a, axis](const TensorT<S>& g) -> std::vector<TensorT<S>> {
            std::size_t n = a.shape()[axis];
            TensorT<S> y = softmax(a, axis);
            TensorT<S> yg = mul(y, g);
            return {sub(yg, mul(y, expand_axis(sum(yg, axis), axis, n)))};
        });
}

template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const TensorT<S>& target) {
    TensorT<S> x = logits;
    if (x.rank() == 2 && x.shape()[0] == 1) x = reshape(x, {x.size()});
    if (x.rank() != 1) throw ValidationError("cross_entropy: logits must be a vector");
    if (target.size() != x.size())
        throw ValidationError("cross_entropy: logits length " + std::to_string(x.size()) +
                              " vs target length " + std::to_string(target.size()));
    std::size_t ones_seen = 0;
    for (S v : target.values()) {
        if (v == S(1)) ++ones_seen;
        else if (v != S(0)) throw ValidationError("cross_entropy: target is not one-hot");
    }
    if (ones_seen != 1) throw ValidationError("cross_entropy: target must have exactly one 1");
    TensorT<S> t = target.rank() == 1 ? target : reshape(target, {target.size()});
    TensorT<S> m = detach(max(x));
    TensorT<S> xs = sub(x, m);
    TensorT<S> lse = log(sum(exp(xs)));
    TensorT<S> picked = sum(mul(xs, t));
    return sub(lse, picked);
}

template <typename S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<std::size_t>& targets) {
    if (logits.rank() != 2) throw ValidationError("cross_entropy_rows: expects rank-2 logits");
    const std::size_t r = logits.shape()[0], c = logits.shape()[1];
    if (targets.size() != r) throw ValidationError("cross_entropy_rows: one target per row required");
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (targets[i] >= c) throw ValidationError("cross_entropy_rows: target out of range");
        idx->push_back(i * c + targets[i]);
    }
    TensorT<S> m = detach(max(logits, 1));
    TensorT<S> xs = sub(logits, expand_axis(m, 1, c));
    TensorT<S> lse = log(sum(exp(xs), 1));       // [r]
    TensorT<S> picked = gather_flat(xs, idx, {r}); // [r]
    return mean(sub(lse, picked));
}

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
    TensorT<S> x = a;
    if (x.rank() == 1) x = reshape(x, {1, x.size()});
    if (x.rank() != 2) throw ValidationError("layer_norm: expects rank-1 or rank-2 input");
    const std::size_t r = x.shape()[0], d = x.shape()[1];
    if (gain.size() != d || bias.size() != d)
        throw ValidationError("layer_norm: gain/bias must match last axis of " + shape_str(a.shape()));
    TensorT<S> mu = mean(x, 1);
    TensorT<S> xc = sub(x, expand_axis(mu, 1, d));
    TensorT<S> var = mean(mul(xc, xc), 1);
    TensorT<S> rstd = sqrt(add(var, TensorT<S>::scalar(eps)));
    TensorT<S> norm = div(xc, expand_axis(rstd, 1, d));
    TensorT<S> gr = gain.rank() == 1 ? gain : reshape(gain, {d});
    TensorT<S> br = bias.rank() == 1 ? bias : reshape(bias, {d});
    TensorT<S> y = add(mul(norm, expand_axis(gr, 0, r)), expand_axis(br, 0, r));
    if (a.rank() == 1) y = reshape(y, {d});
    return y;
}

// ----------------------------------------------------------------------
// Bilinear resize (corner-aligned) and its adjoint
// ----------------------------------------------------------------------

namespace {

struct LinCoef {
    std::size_t i0, i1;
    double w1; // weight of i1; i0 gets (1 - w1)
};

std::vector<LinCoef> axis_coef(std::size_t in, std::size_t out) {
    std::vector<LinCoef> cs(out);
    for (std::size_t i = 0; i < out; ++i) {
        double pos = (in > 1 && out > 1)
                         ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
                         : 0.0;
        std::size_t i0 = static_cast<std::size_t>(pos);
        if (i0 >= in - 1 && in > 1) i0 = in - 2;
        double w1 = in > 1 ? pos - static_cast<double>(i0) : 0.0;
        cs[i] = {i0, in > 1 ? i0 + 1 : i0, w1};
    }
    return cs;
}

} // namespace

template <typename S> TensorT<S> bilinear_adjoint(const TensorT<S>& g, std::size_t in_h, std::size_t in_w);

template <typename S>
TensorT<S> bilinear_resize(const TensorT<S>& a, std::size_t out_h, std::size_t out_w) {
    if (a.rank() != 2) throw ValidationError("bilinear_resize: expects rank-2 tensor");
    if (out_h == 0 || out_w == 0) throw ValidationError("bilinear_resize: zero output size");
    const std::size_t h = a.shape()[0], w = a.shape()[1];
    auto ry = axis_coef(h, out_h);
    auto rx = axis_coef(w, out_w);
    const auto& av = a.values();
    std::vector<S> out(out_h * out_w);
    for (std::size_t i = 0; i < out_h; ++i) {
        const auto& cy = ry[i];
        for (std::size_t j = 0; j < out_w; ++j) {
            const auto& cx = rx[j];
            S v00 = av[cy.i0 * w + cx.i0], v01 = av[cy.i0 * w + cx.i1];
            S v10 = av[cy.i1 * w + cx.i0], v11 = av[cy.i1 * w + cx.i1];
            double wy = cy.w1, wx = cx.w1;
            out[i * out_w + j] = static_cast<S>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                wy * ((1 - wx) * v10 + wx * v11));
        }
    }
    return TensorT<S>::make_op("bilinear_resize", {out_h, out_w}, std::move(out), {a},
                               [h, w](const TensorT<S>& g) -> std::vector<TensorT<S>> {
                                   return {bilinear_adjoint(g, h, w)};
                               });
}

template <typename S>
TensorT<S> bilinear_adjoint(const TensorT<S>& g, std::size_t in_h, std::size_t in_w) {
    if (g.rank() != 2) throw ValidationError("bilinear_adjoint: expects rank-2 tensor");
    const std::size_t oh = g.shape()[0], ow = g.shape()[1];
    auto ry = axis_coef(in_h, oh);
    auto rx = axis_coef(in_w, ow);
    const auto& gv = g.values();
    std::vector<S> out(in_h * in_w, S(0));
    for (std::size_t i = 0; i < oh; ++i) {
        const auto& cy = ry[i];
        for (std::size_t j = 0; j < ow; ++j) {
            const auto& cx = rx[j];
            double wy = cy.w1, wx = cx.w1;
            S v = gv[i * ow + j];
            out[cy.i0 * in_w + cx.i0] += static_cast<S>((1 - wy) * (1 - wx)) * v;
            out[cy.i0 * in_w + cx.i1] += static_cast<S>((1 - wy) * wx) * v;
            out[cy.i1 * in_w + cx.i0] += static_cast<S>(wy * (1 - wx)) * v;
            out[cy.i1 * in_w + cx.i1] += static_cast<S>(wy * wx) * v;
        }
    }
    return TensorT<S>::make_op("bilinear_adjoint", {in_h, in_w}, std::move(out), {g},
                               [oh, ow](const TensorT<S>& gg) -> std::vector<TensorT<S>> {
                                   return {bilinear_resize(gg, oh, ow)};
                               });
}

template <typename S>
TensorT<S> detach(const TensorT<S>& a) {
    return TensorT<S>::from(a.shape(), a.values());
}

// ----------------------------------------------------------------------
// Backward
// ----------------------------------------------------------------------

template <typename S>
GradientTapeT<S> GradientTapeT<S>::record(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                                          bool create_graph, bool allow_unused) {
    if (!loss.defined()) throw ValidationError("backward: undefined loss tensor");
    if (loss.size() != 1) throw ValidationError("backward: loss must be scalar");
    for (const auto& w : wrt) {
        if (!w.defined()) throw ValidationError("backward: undefined wrt tensor");
        if (!w.requires_grad())
            throw ValidationError("backward: wrt tensor does not require grad and can never receive one");
    }

    GradientTapeT tape;
    tape.root_ = loss;
    tape.wrt_ = wrt;
    tape.create_graph_ = create_graph;

    // reachable requires-grad subgraph under the loss
    std::unordered_set<NodeT<S>*> seen;
    std::vector<NodeT<S>*> stack;
    if (loss.requires_grad()) {
        seen.insert(loss.node_ptr());
        stack.push_back(loss.node_ptr());
    }
    std::vector<NodeT<S>*> nodes;
    while (!stack.empty()) {
        NodeT<S>* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (!p.defined() || !p.requires_grad()) continue;
            if (seen.insert(p.node_ptr()).second) stack.push_back(p.node_ptr());
        }
    }

    std::unordered_set<NodeT<S>*> wrt_set;
    for (const auto& w : wrt) {
        if (!seen.count(w.node_ptr())) {
            if (allow_unused) continue;
            throw ValidationError(std::string("backward: wrt tensor (op=") + w.op() +
                                  ") is not reachable from the loss graph");
        }
        wrt_set.insert(w.node_ptr());
    }

    // keep only nodes that can route gradient into some wrt tensor
    std::sort(nodes.begin(), nodes.end(),
              [](NodeT<S>* a, NodeT<S>* b) { return a->seq < b->seq; });
    std::unordered_set<NodeT<S>*> needed;
    for (NodeT<S>* n : nodes) {
        if (wrt_set.count(n)) {
            needed.insert(n);
            continue;
        }
        for (const auto& p : n->parents) {
            if (p.defined() && needed.count(p.node_ptr())) {
                needed.insert(n);
                break;
            }
        }
    }

    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it)
        if (needed.count(*it)) tape.order_.push_back(*it);
    return tape;
}

template <typename S>
std::vector<TensorT<S>> GradientTapeT<S>::replay() const {
    GradModeGuard guard(create_graph_);
    std::unordered_map<NodeT<S>*, TensorT<S>> grads;
    std::unordered_set<NodeT<S>*> keep;
    for (const auto& w : wrt_) keep.insert(w.node_ptr());

    if (!order_.empty()) grads[root_.node_ptr()] = TensorT<S>::ones({1});

    std::unordered_set<NodeT<S>*> in_tape(order_.begin(), order_.end());
    for (NodeT<S>* n : order_) {
        auto it = grads.find(n);
        if (it == grads.end()) continue;
        TensorT<S> g = it->second;
        if (!keep.count(n)) grads.erase(it);
        if (!n->backward) continue;
        auto pgrads = n->backward(g);
        if (pgrads.size() != n->parents.size())
            throw ValidationError(std::string("backward rule of ") + n->op +
                                  " returned wrong number of gradients");
        for (std::size_t i = 0; i < pgrads.size(); ++i) {
            const auto& p = n->parents[i];
            if (!pgrads[i].defined() || !p.defined() || !p.requires_grad()) continue;
            if (!in_tape.count(p.node_ptr())) continue; // pruned: cannot reach wrt
            auto pit = grads.find(p.node_ptr());
            if (pit == grads.end())
                grads.emplace(p.node_ptr(), pgrads[i]);
            else
                pit->second = add(pit->second, pgrads[i]);
        }
    }

    std::vector<TensorT<S>> out;
    out.reserve(wrt_.size());
    for (const auto& w : wrt_) {
        auto it = grads.find(w.node_ptr());
        out.push_back(it != grads.end() ? it->second : TensorT<S>::zeros(w.shape()));
    }
    return out;
}

template <typename S>
std::vector<TensorT<S>> backward(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                                 bool create_graph, bool allow_unused) {
    return GradientTapeT<S>::record(loss, wrt, create_graph, allow_unused).replay();
}

// ----------------------------------------------------------------------
// Explicit instantiations: 64-bit default, 32-bit selectable.
// ----------------------------------------------------------------------

#define AMC_INSTANTIATE(S)                                                                          \
    template class TensorT<S>;                                                                      \
    template class GradientTapeT<S>;                                                                \
    template TensorT<S> add(const TensorT<S>&, const TensorT<S>&);                                  \
    template TensorT<S> sub(const TensorT<S>&, const TensorT<S>&);                                  \
    template TensorT<S> mul(const TensorT<S>&, const TensorT<S>&);                                  \
    template TensorT<S> div(const TensorT<S>&, const TensorT<S>&);                                  \
    template TensorT<S> add(const TensorT<S>&, S);                                                  \
    template TensorT<S> sub(const TensorT<S>&, S);                                                  \
    template TensorT<S> mul(const TensorT<S>&, S);                                                  \
    template TensorT<S> div(const TensorT<S>&, S);                                                  \
    template TensorT<S> neg(const TensorT<S>&);                                                     \
    template TensorT<S> relu(const TensorT<S>&);                                                    \
    template TensorT<S> exp(const TensorT<S>&);                                                     \
    template TensorT<S> log(const TensorT<S>&);                                                     \
    template TensorT<S> sqrt(const TensorT<S>&);                                                    \
    template TensorT<S> elementwise(EwOp, const TensorT<S>&, const TensorT<S>&);                    \
    template TensorT<S> matmul(const TensorT<S>&, const TensorT<S>&);                               \
    template TensorT<S> matmul_nt(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> matmul_tn(const TensorT<S>&, const TensorT<S>&);                            \
    template TensorT<S> linear(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&);            \
    template TensorT<S> bmm_nn(const TensorT<S>&, const TensorT<S>&, std::size_t);                  \
    template TensorT<S> bmm_nt(const TensorT<S>&, const TensorT<S>&, std::size_t);                  \
    template TensorT<S> bmm_tn(const TensorT<S>&, const TensorT<S>&, std::size_t);                  \
    template TensorT<S> transpose(const TensorT<S>&);                                               \
    template TensorT<S> reshape(const TensorT<S>&, std::vector<std::size_t>);                       \
    template TensorT<S> reduce(ReduceOp, const TensorT<S>&, std::optional<std::size_t>);            \
    template TensorT<S> sum(const TensorT<S>&, std::optional<std::size_t>);                         \
    template TensorT<S> mean(const TensorT<S>&, std::optional<std::size_t>);                        \
    template TensorT<S> max(const TensorT<S>&, std::optional<std::size_t>);                         \
    template TensorT<S> expand_axis(const TensorT<S>&, std::size_t, std::size_t);                   \
    template TensorT<S> gather_flat(const TensorT<S>&, IndexVec, std::vector<std::size_t>);         \
    template TensorT<S> scatter_flat(const TensorT<S>&, IndexVec, std::vector<std::size_t>);        \
    template TensorT<S> slice_rows(const TensorT<S>&, std::size_t, std::size_t);                    \
    template TensorT<S> concat_rows(const TensorT<S>&, const TensorT<S>&);                          \
    template TensorT<S> stack_rows(const std::vector<TensorT<S>>&);                                 \
    template TensorT<S> softmax(const TensorT<S>&, std::size_t);                                    \
    template TensorT<S> cross_entropy(const TensorT<S>&, const TensorT<S>&);                        \
    template TensorT<S> cross_entropy_rows(const TensorT<S>&, const std::vector<std::size_t>&);     \
    template TensorT<S> layer_norm(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, S);     \
    template TensorT<S> bilinear_resize(const TensorT<S>&, std::size_t, std::size_t);               \
    template TensorT<S> detach(const TensorT<S>&);                                                  \
    template std::vector<TensorT<S>> backward(const TensorT<S>&, const std::vector<TensorT<S>>&, bool, bool);

AMC_INSTANTIATE(double)
AMC_INSTANTIATE(float)

#undef AMC_INSTANTIATE

} // namespace amc
