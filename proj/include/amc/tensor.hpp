#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amc/errors.hpp"

namespace amc {

template <typename S> class TensorT;
template <typename S> struct NodeT;

namespace detail {
std::uint64_t next_seq();
bool& grad_mode();
} // namespace detail

// While disabled, newly built ops carry no provenance and backward
// through them is impossible. backward() itself re-enters recording
// mode only when create_graph is requested.
class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : prev_(detail::grad_mode()) { detail::grad_mode() = enabled; }
    ~GradModeGuard() { detail::grad_mode() = prev_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool prev_;
};

template <typename S>
struct NodeT {
    std::vector<std::size_t> shape;
    std::vector<S> values;
    bool requires_grad = false;
    std::uint64_t seq = 0; // creation order; parents always precede children
    const char* op = "leaf";
    std::vector<TensorT<S>> parents;
    // Maps grad w.r.t. this node to grads w.r.t. parents. Built from the
    // public ops so the backward pass is itself differentiable.
    std::function<std::vector<TensorT<S>>(const TensorT<S>&)> backward;
};

// Dense row-major tensor participating in a dynamically built reverse-mode
// graph. Value semantics over a shared node; completed tensors are
// immutable (only graph-free leaves may be mutated, e.g. by the optimizer).
template <typename S>
class TensorT {
public:
    TensorT() = default;

    static TensorT from(std::vector<std::size_t> shape, std::vector<S> values);
    static TensorT zeros(std::vector<std::size_t> shape);
    static TensorT ones(std::vector<std::size_t> shape);
    static TensorT full(std::vector<std::size_t> shape, S value);
    static TensorT scalar(S value);
    // requires_grad leaf (a parameter)
    static TensorT param(std::vector<std::size_t> shape, std::vector<S> values);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t rank() const { return shape().size(); }
    bool requires_grad() const;
    TensorT& set_requires_grad(bool b);
    bool is_leaf() const;
    const char* op() const;
    std::uint64_t seq() const;

    S item() const;               // value of a 1-element tensor
    S at(std::size_t flat) const; // flat index
    const std::vector<S>& values() const;
    // Leaf-only mutation; a tensor with provenance is immutable.
    std::vector<S>& mutable_values();

    NodeT<S>* node_ptr() const { return node_.get(); }

    // Internal constructor for operations.
    static TensorT make_op(const char* op, std::vector<std::size_t> shape, std::vector<S> values,
                           std::vector<TensorT> parents,
                           std::function<std::vector<TensorT>(const TensorT&)> backward);

private:
    std::shared_ptr<NodeT<S>> node_;
};

using Tensor = TensorT<double>;
using IndexVec = std::shared_ptr<const std::vector<std::size_t>>;

// ----------------------------------------------------------------------
// Operations. Binary elementwise ops take equal shapes or a 1-element
// tensor broadcast against the other side; anything else is a shape error.
// ----------------------------------------------------------------------

enum class EwOp { add, sub, mul, relu, exp, log };
enum class ReduceOp { sum, mean, max };

template <typename S> TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b);
template <typename S> TensorT<S> neg(const TensorT<S>& a);
template <typename S> TensorT<S> relu(const TensorT<S>& a);
template <typename S> TensorT<S> exp(const TensorT<S>& a);
template <typename S> TensorT<S> log(const TensorT<S>& a);
template <typename S> TensorT<S> sqrt(const TensorT<S>& a);

template <typename S> TensorT<S> add(const TensorT<S>& a, S b);
template <typename S> TensorT<S> sub(const TensorT<S>& a, S b);
template <typename S> TensorT<S> mul(const TensorT<S>& a, S b);
template <typename S> TensorT<S> div(const TensorT<S>& a, S b);

template <typename S>
TensorT<S> elementwise(EwOp op, const TensorT<S>& a, const TensorT<S>& b = {});

template <typename S> TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b);
// a [m,k] x b [n,k] -> [m,n], reading b transposed in place.
template <typename S> TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b);
// a [m,k] x b [m,n] -> [k,n], reading a transposed in place.
template <typename S> TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b);
// x [r,in] x w [in,out] + bias [out] broadcast over rows, one node.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b);
// Block-diagonal batched matmul: blocks independent row groups of equal
// height. bmm_nn: a [B*m,k] x b [B*k,n] -> [B*m,n] per block; _nt and _tn
// read the second/first operand transposed per block.
template <typename S> TensorT<S> bmm_nn(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks);
template <typename S> TensorT<S> bmm_nt(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks);
template <typename S> TensorT<S> bmm_tn(const TensorT<S>& a, const TensorT<S>& b, std::size_t blocks);
template <typename S> TensorT<S> transpose(const TensorT<S>& a);
template <typename S> TensorT<S> reshape(const TensorT<S>& a, std::vector<std::size_t> shape);

template <typename S>
TensorT<S> reduce(ReduceOp op, const TensorT<S>& a, std::optional<std::size_t> axis = std::nullopt);
template <typename S> TensorT<S> sum(const TensorT<S>& a, std::optional<std::size_t> axis = std::nullopt);
template <typename S> TensorT<S> mean(const TensorT<S>& a, std::optional<std::size_t> axis = std::nullopt);
template <typename S> TensorT<S> max(const TensorT<S>& a, std::optional<std::size_t> axis = std::nullopt);

// Inserts a replicated axis of length n at position axis (0..rank).
template <typename S> TensorT<S> expand_axis(const TensorT<S>& a, std::size_t axis, std::size_t n);

// out[i] = a.flat[idx[i]]; product(out_shape) == idx->size().
template <typename S>
TensorT<S> gather_flat(const TensorT<S>& a, IndexVec idx, std::vector<std::size_t> out_shape);
// out.flat[idx[i]] += src.flat[i] into zeros(out_shape).
template <typename S>
TensorT<S> scatter_flat(const TensorT<S>& src, IndexVec idx, std::vector<std::size_t> out_shape);

template <typename S> TensorT<S> slice_rows(const TensorT<S>& a, std::size_t begin, std::size_t end);
template <typename S> TensorT<S> concat_rows(const TensorT<S>& a, const TensorT<S>& b);
// parts are rank-1 tensors of equal length c; result is [parts.size(), c].
template <typename S> TensorT<S> stack_rows(const std::vector<TensorT<S>>& parts);

template <typename S> TensorT<S> softmax(const TensorT<S>& a, std::size_t axis);
// logits and one-hot target are rank-1 (or [1,n]) of equal length.
template <typename S> TensorT<S> cross_entropy(const TensorT<S>& logits, const TensorT<S>& target);
// Per-row cross-entropy against an integer target per row, averaged.
template <typename S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<std::size_t>& targets);
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias, S eps);

// Corner-aligned bilinear interpolation of a [h,w] map.
template <typename S>
TensorT<S> bilinear_resize(const TensorT<S>& a, std::size_t out_h, std::size_t out_w);

// Constant copy cut loose from the graph.
template <typename S> TensorT<S> detach(const TensorT<S>& a);

// ----------------------------------------------------------------------
// Backward
// ----------------------------------------------------------------------

// Ordered record of the executed operations reachable from one scalar
// root, restricted to the subgraph that can influence the requested
// tensors. replay() sweeps it once in reverse execution order; with
// create_graph the produced gradients are graph nodes themselves, so a
// further backward through them is valid.
template <typename S>
class GradientTapeT {
public:
    static GradientTapeT record(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                                bool create_graph, bool allow_unused = false);
    std::vector<TensorT<S>> replay() const;

    std::size_t node_count() const { return order_.size(); }
    bool create_graph() const { return create_graph_; }

private:
    TensorT<S> root_;
    std::vector<TensorT<S>> wrt_;
    std::vector<NodeT<S>*> order_; // descending seq; each node exactly once
    bool create_graph_ = false;
};

using GradientTape = GradientTapeT<double>;

// Gradients of a scalar loss w.r.t. each tensor in wrt (aligned).
// Unreachable wrt tensors are an error unless allow_unused, in which case
// they (and reachable tensors no gradient path feeds) get zeros.
template <typename S>
std::vector<TensorT<S>> backward(const TensorT<S>& loss, const std::vector<TensorT<S>>& wrt,
                                 bool create_graph = false, bool allow_unused = false);

} // namespace amc
