#pragma once

#include "ensdown/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

/// Reverse-mode automatic differentiation over dense tensors.
///
/// A Tape records every operation executed on its Vars. Calling backward()
/// on a scalar Var replays the record in reverse and accumulates gradients
/// into every node that requires them. A tape belongs to one thread.
namespace ensdown::ad {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    /// Propagates the output gradient of one node into its inputs.
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    /// Records an op output. `backward` is only kept when some input requires a gradient.
    /// Throws NonFiniteError if `value` holds a NaN or infinity.
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);

    const Tensor& value(const Var& v) const { return nodes_.at(v.id()).value; }
    bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }

    /// Gradient accumulated by the last backward(); zeros when the node was never reached.
    Tensor grad(const Var& v) const;

    /// Move the value or gradient of `v` out of a consumed tape.
    Tensor take_value(const Var& v);
    Tensor take_grad(const Var& v);

    /// Adds `g` into the gradient of `v`. No-op when `v` does not require a gradient.
    void accumulate(const Var& v, std::span<const double> g);

    /// Runs the reverse sweep from a scalar loss and returns the ids of the
    /// nodes whose backward rule ran, in visiting order.
    std::vector<std::size_t> backward(const Var& loss);

    bool consumed() const { return consumed_; }
    std::size_t size() const { return nodes_.size(); }
    const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

    /// Drops every recorded node. Existing Vars become invalid.
    void reset();

private:
    struct Node {
        const char* op;
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(const char* op, Tensor value, bool requires_grad, Backward backward);

    std::deque<Node> nodes_;
    bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

/// 2-D cross-correlation, stride 1, zero "same" padding.
/// input [N,Cin,H,W], kernels [Cout,Cin,kH,kW] with odd kH,kW, bias [Cout].
Var conv2d(const Var& input, const Var& kernels, const Var& bias);

/// max(0, x), with a zero subgradient at 0.
Var relu(const Var& x);

/// x [N,F] times weights [F,O] plus bias [O].
Var dense(const Var& x, const Var& weights, const Var& bias);

/// [N, ...] -> [N, prod(...)], row-major.
Var flatten(const Var& x);

/// Row-major reshape to `shape` (same element count).
Var reshape(const Var& x, Shape shape);

/// Columns [start, start+count) of a [N,F] tensor.
Var slice_columns(const Var& x, std::size_t start, std::size_t count);

/// log(1 + exp(x)), evaluated without overflow.
Var softplus(const Var& x);

Var add_scalar(const Var& x, double c);
Var square(const Var& x);

/// Sum of all elements as a scalar.
Var sum(const Var& x);

/// sum(x * weights) with a constant weight tensor of the same shape.
Var weighted_sum(const Var& x, const Tensor& weights);

} // namespace ensdown::ad
