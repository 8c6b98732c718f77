#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "trsp/tensor.hpp"

namespace trsp {

enum class Norm { L1, L2 };

/// Reverse-mode autodiff over a linear tape of recorded operations.
///
/// Each op appends one node holding the forward value and a closure that
/// scatters the node's gradient into its inputs. Nodes are appended in
/// topological order by construction; backward() walks the tape in exact
/// reverse and then flushes leaf gradients into their Parameters.
class Tape {
public:
    using NodeId = std::int32_t;
    static constexpr NodeId kInvalid = -1;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a Parameter as a leaf. Gradients accumulate into p.grad.
    NodeId leaf(Parameter& p);
    /// A value that participates in the forward pass but receives no gradient.
    NodeId constant(Tensor v);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t mac_count() const { return macs_; }

    // --- differentiable operations -------------------------------------

    /// C = A·B (or A·Bᵀ). A is [..., m, k]; B is either rank-2 (broadcast
    /// over A's leading axes) or has identical leading axes.
    NodeId matmul(NodeId a, NodeId b, bool trans_b = false);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    /// x + b with rank-1 b broadcast along the last axis.
    NodeId add_bias(NodeId x, NodeId b);
    NodeId gelu(NodeId x);
    /// Softmax along the last axis. With causal=true the last two axes must be
    /// square and entry (i, j) with j > i is forced to zero probability.
    NodeId softmax_lastaxis(NodeId x, bool causal = false);
    NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps);
    /// Row gather: out[r, :] = table[ids[r], :], reshaped to out_shape.
    NodeId gather_rows(NodeId table, std::vector<std::size_t> ids,
                       std::vector<std::size_t> out_shape);
    /// [B, S, d] -> [B, H, S, d/H]
    NodeId split_heads(NodeId x, std::size_t heads);
    /// [B, H, S, dh] -> [B, S, H*dh]
    NodeId merge_heads(NodeId x);
    /// x * vec[idx] where vec is rank-1; the scalar receives the summed grad.
    NodeId scale_by_element(NodeId x, NodeId vec, std::size_t idx);

    /// Mean next-token NLL. logits is [..., V]; targets has one id per
    /// leading-position row. The caller is responsible for the next-token
    /// shift when building (inputs, targets) pairs.
    NodeId cross_entropy(NodeId logits, std::vector<std::size_t> targets);

    /// Σ|v_i| over the given component subset of a rank-1 node.
    /// Subgradient: sign(v_i) with sign(0) := 0.
    NodeId l1_subset(NodeId vec, std::vector<std::size_t> idxs);

    /// Norm of each last-axis vector, averaged over all leading positions.
    /// L2 gradient is guarded to 0 at a zero vector.
    NodeId norm_penalty(NodeId d, Norm flag);

    // --- execution ------------------------------------------------------

    /// Accumulate d(loss)/d(param) into every reachable Parameter's grad.
    /// The loss node must be scalar. Calling backward twice on one tape is
    /// an error.
    void backward(NodeId loss);

    /// Drop all nodes; keeps the MAC counter.
    void reset();
    void reset_mac_count() { macs_ = 0; }

private:
    struct Node {
        Tensor value;
        Tensor grad;               // allocated lazily during backward
        bool grad_live = false;
        Parameter* param = nullptr;
        std::function<void()> back;  // empty for leaves/constants
    };

    NodeId push(Tensor value, Parameter* param = nullptr);
    Tensor& grad_of(NodeId id);

    std::vector<Node> nodes_;
    std::uint64_t macs_ = 0;
    bool backward_done_ = false;
};

/// Standard Adam. Optimizer state is keyed by position in the parameter
/// list given at construction; grads are zeroed after each step.
class Adam {
public:
    struct Config {
        double lr = 2e-5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Parameter*> params, Config cfg);

    void step();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

private:
    std::vector<Parameter*> params_;
    Config cfg_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::uint64_t t_ = 0;
};

}  // namespace trsp
