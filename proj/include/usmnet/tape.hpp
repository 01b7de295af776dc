#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace usmnet::ad {

/// Scalar expression graph recorded once and evaluated many times.
///
/// Leaves are parameter slots (the trainable vector w) and input slots
/// (query point coordinates, physical parameters, landmarks, targets).
/// A reverse sweep over the recorded nodes yields exact gradients of any
/// seeded output with respect to every leaf. Spatial tangents are emitted
/// as ordinary recorded nodes (see TapeBuilder::tangent_of), so derivatives
/// taken through them remain exact as well.
enum class Op : std::uint8_t {
    Const,       // aux = value
    Param,       // aux slot index
    Input,       // aux slot index
    Add,         // a + b
    Sub,         // a - b
    Mul,         // a * b
    Square,      // a^2
    Tanh,        // tanh(a)
    Reciprocal,  // 1/a
    SqrtFloor,   // sqrt(a + floor), floor = aux
    Affine,      // bias + sum_i w_i * x_i over node pairs
};

using NodeId = std::uint32_t;
constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

struct Tape {
    std::vector<Op> ops;
    std::vector<std::uint32_t> arg_begin;  // per node, range into args
    std::vector<double> aux;               // per node payload
    std::vector<NodeId> args;              // flat argument list
    std::vector<NodeId> param_node;        // leaf node per parameter slot
    std::vector<NodeId> input_node;        // leaf node per input slot
    std::vector<NodeId> outputs;           // registered output nodes

    std::size_t size() const { return ops.size(); }
    int n_params() const { return static_cast<int>(param_node.size()); }
    int n_inputs() const { return static_cast<int>(input_node.size()); }
    int n_outputs() const { return static_cast<int>(outputs.size()); }
    std::span<const NodeId> node_args(NodeId n) const {
        return {args.data() + arg_begin[n], args.data() + arg_begin[n + 1]};
    }
};

/// Per-call evaluation buffers; one Workspace per thread.
struct Workspace {
    std::vector<double> values;
    std::vector<double> adjoints;
};

/// Evaluates the tape; returns the registered outputs. `inputs` must have
/// length tape.n_inputs(), `params` length tape.n_params().
std::vector<double> forward(const Tape& tape, std::span<const double> params,
                            std::span<const double> inputs, Workspace& ws);
std::vector<double> forward(const Tape& tape, std::span<const double> params,
                            std::span<const double> inputs);

/// Reverse sweep seeded on the registered outputs (after a forward pass on
/// the same workspace). Returns d(seed . outputs)/d(params), exact.
std::vector<double> grad_params(const Tape& tape, std::span<const double> params,
                                std::span<const double> inputs,
                                std::span<const double> output_seed, Workspace& ws);
std::vector<double> grad_params(const Tape& tape, std::span<const double> params,
                                std::span<const double> inputs,
                                std::span<const double> output_seed);

/// Reverse sweep on an already-evaluated workspace; accumulates the exact
/// gradient scaled by `scale` into `grad_accum` (length n_params). This is
/// the hot path of full-batch training.
void accumulate_grad(const Tape& tape, std::span<const double> output_seed, double scale,
                     Workspace& ws, std::span<double> grad_accum);

/// Primal outputs plus exact Jacobian columns with respect to the selected
/// input slots, computed by evaluating a tangent-extended tape.
struct DualBatch {
    std::vector<double> primal;                // n_outputs
    std::vector<std::vector<double>> tangents;  // [spatial index][output]
};

DualBatch spatial_jacobian(const Tape& tape, std::span<const double> params,
                           std::span<const double> inputs, std::span<const int> spatial_slots);

class TapeBuilder {
public:
    TapeBuilder() = default;
    /// Start from an existing tape (used to extend a frozen graph).
    explicit TapeBuilder(const Tape& base);

    NodeId constant(double v);
    NodeId param(int slot);
    NodeId input(int slot);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId square(NodeId a);
    NodeId tanh(NodeId a);
    NodeId reciprocal(NodeId a);
    NodeId sqrt_floor(NodeId a, double floor);
    /// bias + sum_i weights[i] * values[i]; bias may be kNoNode.
    NodeId affine(NodeId bias, std::span<const NodeId> weights, std::span<const NodeId> values);

    /// Node holding d(node)/d(input slot `wrt_slot`), with the derivative
    /// computation recorded on the tape itself. Returns kNoNode when the
    /// derivative is identically zero. Parameter leaves are treated as
    /// constants with respect to inputs.
    NodeId tangent_of(NodeId node, int wrt_slot);

    void register_output(NodeId n);
    std::size_t size() const { return tape_.size(); }

    Tape freeze() &&;

private:
    NodeId push(Op op, double aux, std::span<const NodeId> a);
    NodeId zero();
    NodeId one();
    NodeId tangent_step(NodeId n, const std::vector<NodeId>& table);

    Tape tape_;
    NodeId zero_ = kNoNode, one_ = kNoNode;
    // tangent_tables_[slot][node] = tangent node (kNoNode-1 sentinel = unset)
    std::vector<int> tangent_slot_of_table_;
    std::vector<std::vector<NodeId>> tangent_tables_;
};

}  // namespace usmnet::ad
