#include "usmnet/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace usmnet::ad {

namespace {
constexpr NodeId kUnset = kNoNode - 1;
}

// ---------------------------------------------------------------------------
// builder
// ---------------------------------------------------------------------------

TapeBuilder::TapeBuilder(const Tape& base) { tape_ = base; }

NodeId TapeBuilder::push(Op op, double aux, std::span<const NodeId> a) {
    if (tape_.arg_begin.empty()) tape_.arg_begin.push_back(0);
    for (NodeId arg : a) {
        if (arg >= tape_.size()) throw std::invalid_argument("tape: argument not yet recorded");
        tape_.args.push_back(arg);
    }
    tape_.ops.push_back(op);
    tape_.aux.push_back(aux);
    tape_.arg_begin.push_back(static_cast<std::uint32_t>(tape_.args.size()));
    return static_cast<NodeId>(tape_.size() - 1);
}

NodeId TapeBuilder::constant(double v) { return push(Op::Const, v, {}); }

NodeId TapeBuilder::zero() {
    if (zero_ == kNoNode) zero_ = constant(0.0);
    return zero_;
}

NodeId TapeBuilder::one() {
    if (one_ == kNoNode) one_ = constant(1.0);
    return one_;
}

NodeId TapeBuilder::param(int slot) {
    if (slot < 0) throw std::invalid_argument("tape: negative param slot");
    auto s = static_cast<std::size_t>(slot);
    if (tape_.param_node.size() <= s) tape_.param_node.resize(s + 1, kNoNode);
    if (tape_.param_node[s] == kNoNode)
        tape_.param_node[s] = push(Op::Param, static_cast<double>(slot), {});
    return tape_.param_node[s];
}

NodeId TapeBuilder::input(int slot) {
    if (slot < 0) throw std::invalid_argument("tape: negative input slot");
    auto s = static_cast<std::size_t>(slot);
    if (tape_.input_node.size() <= s) tape_.input_node.resize(s + 1, kNoNode);
    if (tape_.input_node[s] == kNoNode)
        tape_.input_node[s] = push(Op::Input, static_cast<double>(slot), {});
    return tape_.input_node[s];
}

NodeId TapeBuilder::add(NodeId a, NodeId b) { return push(Op::Add, 0.0, {{a, b}}); }
NodeId TapeBuilder::sub(NodeId a, NodeId b) { return push(Op::Sub, 0.0, {{a, b}}); }
NodeId TapeBuilder::mul(NodeId a, NodeId b) { return push(Op::Mul, 0.0, {{a, b}}); }
NodeId TapeBuilder::square(NodeId a) { return push(Op::Square, 0.0, {{a}}); }
NodeId TapeBuilder::tanh(NodeId a) { return push(Op::Tanh, 0.0, {{a}}); }
NodeId TapeBuilder::reciprocal(NodeId a) { return push(Op::Reciprocal, 0.0, {{a}}); }
NodeId TapeBuilder::sqrt_floor(NodeId a, double floor) { return push(Op::SqrtFloor, floor, {{a}}); }

NodeId TapeBuilder::affine(NodeId bias, std::span<const NodeId> weights,
                           std::span<const NodeId> values) {
    if (weights.size() != values.size()) throw std::invalid_argument("affine: size mismatch");
    std::vector<NodeId> a;
    a.reserve(1 + 2 * weights.size());
    a.push_back(bias == kNoNode ? zero() : bias);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        a.push_back(weights[i]);
        a.push_back(values[i]);
    }
    return push(Op::Affine, 0.0, a);
}

void TapeBuilder::register_output(NodeId n) {
    if (n >= tape_.size()) throw std::invalid_argument("tape: output not recorded");
    tape_.outputs.push_back(n);
}

NodeId TapeBuilder::tangent_step(NodeId n, const std::vector<NodeId>& table) {
    const auto args = tape_.node_args(n);
    auto t = [&](NodeId a) { return table[a]; };
    switch (tape_.ops[n]) {
        case Op::Const:
        case Op::Param:
        case Op::Input:
            return kNoNode;  // leaves handled by the caller
        case Op::Add: {
            NodeId ta = t(args[0]), tb = t(args[1]);
            if (ta == kNoNode) return tb;
            if (tb == kNoNode) return ta;
            return add(ta, tb);
        }
        case Op::Sub: {
            NodeId ta = t(args[0]), tb = t(args[1]);
            if (tb == kNoNode) return ta;
            if (ta == kNoNode) return sub(zero(), tb);
            return sub(ta, tb);
        }
        case Op::Mul: {
            NodeId ta = t(args[0]), tb = t(args[1]);
            NodeId left = (ta == kNoNode) ? kNoNode : mul(ta, args[1]);
            NodeId right = (tb == kNoNode) ? kNoNode : mul(args[0], tb);
            if (left == kNoNode) return right;
            if (right == kNoNode) return left;
            return add(left, right);
        }
        case Op::Square: {
            NodeId ta = t(args[0]);
            if (ta == kNoNode) return kNoNode;
            return mul(constant(2.0), mul(args[0], ta));
        }
        case Op::Tanh: {
            NodeId ta = t(args[0]);
            if (ta == kNoNode) return kNoNode;
            return mul(sub(one(), square(n)), ta);
        }
        case Op::Reciprocal: {
            NodeId ta = t(args[0]);
            if (ta == kNoNode) return kNoNode;
            return sub(zero(), mul(square(n), ta));
        }
        case Op::SqrtFloor: {
            NodeId ta = t(args[0]);
            if (ta == kNoNode) return kNoNode;
            return mul(constant(0.5), mul(reciprocal(n), ta));
        }
        case Op::Affine: {
            NodeId tbias = t(args[0]);
            std::vector<NodeId> ws, xs;
            for (std::size_t i = 1; i + 1 < args.size(); i += 2) {
                NodeId w = args[i], x = args[i + 1];
                if (t(w) != kNoNode) {
                    ws.push_back(t(w));
                    xs.push_back(x);
                }
                if (t(x) != kNoNode) {
                    ws.push_back(w);
                    xs.push_back(t(x));
                }
            }
            if (ws.empty()) return tbias;
            return affine(tbias == kNoNode ? zero() : tbias, ws, xs);
        }
    }
    throw std::logic_error("tape: unhandled op");
}

NodeId TapeBuilder::tangent_of(NodeId node, int wrt_slot) {
    if (node >= tape_.size()) throw std::invalid_argument("tangent_of: unknown node");
    if (wrt_slot < 0 || static_cast<std::size_t>(wrt_slot) >= tape_.input_node.size() ||
        tape_.input_node[static_cast<std::size_t>(wrt_slot)] == kNoNode)
        throw std::invalid_argument("tangent_of: slot is not a recorded input");

    std::size_t table_idx = tangent_slot_of_table_.size();
    for (std::size_t i = 0; i < tangent_slot_of_table_.size(); ++i)
        if (tangent_slot_of_table_[i] == wrt_slot) table_idx = i;
    if (table_idx == tangent_slot_of_table_.size()) {
        tangent_slot_of_table_.push_back(wrt_slot);
        tangent_tables_.emplace_back();
    }
    auto& table = tangent_tables_[table_idx];

    // extend the table up to `node`; new tangent nodes are appended past it,
    // so the walk below never visits them
    const std::size_t limit = static_cast<std::size_t>(node) + 1;
    while (table.size() < limit) {
        const NodeId n = static_cast<NodeId>(table.size());
        table.push_back(kUnset);
        NodeId tn;
        if (tape_.ops[n] == Op::Input) {
            tn = (static_cast<int>(tape_.aux[n]) == wrt_slot) ? one() : kNoNode;
        } else if (tape_.ops[n] == Op::Const || tape_.ops[n] == Op::Param) {
            tn = kNoNode;
        } else {
            tn = tangent_step(n, table);
        }
        table[n] = tn;
    }
    return table[node];
}

Tape TapeBuilder::freeze() && {
    if (tape_.arg_begin.empty()) tape_.arg_begin.push_back(0);
    return std::move(tape_);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

std::vector<double> forward(const Tape& tape, std::span<const double> params,
                            std::span<const double> inputs, Workspace& ws) {
    if (static_cast<int>(params.size()) != tape.n_params())
        throw std::invalid_argument("forward: parameter count mismatch");
    if (static_cast<int>(inputs.size()) != tape.n_inputs())
        throw std::invalid_argument("forward: input count mismatch");

    auto& v = ws.values;
    v.resize(tape.size());
    const std::size_t n = tape.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto* a = tape.args.data() + tape.arg_begin[i];
        switch (tape.ops[i]) {
            case Op::Const: v[i] = tape.aux[i]; break;
            case Op::Param: v[i] = params[static_cast<std::size_t>(tape.aux[i])]; break;
            case Op::Input: v[i] = inputs[static_cast<std::size_t>(tape.aux[i])]; break;
            case Op::Add: v[i] = v[a[0]] + v[a[1]]; break;
            case Op::Sub: v[i] = v[a[0]] - v[a[1]]; break;
            case Op::Mul: v[i] = v[a[0]] * v[a[1]]; break;
            case Op::Square: v[i] = v[a[0]] * v[a[0]]; break;
            case Op::Tanh: v[i] = std::tanh(v[a[0]]); break;
            case Op::Reciprocal: v[i] = 1.0 / v[a[0]]; break;
            case Op::SqrtFloor: v[i] = std::sqrt(v[a[0]] + tape.aux[i]); break;
            case Op::Affine: {
                const std::uint32_t cnt = tape.arg_begin[i + 1] - tape.arg_begin[i];
                double acc = v[a[0]];
                for (std::uint32_t k = 1; k + 1 < cnt; k += 2)
                    acc += v[a[k]] * v[a[k + 1]];
                v[i] = acc;
                break;
            }
        }
    }
    std::vector<double> out(tape.outputs.size());
    for (std::size_t k = 0; k < tape.outputs.size(); ++k) out[k] = v[tape.outputs[k]];
    return out;
}

std::vector<double> forward(const Tape& tape, std::span<const double> params,
                            std::span<const double> inputs) {
    Workspace ws;
    return forward(tape, params, inputs, ws);
}

namespace {

void reverse_sweep(const Tape& tape, std::span<const double> output_seed, Workspace& ws) {
    if (static_cast<int>(output_seed.size()) != tape.n_outputs())
        throw std::invalid_argument("reverse: seed length mismatch");
    auto& adj = ws.adjoints;
    adj.assign(tape.size(), 0.0);
    const auto& v = ws.values;
    for (std::size_t k = 0; k < tape.outputs.size(); ++k) adj[tape.outputs[k]] += output_seed[k];

    for (std::size_t ii = tape.size(); ii-- > 0;) {
        const double g = adj[ii];
        if (g == 0.0) continue;
        const auto* a = tape.args.data() + tape.arg_begin[ii];
        switch (tape.ops[ii]) {
            case Op::Const:
            case Op::Param:
            case Op::Input: break;
            case Op::Add:
                adj[a[0]] += g;
                adj[a[1]] += g;
                break;
            case Op::Sub:
                adj[a[0]] += g;
                adj[a[1]] -= g;
                break;
            case Op::Mul:
                adj[a[0]] += g * v[a[1]];
                adj[a[1]] += g * v[a[0]];
                break;
            case Op::Square: adj[a[0]] += g * 2.0 * v[a[0]]; break;
            case Op::Tanh: adj[a[0]] += g * (1.0 - v[ii] * v[ii]); break;
            case Op::Reciprocal: adj[a[0]] -= g * v[ii] * v[ii]; break;
            case Op::SqrtFloor: adj[a[0]] += g * 0.5 / v[ii]; break;
            case Op::Affine: {
                const std::uint32_t cnt = tape.arg_begin[ii + 1] - tape.arg_begin[ii];
                adj[a[0]] += g;
                for (std::uint32_t k = 1; k + 1 < cnt; k += 2) {
                    adj[a[k]] += g * v[a[k + 1]];
                    adj[a[k + 1]] += g * v[a[k]];
                }
                break;
            }
        }
    }
}

}  // namespace

std::vector<double> grad_params(const Tape& tape, std::span<const double> params,
                                std::span<const double> inputs,
                                std::span<const double> output_seed, Workspace& ws) {
    forward(tape, params, inputs, ws);
    reverse_sweep(tape, output_seed, ws);
    std::vector<double> g(tape.param_node.size(), 0.0);
    for (std::size_t s = 0; s < tape.param_node.size(); ++s)
        if (tape.param_node[s] != kNoNode) g[s] = ws.adjoints[tape.param_node[s]];
    return g;
}

std::vector<double> grad_params(const Tape& tape, std::span<const double> params,
                                std::span<const double> inputs,
                                std::span<const double> output_seed) {
    Workspace ws;
    return grad_params(tape, params, inputs, output_seed, ws);
}

void accumulate_grad(const Tape& tape, std::span<const double> output_seed, double scale,
                     Workspace& ws, std::span<double> grad_accum) {
    if (grad_accum.size() != tape.param_node.size())
        throw std::invalid_argument("accumulate_grad: gradient buffer size mismatch");
    reverse_sweep(tape, output_seed, ws);
    for (std::size_t s = 0; s < tape.param_node.size(); ++s)
        if (tape.param_node[s] != kNoNode) grad_accum[s] += scale * ws.adjoints[tape.param_node[s]];
}

DualBatch spatial_jacobian(const Tape& tape, std::span<const double> params,
                           std::span<const double> inputs, std::span<const int> spatial_slots) {
    for (int s : spatial_slots)
        if (s < 0 || s >= tape.n_inputs())
            throw std::invalid_argument("spatial_jacobian: slot out of range");

    TapeBuilder b(tape);
    std::vector<std::vector<NodeId>> tangent_outputs(spatial_slots.size());
    for (std::size_t d = 0; d < spatial_slots.size(); ++d)
        for (NodeId out : tape.outputs)
            tangent_outputs[d].push_back(b.tangent_of(out, spatial_slots[d]));

    Tape ext = std::move(b).freeze();
    ext.outputs.clear();
    for (NodeId out : tape.outputs) ext.outputs.push_back(out);

    Workspace ws;
    DualBatch res;
    res.primal = forward(ext, params, inputs, ws);
    res.tangents.resize(spatial_slots.size());
    for (std::size_t d = 0; d < spatial_slots.size(); ++d) {
        res.tangents[d].resize(tape.outputs.size());
        for (std::size_t k = 0; k < tape.outputs.size(); ++k) {
            NodeId tn = tangent_outputs[d][k];
            res.tangents[d][k] = (tn == kNoNode) ? 0.0 : ws.values[tn];
        }
    }
    return res;
}

}  // namespace usmnet::ad
