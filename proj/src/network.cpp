#include "usmnet/network.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>

namespace usmnet::net {

using json = nlohmann::json;
using ad::kNoNode;
using ad::NodeId;
using ad::TapeBuilder;

std::vector<int> ModelSpec::layer_widths() const {
    std::vector<int> w;
    w.push_back(n_inputs());
    for (int h : hidden) w.push_back(h);
    w.push_back(core_outputs());
    return w;
}

std::size_t ModelSpec::param_count() const {
    auto w = layer_widths();
    std::size_t n = 0;
    for (std::size_t l = 1; l < w.size(); ++l)
        n += static_cast<std::size_t>(w[l - 1]) * w[l] + static_cast<std::size_t>(w[l]);
    return n;
}

void ModelSpec::validate() const {
    if (spatial_dim < 1) throw std::invalid_argument("ModelSpec: spatial_dim must be >= 1");
    if (n_landmarks < 0 || n_physical < 0) throw std::invalid_argument("ModelSpec: negative arity");
    if (n_outputs < 1) throw std::invalid_argument("ModelSpec: n_outputs must be >= 1");
    if (hidden.empty()) throw std::invalid_argument("ModelSpec: at least one hidden layer required");
    for (int h : hidden)
        if (h < 1) throw std::invalid_argument("ModelSpec: hidden width must be >= 1");
    if (!log10_transform.empty() &&
        log10_transform.size() != static_cast<std::size_t>(n_inputs()))
        throw std::invalid_argument("ModelSpec: log10_transform arity mismatch");
    if (!input_range.empty() && input_range.size() != static_cast<std::size_t>(n_inputs()))
        throw std::invalid_argument("ModelSpec: input_range arity mismatch");
    if (!output_range.empty() && output_range.size() != static_cast<std::size_t>(n_outputs))
        throw std::invalid_argument("ModelSpec: output_range arity mismatch");
    for (const auto& r : input_range) r.validate();
    for (const auto& r : output_range) r.validate();
    switch (head.kind) {
        case HeadKind::Potential:
            if (spatial_dim != 2 || n_outputs != 2)
                throw std::invalid_argument("ModelSpec: potential head needs d=2, k=2");
            if (head.uc_cavity_scaling && n_landmarks < 1)
                throw std::invalid_argument("ModelSpec: uc_cavity_scaling needs a height landmark");
            for (int j = 0; j < spatial_dim; ++j)
                if (has_log10(j))
                    throw std::invalid_argument("ModelSpec: potential head spatial inputs must be linear");
            break;
        case HeadKind::DirichletMask:
            if (head.mask_id.empty() || head.datum_id.empty())
                throw std::invalid_argument("ModelSpec: dirichlet_mask head needs mask and datum ids");
            break;
        case HeadKind::Symmetric:
            if (head.symmetric_inputs.empty())
                throw std::invalid_argument("ModelSpec: symmetric head needs input indices");
            for (int i : head.symmetric_inputs)
                if (i < 0 || i >= n_inputs())
                    throw std::invalid_argument("ModelSpec: symmetric input index out of range");
            break;
        default: break;
    }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

const char* head_name(HeadKind k) {
    switch (k) {
        case HeadKind::Velocity: return "velocity";
        case HeadKind::Potential: return "potential";
        case HeadKind::DirichletMask: return "dirichlet_mask";
        case HeadKind::NonNegative: return "nonnegative";
        case HeadKind::Symmetric: return "symmetric";
    }
    return "?";
}

HeadKind head_from_name(const std::string& s) {
    if (s == "velocity") return HeadKind::Velocity;
    if (s == "potential") return HeadKind::Potential;
    if (s == "dirichlet_mask") return HeadKind::DirichletMask;
    if (s == "nonnegative") return HeadKind::NonNegative;
    if (s == "symmetric") return HeadKind::Symmetric;
    throw std::invalid_argument("unknown head kind: " + s);
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec, bool include_ranges) {
    json j;
    j["spatial_dim"] = spec.spatial_dim;
    j["n_landmarks"] = spec.n_landmarks;
    j["n_physical"] = spec.n_physical;
    j["n_outputs"] = spec.n_outputs;
    j["hidden"] = spec.hidden;
    json h;
    h["kind"] = head_name(spec.head.kind);
    if (spec.head.kind == HeadKind::Potential) h["uc_cavity_scaling"] = spec.head.uc_cavity_scaling;
    if (spec.head.kind == HeadKind::DirichletMask) {
        h["mask"] = spec.head.mask_id;
        h["datum"] = spec.head.datum_id;
    }
    if (spec.head.kind == HeadKind::Symmetric) h["symmetric_inputs"] = spec.head.symmetric_inputs;
    j["head"] = h;
    json tr = json::array();
    for (int i = 0; i < spec.n_inputs(); ++i) tr.push_back(spec.has_log10(i) ? "log10" : "linear");
    j["transforms"] = tr;
    if (include_ranges) {
        json ir = json::array(), orr = json::array();
        for (const auto& r : spec.input_range) ir.push_back({r.lo, r.hi});
        for (const auto& r : spec.output_range) orr.push_back({r.lo, r.hi});
        j["input_range"] = ir;
        j["output_range"] = orr;
    }
    return j.dump();
}

ModelSpec spec_from_json(const std::string& text) {
    json j = json::parse(text);
    ModelSpec s;
    s.spatial_dim = j.at("spatial_dim").get<int>();
    s.n_landmarks = j.at("n_landmarks").get<int>();
    s.n_physical = j.at("n_physical").get<int>();
    s.n_outputs = j.at("n_outputs").get<int>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    const json& h = j.at("head");
    s.head.kind = head_from_name(h.at("kind").get<std::string>());
    if (h.contains("uc_cavity_scaling")) s.head.uc_cavity_scaling = h["uc_cavity_scaling"].get<bool>();
    if (h.contains("mask")) s.head.mask_id = h["mask"].get<std::string>();
    if (h.contains("datum")) s.head.datum_id = h["datum"].get<std::string>();
    if (h.contains("symmetric_inputs"))
        s.head.symmetric_inputs = h["symmetric_inputs"].get<std::vector<int>>();
    if (j.contains("transforms")) {
        for (const auto& t : j["transforms"])
            s.log10_transform.push_back(t.get<std::string>() == "log10");
    }
    auto read_ranges = [&](const char* key, std::vector<AffineRange>& out) {
        if (!j.contains(key)) return;
        for (const auto& r : j[key]) out.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
    };
    read_ranges("input_range", s.input_range);
    read_ranges("output_range", s.output_range);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// init + transforms
// ---------------------------------------------------------------------------

std::vector<double> build_params(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    auto widths = spec.layer_widths();
    std::vector<double> w;
    w.reserve(spec.param_count());
    for (std::size_t l = 1; l < widths.size(); ++l) {
        const int fan_in = widths[l - 1], fan_out = widths[l];
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (int i = 0; i < fan_in * fan_out; ++i) w.push_back(rng.uniform(-limit, limit));
        for (int i = 0; i < fan_out; ++i) w.push_back(0.0);
    }
    return w;
}

std::vector<double> apply_input_transform(const ModelSpec& spec, std::span<const double> raw) {
    if (static_cast<int>(raw.size()) != spec.n_inputs())
        throw std::invalid_argument("apply_input_transform: arity mismatch");
    if (spec.input_range.size() != static_cast<std::size_t>(spec.n_inputs()))
        throw std::invalid_argument("apply_input_transform: normalization not configured");
    std::vector<double> z(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        double v = raw[i];
        if (spec.has_log10(static_cast<int>(i))) {
            if (!(v > 0.0))
                throw std::invalid_argument("apply_input_transform: non-positive value under log10");
            v = std::log10(v);
        }
        z[i] = spec.input_range[i].normalize(v);
    }
    return z;
}

// ---------------------------------------------------------------------------
// mask / datum registry
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, MaskBuilder>& mask_registry() {
    static std::map<std::string, MaskBuilder> reg;
    return reg;
}
std::map<std::string, DatumBuilder>& datum_registry() {
    static std::map<std::string, DatumBuilder> reg;
    return reg;
}
std::mutex& registry_mutex() {
    static std::mutex m;
    return m;
}

void ensure_builtin_masks() {
    static std::once_flag once;
    std::call_once(once, [] {
        // vanishes on the boundary of the unit square (UC-side mask)
        mask_registry()["unit_square_walls"] = [](MaskContext& c) {
            auto& b = c.builder;
            NodeId x = c.raw_input(0), y = c.raw_input(1);
            NodeId one = b.constant(1.0);
            return b.mul(b.mul(x, b.sub(one, x)), b.mul(y, b.sub(one, y)));
        };
        // vanishes on the boundary of (0,1) x (0,H), H = landmark 0
        mask_registry()["cavity_walls"] = [](MaskContext& c) {
            auto& b = c.builder;
            NodeId x = c.raw_input(0), y = c.raw_input(1);
            NodeId h = c.raw_input(c.spec.spatial_dim);
            NodeId one = b.constant(1.0);
            return b.mul(b.mul(x, b.sub(one, x)), b.mul(y, b.sub(h, y)));
        };
        datum_registry()["zero"] = [](MaskContext& c) {
            std::vector<NodeId> d(static_cast<std::size_t>(c.spec.n_outputs),
                                  c.builder.constant(0.0));
            return d;
        };
        // smooth lid lift for the cavity: ((y/H)^2, 0)
        datum_registry()["cavity_lid_quadratic"] = [](MaskContext& c) {
            auto& b = c.builder;
            NodeId y = c.raw_input(1);
            NodeId h = c.raw_input(c.spec.spatial_dim);
            NodeId frac = b.mul(y, b.reciprocal(h));
            std::vector<NodeId> d{b.square(frac), b.constant(0.0)};
            d.resize(static_cast<std::size_t>(c.spec.n_outputs), b.constant(0.0));
            return d;
        };
    });
}

}  // namespace

void register_mask_function(const std::string& id, MaskBuilder fn) {
    ensure_builtin_masks();
    std::lock_guard<std::mutex> lock(registry_mutex());
    mask_registry()[id] = std::move(fn);
}

void register_datum_function(const std::string& id, DatumBuilder fn) {
    ensure_builtin_masks();
    std::lock_guard<std::mutex> lock(registry_mutex());
    datum_registry()[id] = std::move(fn);
}

// ---------------------------------------------------------------------------
// prediction graph
// ---------------------------------------------------------------------------

PredictionNodes append_prediction_graph(TapeBuilder& b, const ModelSpec& spec) {
    spec.validate();
    if (spec.input_range.size() != static_cast<std::size_t>(spec.n_inputs()) ||
        spec.output_range.size() != static_cast<std::size_t>(spec.n_outputs))
        throw std::invalid_argument("append_prediction_graph: normalization not configured");
    ensure_builtin_masks();

    const int n_in = spec.n_inputs();
    std::vector<NodeId> leaves;
    for (int i = 0; i < n_in; ++i) leaves.push_back(b.input(i));

    // raw values reconstructed on tape, for masks and the UC height factor
    auto raw_input = [&](int i) -> NodeId {
        if (spec.has_log10(i))
            throw std::invalid_argument("raw_input: slot uses a log transform");
        const auto& r = spec.input_range[static_cast<std::size_t>(i)];
        NodeId s = b.constant(r.half_width());
        return b.affine(b.constant(r.center()), {{s}}, {{leaves[static_cast<std::size_t>(i)]}});
    };

    // input preprocessing (symmetric head squares the normalized value)
    std::vector<NodeId> core_in = leaves;
    if (spec.head.kind == HeadKind::Symmetric)
        for (int i : spec.head.symmetric_inputs)
            core_in[static_cast<std::size_t>(i)] = b.square(leaves[static_cast<std::size_t>(i)]);

    // fully connected tanh core; parameter slots in layer order
    auto widths = spec.layer_widths();
    int pslot = 0;
    std::vector<NodeId> layer = core_in;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        const int fan_in = widths[l - 1], fan_out = widths[l];
        const int wbase = pslot;
        const int bbase = pslot + fan_in * fan_out;
        std::vector<NodeId> next;
        next.reserve(static_cast<std::size_t>(fan_out));
        for (int o = 0; o < fan_out; ++o) {
            std::vector<NodeId> ws;
            ws.reserve(static_cast<std::size_t>(fan_in));
            for (int i = 0; i < fan_in; ++i) ws.push_back(b.param(wbase + o * fan_in + i));
            NodeId z = b.affine(b.param(bbase + o), ws, layer);
            next.push_back(l + 1 == widths.size() ? z : b.tanh(z));
        }
        pslot = bbase + fan_out;
        layer = std::move(next);
    }

    PredictionNodes out;
    auto denorm = [&](NodeId n, int k) {
        const auto& r = spec.output_range[static_cast<std::size_t>(k)];
        NodeId s = b.constant(r.half_width());
        return b.affine(b.constant(r.center()), {{s}}, {{n}});
    };
    auto norm = [&](NodeId n, int k) {
        const auto& r = spec.output_range[static_cast<std::size_t>(k)];
        NodeId s = b.constant(1.0 / r.half_width());
        NodeId c = b.constant(-r.center() / r.half_width());
        return b.affine(c, {{s}}, {{n}});
    };

    switch (spec.head.kind) {
        case HeadKind::Velocity:
        case HeadKind::Symmetric: {
            for (int k = 0; k < spec.n_outputs; ++k) {
                out.normalized.push_back(layer[static_cast<std::size_t>(k)]);
                out.physical.push_back(denorm(layer[static_cast<std::size_t>(k)], k));
            }
            break;
        }
        case HeadKind::NonNegative: {
            for (int k = 0; k < spec.n_outputs; ++k) {
                NodeId u = b.square(denorm(layer[static_cast<std::size_t>(k)], k));
                out.physical.push_back(u);
                out.normalized.push_back(norm(u, k));
            }
            break;
        }
        case HeadKind::DirichletMask: {
            MaskBuilder mask_fn;
            DatumBuilder datum_fn;
            {
                std::lock_guard<std::mutex> lock(registry_mutex());
                auto mi = mask_registry().find(spec.head.mask_id);
                auto di = datum_registry().find(spec.head.datum_id);
                if (mi == mask_registry().end())
                    throw std::invalid_argument("unknown mask function: " + spec.head.mask_id);
                if (di == datum_registry().end())
                    throw std::invalid_argument("unknown datum function: " + spec.head.datum_id);
                mask_fn = mi->second;
                datum_fn = di->second;
            }
            MaskContext ctx{b, spec, raw_input};
            NodeId mask = mask_fn(ctx);
            auto datum = datum_fn(ctx);
            if (datum.size() != static_cast<std::size_t>(spec.n_outputs))
                throw std::invalid_argument("datum function arity mismatch");
            for (int k = 0; k < spec.n_outputs; ++k) {
                NodeId u = b.add(b.mul(mask, denorm(layer[static_cast<std::size_t>(k)], k)),
                                 datum[static_cast<std::size_t>(k)]);
                out.physical.push_back(u);
                out.normalized.push_back(norm(u, k));
            }
            break;
        }
        case HeadKind::Potential: {
            // physical-coordinate curl of the scalar core output
            NodeId psi = layer[0];
            NodeId t_x = b.tangent_of(psi, 0);
            NodeId t_y = b.tangent_of(psi, 1);
            if (t_x == kNoNode) t_x = b.constant(0.0);
            if (t_y == kNoNode) t_y = b.constant(0.0);
            const double inv_sx = 1.0 / spec.input_range[0].half_width();
            const double inv_sy = 1.0 / spec.input_range[1].half_width();
            NodeId kappa_y = b.constant(inv_sy);
            if (spec.head.uc_cavity_scaling) {
                NodeId h_raw = raw_input(spec.spatial_dim);  // landmark 0 = H
                kappa_y = b.mul(kappa_y, b.reciprocal(h_raw));
            }
            NodeId vx = b.mul(t_y, kappa_y);
            NodeId vy = b.sub(b.constant(0.0), b.mul(t_x, b.constant(inv_sx)));
            out.physical = {vx, vy};
            for (int k = 0; k < 2; ++k) out.normalized.push_back(norm(out.physical[static_cast<std::size_t>(k)], k));
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    TapeBuilder b;
    auto nodes = append_prediction_graph(b, spec_);
    for (NodeId n : nodes.physical) b.register_output(n);
    normalized_ = nodes.normalized;
    predict_ = std::move(b).freeze();

    // eager tangent extension so spatial_jacobian_raw is immutable afterwards
    TapeBuilder jb(predict_);
    jac_nodes_.resize(static_cast<std::size_t>(spec_.spatial_dim));
    for (int d = 0; d < spec_.spatial_dim; ++d)
        for (NodeId outn : predict_.outputs)
            jac_nodes_[static_cast<std::size_t>(d)].push_back(jb.tangent_of(outn, d));
    jac_tape_ = std::move(jb).freeze();
}

std::vector<double> Model::stack_row(std::span<const double> x, std::span<const double> mu_g,
                                     std::span<const double> mu_p) const {
    if (static_cast<int>(x.size()) != spec_.spatial_dim ||
        static_cast<int>(mu_g.size()) != spec_.n_landmarks ||
        static_cast<int>(mu_p.size()) != spec_.n_physical)
        throw std::invalid_argument("evaluate: dimension mismatch");
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(spec_.n_inputs()));
    row.insert(row.end(), x.begin(), x.end());
    row.insert(row.end(), mu_g.begin(), mu_g.end());
    row.insert(row.end(), mu_p.begin(), mu_p.end());
    return row;
}

std::vector<double> Model::evaluate(std::span<const double> params, std::span<const double> x,
                                    std::span<const double> mu_g, std::span<const double> mu_p,
                                    bool* extrapolated) const {
    auto raw = stack_row(x, mu_g, mu_p);
    auto z = apply_input_transform(spec_, raw);
    if (extrapolated) {
        *extrapolated = false;
        for (double v : z)
            if (std::abs(v) > 1.0 + 1e-9) *extrapolated = true;
    }
    return ad::forward(predict_, params, z);
}

Eigen::MatrixXd Model::evaluate_batch(std::span<const double> params,
                                      const Eigen::MatrixXd& raw_rows, int workers) const {
    if (raw_rows.cols() != spec_.n_inputs() && raw_rows.rows() > 0)
        throw std::invalid_argument("evaluate_batch: column count mismatch");
    Eigen::MatrixXd out(raw_rows.rows(), spec_.n_outputs);
    const auto n = static_cast<std::size_t>(raw_rows.rows());
    parallel_for(n, workers, [&](std::size_t r) {
        thread_local ad::Workspace ws;
        std::vector<double> raw(static_cast<std::size_t>(spec_.n_inputs()));
        for (int c = 0; c < spec_.n_inputs(); ++c) raw[static_cast<std::size_t>(c)] = raw_rows(static_cast<Eigen::Index>(r), c);
        auto z = apply_input_transform(spec_, raw);
        auto u = ad::forward(predict_, params, z, ws);
        for (int k = 0; k < spec_.n_outputs; ++k) out(static_cast<Eigen::Index>(r), k) = u[static_cast<std::size_t>(k)];
    });
    return out;
}

Eigen::MatrixXd Model::spatial_jacobian_raw(std::span<const double> params,
                                            std::span<const double> raw_row) const {
    auto z = apply_input_transform(spec_, raw_row);
    ad::Workspace ws;
    ad::forward(jac_tape_, params, z, ws);
    Eigen::MatrixXd J(spec_.n_outputs, spec_.spatial_dim);
    for (int d = 0; d < spec_.spatial_dim; ++d) {
        const double inv_s = 1.0 / spec_.input_range[static_cast<std::size_t>(d)].half_width();
        for (int k = 0; k < spec_.n_outputs; ++k) {
            NodeId tn = jac_nodes_[static_cast<std::size_t>(d)][static_cast<std::size_t>(k)];
            J(k, d) = (tn == kNoNode) ? 0.0 : ws.values[tn] * inv_s;
        }
    }
    return J;
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ModelSpec& spec,
                     std::span<const double> params) {
    spec.validate();
    if (params.size() != spec.param_count())
        throw std::invalid_argument("save_checkpoint: parameter count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("USMN", 4);
    write_u32(os, 1);  // format version
    const std::string j = spec_to_json(spec, false);
    write_u32(os, static_cast<std::uint32_t>(j.size()));
    os.write(j.data(), static_cast<std::streamsize>(j.size()));
    write_f64_array(os, params);
    for (const auto& r : spec.input_range) {
        write_f64(os, r.lo);
        write_f64(os, r.hi);
    }
    for (const auto& r : spec.output_range) {
        write_f64(os, r.lo);
        write_f64(os, r.hi);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "USMN")
        throw std::runtime_error("load_checkpoint: bad magic");
    const std::uint32_t version = read_u32(is);
    if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
    const std::uint32_t jlen = read_u32(is);
    std::string j(jlen, '\0');
    is.read(j.data(), jlen);
    if (!is) throw std::runtime_error("load_checkpoint: truncated spec");

    Checkpoint ck;
    ck.spec = spec_from_json(j);
    ck.params.resize(ck.spec.param_count());
    read_f64_array(is, ck.params);
    ck.spec.input_range.resize(static_cast<std::size_t>(ck.spec.n_inputs()));
    for (auto& r : ck.spec.input_range) {
        r.lo = read_f64(is);
        r.hi = read_f64(is);
    }
    ck.spec.output_range.resize(static_cast<std::size_t>(ck.spec.n_outputs));
    for (auto& r : ck.spec.output_range) {
        r.lo = read_f64(is);
        r.hi = read_f64(is);
    }
    ck.spec.validate();
    return ck;
}

}  // namespace usmnet::net
