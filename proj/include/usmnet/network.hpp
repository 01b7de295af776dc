#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "usmnet/common.hpp"
#include "usmnet/tape.hpp"

namespace usmnet::net {

/// Canonical input row layout everywhere in this project:
///   [ x or x_hat (spatial_dim) | mu_g (n_landmarks) | mu_p (n_physical) ]
/// Outputs are the k solution components in physical units.

enum class HeadKind { Velocity, Potential, DirichletMask, NonNegative, Symmetric };

struct HeadSpec {
    HeadKind kind = HeadKind::Velocity;
    /// Potential head only: spatial inputs are cavity universal coordinates
    /// (x, y/H); the y-derivative is scaled by 1/H (landmark 0) so the
    /// returned velocity is the physical-coordinate curl.
    bool uc_cavity_scaling = false;
    /// DirichletMask head: registered mask/datum function ids.
    std::string mask_id, datum_id;
    /// Symmetric head: input indices preprocessed by an even function
    /// (square of the normalized value), i.e. outputs are invariant under
    /// reflection about the center of that input's normalization interval.
    std::vector<int> symmetric_inputs;
};

struct ModelSpec {
    int spatial_dim = 2;
    int n_landmarks = 0;
    int n_physical = 0;
    int n_outputs = 2;
    std::vector<int> hidden;
    HeadSpec head;
    std::vector<bool> log10_transform;       // per input slot; empty = all linear
    std::vector<AffineRange> input_range;    // post-transform ranges
    std::vector<AffineRange> output_range;

    int n_inputs() const { return spatial_dim + n_landmarks + n_physical; }
    int core_outputs() const { return head.kind == HeadKind::Potential ? 1 : n_outputs; }
    std::vector<int> layer_widths() const;
    std::size_t param_count() const;
    bool has_log10(int slot) const {
        return !log10_transform.empty() && log10_transform.at(static_cast<std::size_t>(slot));
    }
    void validate() const;
};

std::string spec_to_json(const ModelSpec& spec, bool include_ranges = false);
ModelSpec spec_from_json(const std::string& json_text);

/// Glorot-uniform weights, zero biases, reproducible from seed.
std::vector<double> build_params(const ModelSpec& spec, std::uint64_t seed);

/// log10 where configured, then affine map onto [-1, 1].
std::vector<double> apply_input_transform(const ModelSpec& spec, std::span<const double> raw);

// ---------------------------------------------------------------------------
// Mask / datum registry for the strong Dirichlet head. Builders emit tape
// subgraphs from raw (de-normalized) input nodes.
// ---------------------------------------------------------------------------

struct MaskContext {
    ad::TapeBuilder& builder;
    const ModelSpec& spec;
    /// Raw value of input slot i reconstructed on the tape.
    std::function<ad::NodeId(int)> raw_input;
};

using MaskBuilder = std::function<ad::NodeId(MaskContext&)>;
using DatumBuilder = std::function<std::vector<ad::NodeId>(MaskContext&)>;

void register_mask_function(const std::string& id, MaskBuilder fn);
void register_datum_function(const std::string& id, DatumBuilder fn);

/// Prediction subgraph shared by the compiled model and the training loss.
struct PredictionNodes {
    std::vector<ad::NodeId> physical;    // k outputs in physical units
    std::vector<ad::NodeId> normalized;  // same outputs mapped by the output ranges
};
PredictionNodes append_prediction_graph(ad::TapeBuilder& b, const ModelSpec& spec);

// ---------------------------------------------------------------------------
// Compiled model
// ---------------------------------------------------------------------------

class Model {
public:
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    /// Tape with the k physical outputs registered; inputs are normalized rows.
    const ad::Tape& predict_tape() const { return predict_; }
    /// Node ids of the normalized predictions inside predict_tape().
    const std::vector<ad::NodeId>& normalized_nodes() const { return normalized_; }

    /// Stacks (x, mu_g, mu_p) into a raw row.
    std::vector<double> stack_row(std::span<const double> x, std::span<const double> mu_g,
                                  std::span<const double> mu_p) const;

    std::vector<double> evaluate(std::span<const double> params, std::span<const double> x,
                                 std::span<const double> mu_g, std::span<const double> mu_p,
                                 bool* extrapolated = nullptr) const;
    /// Row-wise evaluate over raw rows (N x n_inputs) -> (N x k); bitwise
    /// identical to the scalar path.
    Eigen::MatrixXd evaluate_batch(std::span<const double> params, const Eigen::MatrixXd& raw_rows,
                                   int workers = 1) const;

    /// d(u_physical) / d(raw spatial input j), k x d, exact (tangent tape +
    /// normalization chain rule). For UC models this is the derivative with
    /// respect to the universal coordinate.
    Eigen::MatrixXd spatial_jacobian_raw(std::span<const double> params,
                                         std::span<const double> raw_row) const;

private:
    ModelSpec spec_;
    ad::Tape predict_;
    std::vector<ad::NodeId> normalized_;
    ad::Tape jac_tape_;                                  // tangent-extended predict tape
    std::vector<std::vector<ad::NodeId>> jac_nodes_;     // [spatial][output]
};

// ---------------------------------------------------------------------------
// Checkpoint: magic "USMN", version, spec JSON, then little-endian f64 for w
// and the normalization ranges. Bit-exact round trip.
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelSpec spec;
    std::vector<double> params;
};

void save_checkpoint(const std::string& path, const ModelSpec& spec,
                     std::span<const double> params);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace usmnet::net
