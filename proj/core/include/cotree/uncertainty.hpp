#pragma once

// Confidence limit analysis for estimated states under unknown-but-bounded
// measurement errors. Two production methods: the experimental sensitivity
// matrix (one extra estimation per measurement, limits from the maximized
// linear form) and error maximization (a single extra estimation at the
// error-box corner). A third method propagating bounds through the loop
// sensitivity system is kept as a diagnostic; it reproduces a known
// inaccuracy and is excluded from default reporting.

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cotree/estimator.hpp"

namespace cotree {

// Half-width error bounds per measurement class. Fractions apply to the
// magnitude of the measured quantity, absolute values are in the unit of
// the quantity.
struct UncertaintySpec {
  double demand_variability = 0.2;    // fraction of each predicted demand
  double head_meas_accuracy = 0.0;    // m
  double flow_meas_accuracy = 0.0;    // m^3/s
  double fixed_head_accuracy = 0.01;  // m
  double inflow_accuracy = 0.01;      // fraction of each known inflow
};

enum class ClaMethod { Esm, Em, LoopSens };
enum class EmDirection { Lower, Upper, Both };

// Half-width confidence limits for the state variables: heads at every
// node followed by inflows at fixed-head nodes.
struct ConfidenceLimits {
  ClaMethod method = ClaMethod::Esm;
  std::vector<std::string> variable;  // "head:<node>" / "inflow:<node>"
  Eigen::VectorXd estimate;           // reference state the limits bracket
  Eigen::VectorXd limit;              // reported half-widths, >= 0
  Eigen::VectorXd lower_limit;        // per-direction widths; equal to limit
  Eigen::VectorXd upper_limit;        // for symmetric methods
  std::vector<std::string> notes;     // excluded columns, unreliable ratios
};

struct EsmColumn {
  std::string label;  // "demand:<node>", "headmeas:<node>", "flowmeas:<pipe>",
                      // "fixedhead:<node>", "inflow:<node>"
  double dz = 0.0;    // applied perturbation half-width
  bool converged = true;
};

// Sensitivity of the state to each measurement, estimated experimentally:
// column j holds (x(z + dz_j e_j) - x(z)) / dz_j.
struct EsmMatrix {
  Eigen::MatrixXd S;  // state variables x measurement columns
  std::vector<EsmColumn> columns;
  std::vector<std::string> variable;
  Eigen::VectorXd baseline;
};

// State packing shared by the methods and their consumers.
std::vector<std::string> state_variable_names(const Network& net);
Eigen::VectorXd pack_state(const Network& net, const std::vector<double>& head,
                           const std::vector<double>& inflow);

// One baseline estimation plus one (or two, central) per measurement with a
// nonzero half-width. Zero-width measurements are skipped; a spec with no
// nonzero width at all is an error. Perturbed runs that fail to converge
// are flagged in columns/notes and excluded from limits.
EsmMatrix esm_build(const Network& net, const SpanningTree& tree,
                    const LoopSystem& loops, const BoundaryValues& bv,
                    const MeasurementSet& meas, const EstimationOptions& eopts,
                    const UncertaintySpec& spec, bool central = false);

// limit_i = sum_j |S_ij| dz_j over converged columns: the maximum of the
// linearized state deviation over the error box.
ConfidenceLimits esm_limits(const EsmMatrix& esm);

// The estimation inputs with every estimated measurement moved to one end
// of its error interval (s = -1 or +1), anchored at the given baseline
// estimate. This is the input of an error-maximization bound run; it is
// exposed so pipelines can rerun the estimation themselves and keep the
// full bound-state estimate instead of just the packed limits.
std::pair<BoundaryValues, MeasurementSet> em_shifted_inputs(
    const Network& net, const SpanningTree& tree, const LoopSystem& loops,
    const BoundaryValues& bv, const MeasurementSet& meas,
    const UncertaintySpec& spec, const StateEstimate& base, double s);

// Shifts every estimated measurement to its chosen error bound and re-runs
// the estimation once per direction; limits are |x_bound - x_baseline|.
// Both directions reports the componentwise max and persists each side.
ConfidenceLimits em_limits(const Network& net, const SpanningTree& tree,
                           const LoopSystem& loops, const BoundaryValues& bv,
                           const MeasurementSet& meas, const EstimationOptions& eopts,
                           const UncertaintySpec& spec,
                           EmDirection direction = EmDirection::Both);

// Diagnostic only: propagates demand bounds through the loop sensitivity
// system (initial-flow residuals scaled by the per-loop ratio of initial
// residual to Jacobian-predicted correction). Known to produce asymmetric,
// unreliable limits; kept to document that behavior. Loops whose predicted
// correction is below 1e-9 are flagged in notes.
ConfidenceLimits loop_sensitivity_limits(const Network& net, const SpanningTree& tree,
                                         const LoopSystem& loops,
                                         const BoundaryValues& bv,
                                         const UncertaintySpec& spec,
                                         const SimulationOptions& sopts = {});

}  // namespace cotree
