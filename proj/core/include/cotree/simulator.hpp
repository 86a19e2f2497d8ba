#pragma once

// Steady-state solvers. The primary solver runs Newton iterations on the
// loop head-loss residuals of the co-tree formulation: tree flows follow
// from demands by back-substitution, corrective flows circulate in chord
// loops and pseudo-loops, and nodal heads are recovered by walking the tree.
// A nodal-equations solver over unknown heads provides an independent
// cross-check on the same boundary conditions.

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotree/network.hpp"
#include "cotree/topology.hpp"

namespace cotree {

// Boundary data for one steady-state solve: nodal demands, external inflows
// at fixed-head nodes (for head-known nodes this is only the starting
// guess), and fixed heads. defaults() pulls demands and heads from the
// network and zeroes all inflows.
struct BoundaryValues {
  std::vector<double> demand;      // by Network node order, m^3/s
  std::map<int, double> inflow;    // fixed-head node id -> inflow, m^3/s
  std::map<int, double> head;      // fixed-head node id -> head, m

  static BoundaryValues defaults(const Network& net);
};

struct SimulationOptions {
  double tol = 1e-4;           // m^3/s, convergence bound on the flow step
  int max_iter = 50;
  double seed_flow = 1e-4;     // m^3/s, seed for zero-head-loss loops
  bool enhancement = true;     // blend head-difference chord flows into the
                               // Jacobian diagonal
  double relaxation = 1.0;     // under-relaxation factor on Newton steps
  double head_tol_rel = 1e-6;  // loop residual bound, relative to max |h|
  double head_tol_abs = 1e-9;  // and absolute floor, m
};

struct SimulationResult {
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;        // max |loop residual| at exit, m
  double max_step = 0.0;        // last flow step, m^3/s
  std::string message;
  std::vector<double> flow;     // by Network pipe order, positive from -> to
  std::vector<double> head;     // by Network node order, m
  std::vector<double> inflow;   // by Network node order, fixed-head rows only
  Eigen::VectorXd loop_flow;    // corrective flow per loop
  Eigen::VectorXd q_label;      // pipe flows by label orientation, size p
};

// Net nodal demand in label space: demand minus known inflow, shifted by the
// constant flows of fixed-flow pipes. Entry i-1 belongs to node label i.
Eigen::VectorXd label_demand(const Network& net, const SpanningTree& tree,
                             const BoundaryValues& bv);

// Tree flows carrying the demands, obtained by back-substitution on T;
// chord entries are zero. Entry j-1 belongs to pipe label j.
Eigen::VectorXd initial_flows(const SpanningTree& tree, const Eigen::VectorXd& d_label);

// Nodal heads by label (entry 0 = root) from a forward traversal of the
// tree, subtracting each tree pipe's signed head loss from its parent head.
Eigen::VectorXd recover_heads(const Network& net, const SpanningTree& tree,
                              const Eigen::VectorXd& q_label, double root_head);

// Diagonal of the head-loss derivative, a_j = n k_j |q_j|^(n-1). When
// enhance is set, chord entries are rebuilt from the average of the chord
// flow and the flow implied by the head difference across the chord.
Eigen::VectorXd head_loss_derivative_diagonal(const Network& net, const SpanningTree& tree,
                                              const LoopSystem& loops,
                                              const Eigen::VectorXd& q_label,
                                              bool enhance = false,
                                              const Eigen::VectorXd* heads_label = nullptr);

// Loop Jacobian J = M diag(a) M^T at the given pipe flows.
Eigen::MatrixXd loop_jacobian(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const Eigen::VectorXd& q_label);

// Loop head-loss residuals: chord rows sum signed losses around the cycle,
// pseudo rows additionally subtract the enforced head difference.
Eigen::VectorXd loop_residual(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const Eigen::VectorXd& q_label,
                              const BoundaryValues& bv);

// Newton solve on the loop system.
SimulationResult solve_cotree(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const BoundaryValues& bv,
                              const SimulationOptions& opts = {});

// Independent reference: damped Newton on nodal continuity with heads as
// unknowns. head_known selects the fixed-head nodes (besides the root) whose
// heads are pinned; the rest contribute their BoundaryValues inflow.
SimulationResult oracle_nodal_solve(const Network& net, const BoundaryValues& bv,
                                    int root_id = -1,
                                    const std::optional<std::vector<int>>& head_known = std::nullopt,
                                    double tol = 1e-12, int max_iter = 300);

// Worst continuity violation |A q - d_net| over non-root nodes, for checks.
double continuity_error(const Network& net, const SpanningTree& tree,
                        const LoopSystem& loops, const Eigen::VectorXd& q_label,
                        const BoundaryValues& bv);

}  // namespace cotree
