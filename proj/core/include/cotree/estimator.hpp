#pragma once

// Least-squares state estimation on the loop system. The state augments the
// co-tree loop flows with per-node demand corrections; Gauss-Newton steps
// minimize the squared residuals of the loop equations, a regularization
// block pulling corrections toward zero, and the misfit of head and flow
// measurements. Demand corrections are restricted to an active node set so
// that sparse measurements adjust only nearby consumptions.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotree/simulator.hpp"

namespace cotree {

struct HeadMeasurement {
  int node = 0;
  double value = 0.0;      // m
  double accuracy = 1e-3;  // m, one-sigma style scale used in weighted mode
};

struct FlowMeasurement {
  int pipe = 0;
  double value = 0.0;      // m^3/s, positive along the pipe's from -> to
  double accuracy = 1e-4;  // m^3/s
};

struct MeasurementSet {
  std::vector<HeadMeasurement> heads;
  std::vector<FlowMeasurement> flows;

  bool empty() const { return heads.empty() && flows.empty(); }
};

struct EstimationOptions {
  SimulationOptions sim;           // warm-start simulation settings
  double tol = 1e-8;               // m^3/s, bound on the accepted step
  int max_iter = 30;
  int max_halvings = 8;            // step halvings tried when the residual grows
  bool weighted = false;           // scale rows by measurement accuracies
  double demand_variability = 0.5; // relative spread of predicted demands
  double demand_weight_floor = 1e-4;  // m^3/s, lower bound on the spread
  double physics_weight = -1.0;    // loop-row weight in weighted mode;
                                   // negative picks 1 / min head accuracy
  bool enhancement = true;
  std::optional<std::vector<int>> active_nodes;  // demand nodes free to move;
                                                 // nullopt frees all of them
};

// Residual and Jacobian of the estimation problem over the packed state
// x = [delta_d (n, label order); loop flows (l)]. Rows are ordered loop
// equations, demand regularization, head misfits, flow misfits, and both
// closures apply the same row weights.
struct EstimatorModel {
  int n = 0;        // tree pipes / non-root nodes
  int l = 0;        // loops
  int rows = 0;
  std::vector<int> active_labels;       // node labels free to move, ascending
  std::vector<int> head_meas_labels;    // node label per head row
  std::vector<int> flow_meas_labels;    // pipe label per flow row
  Eigen::VectorXd x0;                   // zero corrections, warm loop flows
  Eigen::VectorXd weights;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> residual;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian;
  // Exact derivative regardless of the enhancement option; the solver falls
  // back to it when the enhanced direction stops making progress.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> jacobian_plain;
};

struct StateEstimate {
  bool converged = false;
  int iterations = 0;
  bool pure_gauss_newton = true;  // no step ever needed halving
  bool fallback_applied = false;  // a negative demand was clamped to zero
  std::string message;
  std::vector<double> delta_demand;  // by Network node order, m^3/s;
                                     // negative means extra consumption
  std::vector<double> demand_final;  // by Network node order, m^3/s
  std::vector<double> flow;          // by Network pipe order
  std::vector<double> head;          // by Network node order
  std::vector<double> inflow;        // by Network node order, fixed-head rows
  Eigen::VectorXd loop_flow;
  double residual_norm = 0.0;        // weighted 2-norm at exit
  std::vector<double> head_misfit;   // measured minus modeled, per head row
  std::vector<double> flow_misfit;   // same, per flow row
};

// Build the weighted residual/Jacobian closures for the given measurements.
// warm_loop_flow seeds the loop-flow part of x0; demand corrections start
// at zero. Throws std::runtime_error on measurements or active nodes that
// do not fit the network (unknown ids, fixed-head or fixed-flow targets).
EstimatorModel assemble_model(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const BoundaryValues& bv,
                              const MeasurementSet& meas, const EstimationOptions& opts,
                              const Eigen::VectorXd& warm_loop_flow);

// Simulate, then refine demands and loop flows against the measurements.
StateEstimate estimate(const Network& net, const SpanningTree& tree,
                       const LoopSystem& loops, const BoundaryValues& bv,
                       const MeasurementSet& meas, const EstimationOptions& opts = {});

// Demand nodes within the given tree distance of any measurement location;
// flow measurements count both endpoints. Ascending node ids.
std::vector<int> constrain_region(const Network& net, const SpanningTree& tree,
                                  const MeasurementSet& meas, int radius = 3);

// Number of estimate() calls since the last reset, for callers that audit
// how many solves an analysis consumed.
int estimator_run_count();
void reset_estimator_run_count();

}  // namespace cotree
