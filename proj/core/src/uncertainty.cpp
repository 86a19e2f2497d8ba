#include "cotree/uncertainty.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cotree {

namespace {

void check_spec(const UncertaintySpec& spec) {
  auto bad = [](const char* name) {
    throw std::runtime_error(std::string("uncertainty spec: ") + name + " must be >= 0");
  };
  if (spec.demand_variability < 0.0) bad("demand_variability");
  if (spec.head_meas_accuracy < 0.0) bad("head_meas_accuracy");
  if (spec.flow_meas_accuracy < 0.0) bad("flow_meas_accuracy");
  if (spec.fixed_head_accuracy < 0.0) bad("fixed_head_accuracy");
  if (spec.inflow_accuracy < 0.0) bad("inflow_accuracy");
}

enum class ZKind { Demand, HeadMeas, FlowMeas, FixedHead, Inflow };

// One perturbable input: a predicted demand, a meter reading, or a piece of
// boundary data, together with its half-width.
struct ZEntry {
  ZKind kind = ZKind::Demand;
  int id = 0;    // node or pipe id, for labeling
  int idx = 0;   // position in the owning container
  double dz = 0.0;
};

std::string z_label(const ZEntry& z) {
  switch (z.kind) {
    case ZKind::Demand: return "demand:" + std::to_string(z.id);
    case ZKind::HeadMeas: return "headmeas:" + std::to_string(z.id);
    case ZKind::FlowMeas: return "flowmeas:" + std::to_string(z.id);
    case ZKind::FixedHead: return "fixedhead:" + std::to_string(z.id);
    case ZKind::Inflow: return "inflow:" + std::to_string(z.id);
  }
  return "?";
}

void apply_shift(BoundaryValues& bv, MeasurementSet& meas, const ZEntry& z, double delta) {
  switch (z.kind) {
    case ZKind::Demand: bv.demand[static_cast<size_t>(z.idx)] += delta; break;
    case ZKind::HeadMeas: meas.heads[static_cast<size_t>(z.idx)].value += delta; break;
    case ZKind::FlowMeas: meas.flows[static_cast<size_t>(z.idx)].value += delta; break;
    case ZKind::FixedHead: bv.head[z.id] += delta; break;
    case ZKind::Inflow: bv.inflow[z.id] += delta; break;
  }
}

// Fixed-head nodes whose inflow is boundary data: not the root and not
// head-enforced through a pseudo-loop.
std::vector<int> inflow_known_nodes(const Network& net, const SpanningTree& tree,
                                    const LoopSystem& loops) {
  std::vector<int> out;
  for (const Node& nd : net.nodes) {
    if (nd.kind != NodeKind::FixedHead || nd.id == tree.root_id) continue;
    bool enforced = false;
    for (int id : loops.pseudo_node_id) enforced = enforced || id == nd.id;
    if (!enforced) out.push_back(nd.id);
  }
  return out;
}

std::vector<ZEntry> enumerate_measurements(const Network& net, const SpanningTree& tree,
                                           const LoopSystem& loops, const BoundaryValues& bv,
                                           const MeasurementSet& meas,
                                           const UncertaintySpec& spec) {
  std::vector<ZEntry> zs;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    if (net.nodes[i].kind != NodeKind::Demand) continue;
    double dz = spec.demand_variability * std::abs(bv.demand[i]);
    zs.push_back({ZKind::Demand, net.nodes[i].id, static_cast<int>(i), dz});
  }
  for (size_t i = 0; i < meas.heads.size(); ++i)
    zs.push_back({ZKind::HeadMeas, meas.heads[i].node, static_cast<int>(i),
                  spec.head_meas_accuracy});
  for (size_t i = 0; i < meas.flows.size(); ++i)
    zs.push_back({ZKind::FlowMeas, meas.flows[i].pipe, static_cast<int>(i),
                  spec.flow_meas_accuracy});
  for (int id : net.fixed_head_nodes())
    zs.push_back({ZKind::FixedHead, id, 0, spec.fixed_head_accuracy});
  for (int id : inflow_known_nodes(net, tree, loops)) {
    auto it = bv.inflow.find(id);
    double value = it == bv.inflow.end() ? 0.0 : it->second;
    zs.push_back({ZKind::Inflow, id, 0, spec.inflow_accuracy * std::abs(value)});
  }
  return zs;
}

Eigen::VectorXd abs_state_gap(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs();
}

}  // namespace

std::vector<std::string> state_variable_names(const Network& net) {
  std::vector<std::string> names;
  for (const Node& nd : net.nodes) names.push_back("head:" + std::to_string(nd.id));
  for (int id : net.fixed_head_nodes()) names.push_back("inflow:" + std::to_string(id));
  return names;
}

Eigen::VectorXd pack_state(const Network& net, const std::vector<double>& head,
                           const std::vector<double>& inflow) {
  const std::vector<int> fixed = net.fixed_head_nodes();
  Eigen::VectorXd x(net.nodes.size() + fixed.size());
  for (size_t i = 0; i < net.nodes.size(); ++i) x(static_cast<int>(i)) = head[i];
  for (size_t j = 0; j < fixed.size(); ++j) {
    int idx = net.node_index(fixed[j]);
    x(static_cast<int>(net.nodes.size() + j)) = inflow[static_cast<size_t>(idx)];
  }
  return x;
}

EsmMatrix esm_build(const Network& net, const SpanningTree& tree, const LoopSystem& loops,
                    const BoundaryValues& bv, const MeasurementSet& meas,
                    const EstimationOptions& eopts, const UncertaintySpec& spec,
                    bool central) {
  check_spec(spec);
  std::vector<ZEntry> all = enumerate_measurements(net, tree, loops, bv, meas, spec);
  std::vector<ZEntry> zs;
  for (const ZEntry& z : all)
    if (z.dz > 0.0) zs.push_back(z);
  if (zs.empty())
    throw std::runtime_error("sensitivity matrix undefined: every measurement half-width is zero");

  StateEstimate base = estimate(net, tree, loops, bv, meas, eopts);
  if (!base.converged)
    throw std::runtime_error("sensitivity baseline did not converge: " + base.message);

  EsmMatrix esm;
  esm.variable = state_variable_names(net);
  esm.baseline = pack_state(net, base.head, base.inflow);
  esm.S = Eigen::MatrixXd::Zero(esm.baseline.size(), static_cast<int>(zs.size()));

  for (size_t j = 0; j < zs.size(); ++j) {
    const ZEntry& z = zs[j];
    EsmColumn col{z_label(z), z.dz, true};

    BoundaryValues bvp = bv;
    MeasurementSet mp = meas;
    apply_shift(bvp, mp, z, z.dz);
    StateEstimate up = estimate(net, tree, loops, bvp, mp, eopts);
    col.converged = up.converged;

    Eigen::VectorXd low = esm.baseline;
    double span = z.dz;
    if (central && col.converged) {
      BoundaryValues bvm = bv;
      MeasurementSet mm = meas;
      apply_shift(bvm, mm, z, -z.dz);
      StateEstimate down = estimate(net, tree, loops, bvm, mm, eopts);
      col.converged = down.converged;
      if (col.converged) {
        low = pack_state(net, down.head, down.inflow);
        span = 2.0 * z.dz;
      }
    }

    if (col.converged)
      esm.S.col(static_cast<int>(j)) = (pack_state(net, up.head, up.inflow) - low) / span;
    esm.columns.push_back(col);
  }
  return esm;
}

ConfidenceLimits esm_limits(const EsmMatrix& esm) {
  ConfidenceLimits cl;
  cl.method = ClaMethod::Esm;
  cl.variable = esm.variable;
  cl.estimate = esm.baseline;
  cl.limit = Eigen::VectorXd::Zero(esm.baseline.size());
  for (size_t j = 0; j < esm.columns.size(); ++j) {
    const EsmColumn& col = esm.columns[j];
    if (!col.converged) {
      cl.notes.push_back("column " + col.label + " did not converge, excluded from limits");
      continue;
    }
    cl.limit += esm.S.col(static_cast<int>(j)).cwiseAbs() * col.dz;
  }
  cl.lower_limit = cl.limit;
  cl.upper_limit = cl.limit;
  return cl;
}

std::pair<BoundaryValues, MeasurementSet> em_shifted_inputs(
    const Network& net, const SpanningTree& tree, const LoopSystem& loops,
    const BoundaryValues& bv, const MeasurementSet& meas,
    const UncertaintySpec& spec, const StateEstimate& base, double s) {
  check_spec(spec);
  BoundaryValues bvs = bv;
  MeasurementSet ms = meas;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    if (net.nodes[i].kind != NodeKind::Demand) continue;
    double d = base.demand_final[i];
    bvs.demand[i] = d + s * spec.demand_variability * std::abs(d);
  }
  for (HeadMeasurement& m : ms.heads) {
    double h = base.head[static_cast<size_t>(net.node_index(m.node))];
    m.value = h + s * spec.head_meas_accuracy;
  }
  for (FlowMeasurement& m : ms.flows) {
    double q = base.flow[static_cast<size_t>(net.pipe_index(m.pipe))];
    m.value = q + s * spec.flow_meas_accuracy;
  }
  for (auto& [id, h] : bvs.head) h += s * spec.fixed_head_accuracy;
  for (int id : inflow_known_nodes(net, tree, loops)) {
    double q = base.inflow[static_cast<size_t>(net.node_index(id))];
    bvs.inflow[id] = q + s * spec.inflow_accuracy * std::abs(q);
  }
  return {std::move(bvs), std::move(ms)};
}

ConfidenceLimits em_limits(const Network& net, const SpanningTree& tree,
                           const LoopSystem& loops, const BoundaryValues& bv,
                           const MeasurementSet& meas, const EstimationOptions& eopts,
                           const UncertaintySpec& spec, EmDirection direction) {
  check_spec(spec);
  StateEstimate base = estimate(net, tree, loops, bv, meas, eopts);
  if (!base.converged)
    throw std::runtime_error("error-maximization baseline did not converge: " + base.message);
  Eigen::VectorXd x0 = pack_state(net, base.head, base.inflow);

  // One run with every estimated measurement moved to the same end of its
  // error interval.
  auto bound_run = [&](double s) {
    auto [bvs, ms] = em_shifted_inputs(net, tree, loops, bv, meas, spec, base, s);
    StateEstimate est = estimate(net, tree, loops, bvs, ms, eopts);
    if (!est.converged)
      throw std::runtime_error(std::string("error-maximization bound run (") +
                               (s < 0 ? "lower" : "upper") +
                               ") did not converge: " + est.message);
    return abs_state_gap(pack_state(net, est.head, est.inflow), x0);
  };

  ConfidenceLimits cl;
  cl.method = ClaMethod::Em;
  cl.variable = state_variable_names(net);
  cl.estimate = x0;
  if (direction == EmDirection::Lower) {
    cl.lower_limit = bound_run(-1.0);
    cl.upper_limit = cl.lower_limit;
  } else if (direction == EmDirection::Upper) {
    cl.upper_limit = bound_run(1.0);
    cl.lower_limit = cl.upper_limit;
  } else {
    cl.lower_limit = bound_run(-1.0);
    cl.upper_limit = bound_run(1.0);
  }
  cl.limit = cl.lower_limit.cwiseMax(cl.upper_limit);
  return cl;
}

ConfidenceLimits loop_sensitivity_limits(const Network& net, const SpanningTree& tree,
                                         const LoopSystem& loops, const BoundaryValues& bv,
                                         const UncertaintySpec& spec,
                                         const SimulationOptions& sopts) {
  check_spec(spec);
  SimulationResult sim = solve_cotree(net, tree, loops, bv, sopts);
  if (!sim.converged)
    throw std::runtime_error("loop sensitivity baseline did not converge: " + sim.message);

  ConfidenceLimits cl;
  cl.method = ClaMethod::LoopSens;
  cl.variable = state_variable_names(net);
  cl.estimate = pack_state(net, sim.head, sim.inflow);

  const Eigen::VectorXd d0 = label_demand(net, tree, bv);
  const Eigen::VectorXd qi0 = initial_flows(tree, d0);
  const Eigen::VectorXd dh0 = loop_residual(net, tree, loops, qi0, bv);
  const Eigen::MatrixXd J = loop_jacobian(net, tree, loops, sim.q_label);
  const Eigen::VectorXd dht = -J * sim.loop_flow;

  // Per-loop ratio of the initial residual to the correction the Jacobian
  // predicts; scaling the bound residuals by it makes the scheme exact at
  // the baseline. Near-zero predicted corrections leave the ratio undefined.
  Eigen::VectorXd r = Eigen::VectorXd::Ones(loops.total());
  for (int i = 0; i < loops.total(); ++i) {
    if (std::abs(dht(i)) < 1e-9)
      cl.notes.push_back("loop " + std::to_string(i) +
                         ": predicted correction below 1e-9, ratio unreliable");
    else
      r(i) = dh0(i) / dht(i);
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
  if (!lu.isInvertible())
    throw std::runtime_error("loop sensitivity system is singular at the solved flows");

  auto bound_state = [&](double s) {
    BoundaryValues bvx = bv;
    for (size_t i = 0; i < net.nodes.size(); ++i)
      if (net.nodes[i].kind == NodeKind::Demand)
        bvx.demand[i] *= 1.0 + s * spec.demand_variability;
    const Eigen::VectorXd dx = label_demand(net, tree, bvx);
    const Eigen::VectorXd qix = initial_flows(tree, dx);
    const Eigen::VectorXd dhx = loop_residual(net, tree, loops, qix, bvx);
    Eigen::VectorXd rhs = dhx;
    for (int i = 0; i < loops.total(); ++i) {
      if (std::abs(r(i)) < 1e-12) {
        cl.notes.push_back("loop " + std::to_string(i) + ": ratio below 1e-12, left unscaled");
        continue;
      }
      rhs(i) /= r(i);
    }
    const Eigen::VectorXd dq = -lu.solve(rhs);
    const Eigen::VectorXd qx = qix + loops.M_pl() * dq;

    const Eigen::VectorXd h_label =
        recover_heads(net, tree, qx, bv.head.at(tree.root_id));
    std::vector<double> head(net.nodes.size(), 0.0);
    for (int lab = 0; lab <= tree.n; ++lab)
      head[static_cast<size_t>(tree.node_of_label[static_cast<size_t>(lab)])] = h_label(lab);

    // External inflow at each fixed-head node balances the pipe flows there.
    std::vector<double> inflow(net.nodes.size(), 0.0);
    for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
      const Pipe& pp = net.pipes[pi];
      double q = pp.fixed_flow ? pp.fixed_flow_value : 0.0;
      if (!pp.fixed_flow) {
        int lab = tree.label_of_pipe[pi];
        q = tree.sign[static_cast<size_t>(lab)] * qx(lab - 1);
      }
      int fi = net.node_index(pp.from);
      int ti = net.node_index(pp.to);
      inflow[static_cast<size_t>(fi)] += q;
      inflow[static_cast<size_t>(ti)] -= q;
    }
    for (size_t i = 0; i < net.nodes.size(); ++i)
      if (net.nodes[i].kind != NodeKind::FixedHead) inflow[i] = 0.0;

    return abs_state_gap(pack_state(net, head, inflow), cl.estimate);
  };

  cl.lower_limit = bound_state(-1.0);
  cl.upper_limit = bound_state(1.0);
  cl.limit = cl.lower_limit.cwiseMax(cl.upper_limit);
  return cl;
}

}  // namespace cotree
