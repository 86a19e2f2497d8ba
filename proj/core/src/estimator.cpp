#include "cotree/estimator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <stdexcept>

namespace cotree {

namespace {

std::atomic<int> g_run_count{0};

// Pipe flows implied by the packed state: tree flows carry the corrected
// demands, loop flows circulate on top. Corrections act only through the
// active mask; inactive entries are inert in the flow model.
Eigen::VectorXd state_flows(const SpanningTree& tree, const LoopSystem& loops,
                            const Eigen::VectorXd& d_label,
                            const std::vector<char>& active_mask,
                            const Eigen::VectorXd& x) {
  Eigen::VectorXd dl = d_label;
  for (int i = 0; i < tree.n; ++i)
    if (active_mask[i]) dl(i) -= x(i);
  Eigen::VectorXd q(tree.p);
  q.head(tree.n) = tree.T.triangularView<Eigen::Upper>().solve(dl);
  q.tail(tree.p - tree.n).setZero();
  q.noalias() += loops.M_pl() * x.tail(loops.total());
  return q;
}

}  // namespace

EstimatorModel assemble_model(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const BoundaryValues& bv,
                              const MeasurementSet& meas, const EstimationOptions& opts,
                              const Eigen::VectorXd& warm_loop_flow) {
  const int n = tree.n;
  const int l = loops.total();

  // Active demand corrections, default all demand nodes.
  std::set<int> active_ids;
  if (opts.active_nodes) {
    for (int id : *opts.active_nodes) {
      const Node& nd = net.node(id);
      if (nd.kind != NodeKind::Demand)
        throw std::runtime_error("active node " + std::to_string(id) +
                                 " is not a demand node");
      active_ids.insert(id);
    }
  } else {
    for (const Node& nd : net.nodes)
      if (nd.kind == NodeKind::Demand) active_ids.insert(nd.id);
  }
  std::vector<char> mask(static_cast<size_t>(n), 0);
  std::vector<int> active_labels;
  for (int id : active_ids) {
    int lab = tree.label_of_node[net.node_index(id)];
    mask[lab - 1] = 1;
    active_labels.push_back(lab);
  }
  std::sort(active_labels.begin(), active_labels.end());

  // Head measurements resolve to node labels. Heads enforced as boundary
  // data cannot be measured targets.
  std::set<int> enforced(loops.pseudo_node_id.begin(), loops.pseudo_node_id.end());
  std::vector<int> head_labels;
  std::vector<double> head_values, head_acc;
  for (const HeadMeasurement& m : meas.heads) {
    const Node& nd = net.node(m.node);
    if (nd.id == tree.root_id || enforced.count(nd.id))
      throw std::runtime_error("head at node " + std::to_string(m.node) +
                               " is boundary data, not a measurement target");
    head_labels.push_back(tree.label_of_node[net.node_index(m.node)]);
    head_values.push_back(m.value);
    head_acc.push_back(m.accuracy);
  }

  // Flow measurements resolve to pipe labels and label orientation.
  std::vector<int> flow_labels;
  std::vector<double> flow_values, flow_acc;
  for (const FlowMeasurement& m : meas.flows) {
    const Pipe& p = net.pipe(m.pipe);
    if (p.fixed_flow)
      throw std::runtime_error("pipe " + std::to_string(m.pipe) +
                               " carries a fixed flow, not a measurement target");
    int lab = tree.label_of_pipe[net.pipe_index(m.pipe)];
    flow_labels.push_back(lab);
    flow_values.push_back(tree.sign[lab] * m.value);
    flow_acc.push_back(m.accuracy);
  }

  const int nh = static_cast<int>(head_labels.size());
  const int nf = static_cast<int>(flow_labels.size());
  const int rows = l + n + nh + nf;

  const Eigen::VectorXd d_label = label_demand(net, tree, bv);

  Eigen::VectorXd w = Eigen::VectorXd::Ones(rows);
  if (opts.weighted) {
    double min_acc = 1e-3;
    for (double a : head_acc) min_acc = std::min(min_acc, a);
    const double physics = opts.physics_weight > 0 ? opts.physics_weight : 1.0 / min_acc;
    w.head(l).setConstant(physics);
    for (int i = 0; i < n; ++i)
      w(l + i) = 1.0 / std::max(opts.demand_variability * std::abs(d_label(i)),
                                opts.demand_weight_floor);
    for (int i = 0; i < nh; ++i) w(l + n + i) = 1.0 / head_acc[i];
    for (int i = 0; i < nf; ++i) w(l + n + nh + i) = 1.0 / flow_acc[i];
  }

  EstimatorModel model;
  model.n = n;
  model.l = l;
  model.rows = rows;
  model.active_labels = active_labels;
  model.head_meas_labels = head_labels;
  model.flow_meas_labels = flow_labels;
  model.x0 = Eigen::VectorXd::Zero(n + l);
  model.x0.tail(l) = warm_loop_flow;
  model.weights = w;

  const double root_head = bv.head.at(tree.root_id);
  const bool enhance = opts.enhancement;

  model.residual = [=](const Eigen::VectorXd& x) {
    Eigen::VectorXd q = state_flows(tree, loops, d_label, mask, x);
    Eigen::VectorXd r(rows);
    r.head(l) = loop_residual(net, tree, loops, q, bv);
    r.segment(l, n) = -x.head(n);
    Eigen::VectorXd H = recover_heads(net, tree, q, root_head);
    for (int i = 0; i < nh; ++i) r(l + n + i) = head_values[i] - H(head_labels[i]);
    for (int i = 0; i < nf; ++i)
      r(l + n + nh + i) = flow_values[i] - q(flow_labels[i] - 1);
    return Eigen::VectorXd(r.cwiseProduct(w));
  };

  auto make_jacobian = [=](bool enh) {
    return [=](const Eigen::VectorXd& x) {
      Eigen::VectorXd q = state_flows(tree, loops, d_label, mask, x);
      Eigen::VectorXd H = recover_heads(net, tree, q, root_head);
      Eigen::VectorXd adiag =
          head_loss_derivative_diagonal(net, tree, loops, q, enh, &H);

      // Masked demand-to-tree-flow sensitivity, columns of T^-1.
      Eigen::MatrixXd S = tree.T.triangularView<Eigen::Upper>().solve(
          Eigen::MatrixXd::Identity(n, n));
      for (int i = 0; i < n; ++i)
        if (!mask[i]) S.col(i).setZero();

      const Eigen::MatrixXd Mpl = loops.M_pl();
      const Eigen::MatrixXd Mdh = loops.M * adiag.asDiagonal();

      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(rows, n + l);
      J.block(0, 0, l, n) = -Mdh.leftCols(n) * S;
      J.block(0, n, l, l) = Mdh * Mpl;
      J.block(l, 0, n, n) = -Eigen::MatrixXd::Identity(n, n);
      for (int i = 0; i < nh; ++i) {
        // Row of (T^T)^-1 for the measured node, scaled by the tree-pipe
        // head-loss derivatives.
        Eigen::VectorXd t1 = tree.T.triangularView<Eigen::Upper>().solve(
            Eigen::VectorXd::Unit(n, head_labels[i] - 1));
        Eigen::RowVectorXd row =
            (t1.array() * adiag.head(n).array()).matrix().transpose();
        J.block(l + n + i, 0, 1, n) = -row * S;
        J.block(l + n + i, n, 1, l) = row * Mpl.topRows(n);
      }
      for (int i = 0; i < nf; ++i) {
        const int m = flow_labels[i];
        if (m <= n) J.block(l + n + nh + i, 0, 1, n) = S.row(m - 1);
        J.block(l + n + nh + i, n, 1, l) = -Mpl.row(m - 1);
      }
      J.array().colwise() *= w.array();
      return J;
    };
  };
  model.jacobian = make_jacobian(enhance);
  model.jacobian_plain = make_jacobian(false);

  return model;
}

StateEstimate estimate(const Network& net, const SpanningTree& tree,
                       const LoopSystem& loops, const BoundaryValues& bv,
                       const MeasurementSet& meas, const EstimationOptions& opts) {
  ++g_run_count;
  StateEstimate est;

  SimulationResult warm = solve_cotree(net, tree, loops, bv, opts.sim);
  if (!warm.converged) {
    est.message = "warm-start simulation failed: " + warm.message;
    return est;
  }

  EstimatorModel model =
      assemble_model(net, tree, loops, bv, meas, opts, warm.loop_flow);
  const int n = model.n;
  const int l = model.l;

  Eigen::VectorXd x = model.x0;
  Eigen::VectorXd r = model.residual(x);
  double f = r.squaredNorm();

  bool converged = false;
  bool enhanced_mode = true;
  for (int it = 0; it < opts.max_iter && !converged; ++it) {
    if (f <= 1e-28) {  // residuals already at the numerical floor
      converged = true;
      break;
    }
    Eigen::MatrixXd J =
        enhanced_mode ? model.jacobian(x) : model.jacobian_plain(x);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(J);
    if (qr.rank() < J.cols()) {
      std::string dirs;
      const auto& perm = qr.colsPermutation().indices();
      for (int c = qr.rank(); c < J.cols(); ++c) {
        if (!dirs.empty()) dirs += ", ";
        const int col = perm(c);
        if (col < n)
          dirs += "demand correction at node " +
                  std::to_string(tree.node_of_label[col + 1]);
        else
          dirs += "loop flow " + std::to_string(col - n + 1);
      }
      throw std::runtime_error("estimation system is rank-deficient; "
                               "unobservable directions: " + dirs);
    }
    Eigen::VectorXd delta = qr.solve(-r);
    // A proposed step below the tolerance means the iterate already sits at
    // the solver's resolution; a descent check there would only measure
    // roundoff in the objective.
    if (delta.lpNorm<Eigen::Infinity>() < opts.tol) {
      converged = true;
      break;
    }

    double alpha = 1.0;
    bool accepted = false;
    auto try_step = [&](const Eigen::VectorXd& dir, double a, bool damped) {
      Eigen::VectorXd xt = x + a * dir;
      Eigen::VectorXd rt = model.residual(xt);
      double ft = rt.squaredNorm();
      if (ft > f) return false;
      if (a < 1.0 || damped) est.pure_gauss_newton = false;
      const double step = a * dir.lpNorm<Eigen::Infinity>();
      const double drop = f - ft;
      x = xt;
      r = rt;
      f = ft;
      accepted = true;
      ++est.iterations;
      // The enhanced diagonal is only a quasi-Newton derivative, so the
      // step may hover above tol at the optimum; a stagnant objective is
      // the complementary stopping signal.
      if (step < opts.tol || drop <= 1e-14 * (f + 1e-30)) converged = true;
      return true;
    };
    for (int t = 0; t <= opts.max_halvings && !accepted; ++t) {
      if (try_step(delta, alpha, false)) break;
      alpha *= 0.5;
    }
    if (!accepted) {
      // The enhanced direction is only a quasi-Newton step; when it cannot
      // descend, retry the iteration with the exact derivative.
      if (enhanced_mode) {
        enhanced_mode = false;
        est.pure_gauss_newton = false;
        continue;
      }
      // Last resort: damp the normal equations, trading the step toward
      // steepest descent until something goes downhill.
      const Eigen::MatrixXd JtJ = J.transpose() * J;
      const Eigen::VectorXd g = J.transpose() * r;
      Eigen::VectorXd dscale = JtJ.diagonal().cwiseMax(1e-30);
      for (double lm = 1e-4; lm <= 1e8 && !accepted; lm *= 100.0) {
        Eigen::MatrixXd A = JtJ;
        A.diagonal() += lm * dscale;
        Eigen::VectorXd dd = A.ldlt().solve(-g);
        try_step(dd, 1.0, true);
      }
      if (!accepted) {
        est.message = "stalled: no descent after " +
                      std::to_string(opts.max_halvings) + " halvings";
        break;
      }
    }
  }
  est.converged = converged;
  if (!converged && est.message.empty())
    est.message = "did not converge after " + std::to_string(est.iterations) +
                  " iterations";
  est.residual_norm = std::sqrt(f);
  est.loop_flow = x.tail(l);

  // Corrections back in network order; fixed-head nodes never move.
  est.delta_demand.assign(net.nodes.size(), 0.0);
  est.demand_final.assign(net.nodes.size(), 0.0);
  for (size_t ni = 0; ni < net.nodes.size(); ++ni) {
    if (net.nodes[ni].kind == NodeKind::Demand) {
      int lab = tree.label_of_node[ni];
      est.delta_demand[ni] = x(lab - 1);
    }
    est.demand_final[ni] = bv.demand[ni] - est.delta_demand[ni];
  }

  bool negative = false;
  for (double d : est.demand_final)
    if (d < -1e-12) negative = true;

  // The final state must also be physically consistent: loop residuals
  // within the same head tolerance the simulator enforces.
  Eigen::VectorXd d_label = label_demand(net, tree, bv);
  std::vector<char> mask(static_cast<size_t>(n), 0);
  for (int lab : model.active_labels) mask[lab - 1] = 1;
  Eigen::VectorXd q = state_flows(tree, loops, d_label, mask, x);
  bool inconsistent = false;
  if (l > 0) {
    Eigen::VectorXd resid = loop_residual(net, tree, loops, q, bv);
    double max_h = 0.0;
    for (int j = 1; j <= tree.p; ++j)
      max_h = std::max(max_h,
                       std::abs(head_loss(tree.k[j], net.exponent, q(j - 1))));
    const double head_tol =
        std::max(opts.sim.head_tol_rel * max_h, opts.sim.head_tol_abs);
    inconsistent = resid.cwiseAbs().maxCoeff() > head_tol;
  }

  if (negative || inconsistent) {
    // Clamp any correction that overshot past zero consumption and fall
    // back to a plain simulation for a consistent state.
    est.fallback_applied = true;
    BoundaryValues clamped = bv;
    for (size_t ni = 0; ni < net.nodes.size(); ++ni)
      clamped.demand[ni] = std::max(est.demand_final[ni], 0.0);
    SimulationResult res = solve_cotree(net, tree, loops, clamped, opts.sim);
    est.converged = est.converged && res.converged;
    if (!res.converged) est.message = "fallback simulation failed: " + res.message;
    est.flow = res.flow;
    est.head = res.head;
    est.inflow = res.inflow;
    est.loop_flow = res.loop_flow;
    for (size_t ni = 0; ni < net.nodes.size(); ++ni) {
      est.demand_final[ni] = clamped.demand[ni];
      est.delta_demand[ni] = bv.demand[ni] - clamped.demand[ni];
    }
  } else {
    // Map the estimated state to network-ordered flows, heads and inflows.
    Eigen::VectorXd H = recover_heads(net, tree, q, bv.head.at(tree.root_id));

    est.flow.assign(net.pipes.size(), 0.0);
    for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
      const Pipe& p = net.pipes[pi];
      if (p.fixed_flow) {
        est.flow[pi] = p.fixed_flow_value;
      } else {
        int j = tree.label_of_pipe[pi];
        est.flow[pi] = tree.sign[j] * q(j - 1);
      }
    }
    est.head.assign(net.nodes.size(), 0.0);
    for (size_t ni = 0; ni < net.nodes.size(); ++ni)
      est.head[ni] = H(tree.label_of_node[ni]);

    est.inflow.assign(net.nodes.size(), 0.0);
    for (size_t ni = 0; ni < net.nodes.size(); ++ni) {
      if (net.nodes[ni].kind != NodeKind::FixedHead) continue;
      double into = 0.0;
      for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
        if (net.pipes[pi].to == net.nodes[ni].id) into += est.flow[pi];
        if (net.pipes[pi].from == net.nodes[ni].id) into -= est.flow[pi];
      }
      est.inflow[ni] = est.demand_final[ni] - into;
    }
  }

  // Misfits at the reported state, in measurement orientation.
  for (const HeadMeasurement& m : meas.heads)
    est.head_misfit.push_back(m.value - est.head[net.node_index(m.node)]);
  for (const FlowMeasurement& m : meas.flows)
    est.flow_misfit.push_back(m.value - est.flow[net.pipe_index(m.pipe)]);
  return est;
}

std::vector<int> constrain_region(const Network& net, const SpanningTree& tree,
                                  const MeasurementSet& meas, int radius) {
  std::vector<int> seeds;
  for (const HeadMeasurement& m : meas.heads) {
    net.node(m.node);  // validate the id
    seeds.push_back(tree.label_of_node[net.node_index(m.node)]);
  }
  for (const FlowMeasurement& m : meas.flows) {
    const Pipe& p = net.pipe(m.pipe);
    if (p.fixed_flow) {
      seeds.push_back(tree.label_of_node[net.node_index(p.from)]);
      seeds.push_back(tree.label_of_node[net.node_index(p.to)]);
    } else {
      int lab = tree.label_of_pipe[net.pipe_index(m.pipe)];
      seeds.push_back(tree.from_label[lab]);
      seeds.push_back(tree.to_label[lab]);
    }
  }

  std::vector<int> out;
  for (size_t ni = 0; ni < net.nodes.size(); ++ni) {
    if (net.nodes[ni].kind != NodeKind::Demand) continue;
    int lab = tree.label_of_node[ni];
    for (int s : seeds) {
      if (tree.tree_distance(lab, s) <= radius) {
        out.push_back(net.nodes[ni].id);
        break;
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

int estimator_run_count() { return g_run_count.load(); }

void reset_estimator_run_count() { g_run_count.store(0); }

}  // namespace cotree
