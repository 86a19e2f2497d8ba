#include "cotree/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <set>
#include <sstream>

namespace cotree {

BoundaryValues BoundaryValues::defaults(const Network& net) {
  BoundaryValues bv;
  bv.demand.resize(net.nodes.size(), 0.0);
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const Node& nd = net.nodes[i];
    if (nd.kind == NodeKind::Demand) {
      bv.demand[i] = nd.demand;
    } else {
      bv.head[nd.id] = nd.head;
      bv.inflow[nd.id] = 0.0;
    }
  }
  return bv;
}

Eigen::VectorXd label_demand(const Network& net, const SpanningTree& tree,
                             const BoundaryValues& bv) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(tree.n);
  for (int i = 1; i <= tree.n; ++i) {
    const int idx = tree.node_of_label[i];
    double v = idx < static_cast<int>(bv.demand.size()) ? bv.demand[idx] : 0.0;
    auto it = bv.inflow.find(net.nodes[idx].id);
    if (it != bv.inflow.end()) v -= it->second;
    d(i - 1) = v;
  }
  for (const auto& p : net.pipes) {
    if (!p.fixed_flow) continue;
    int lf = tree.label_of_node[net.node_index(p.from)];
    int lt = tree.label_of_node[net.node_index(p.to)];
    if (lf > 0) d(lf - 1) += p.fixed_flow_value;
    if (lt > 0) d(lt - 1) -= p.fixed_flow_value;
  }
  return d;
}

Eigen::VectorXd initial_flows(const SpanningTree& tree, const Eigen::VectorXd& d_label) {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(tree.p);
  q.head(tree.n) = tree.T.triangularView<Eigen::Upper>().solve(d_label);
  return q;
}

Eigen::VectorXd recover_heads(const Network& net, const SpanningTree& tree,
                              const Eigen::VectorXd& q_label, double root_head) {
  Eigen::VectorXd H(tree.n + 1);
  H(0) = root_head;
  for (int i = 1; i <= tree.n; ++i) {
    double h = head_loss(tree.k[i], net.exponent, q_label(i - 1));
    H(i) = H(tree.pred[i]) - tree.toward_child(i) * h;
  }
  return H;
}

Eigen::VectorXd head_loss_derivative_diagonal(const Network& net, const SpanningTree& tree,
                                              const LoopSystem& loops,
                                              const Eigen::VectorXd& q_label, bool enhance,
                                              const Eigen::VectorXd* heads_label) {
  const double n = net.exponent;
  Eigen::VectorXd a(tree.p);
  for (int j = 1; j <= tree.p; ++j)
    a(j - 1) = n * tree.k[j] * std::pow(std::abs(q_label(j - 1)), n - 1.0);
  if (enhance && heads_label) {
    for (const auto& lp : loops.loops) {
      if (lp.chord == 0) continue;
      const int c = lp.chord;
      double dh = (*heads_label)(tree.from_label[c]) - (*heads_label)(tree.to_label[c]);
      double q_alt = flow_from_head_loss(tree.k[c], n, dh);
      double q_enh = 0.5 * (q_label(c - 1) + q_alt);
      a(c - 1) = n * tree.k[c] * std::pow(std::abs(q_enh), n - 1.0);
    }
  }
  return a;
}

Eigen::MatrixXd loop_jacobian(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const Eigen::VectorXd& q_label) {
  Eigen::VectorXd a = head_loss_derivative_diagonal(net, tree, loops, q_label);
  return loops.M * a.asDiagonal() * loops.M.transpose();
}

Eigen::VectorXd loop_residual(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const Eigen::VectorXd& q_label,
                              const BoundaryValues& bv) {
  const double n = net.exponent;
  Eigen::VectorXd h(tree.p);
  for (int j = 1; j <= tree.p; ++j)
    h(j - 1) = head_loss(tree.k[j], n, q_label(j - 1));
  Eigen::VectorXd r = loops.M * h;
  const double H0 = bv.head.at(tree.root_id);
  for (int qn = 0; qn < loops.pseudo_loops; ++qn) {
    const int row = loops.chord_loops + qn;
    const double Hx = bv.head.at(loops.pseudo_node_id[qn]);
    r(row) -= H0 - Hx;
  }
  return r;
}

double continuity_error(const Network& net, const SpanningTree& tree,
                        const LoopSystem& loops, const Eigen::VectorXd& q_label,
                        const BoundaryValues& bv) {
  Eigen::VectorXd d = label_demand(net, tree, bv);
  Eigen::VectorXd r = tree.A_np() * q_label - d;
  std::set<int> pseudo(loops.pseudo_node_label.begin(), loops.pseudo_node_label.end());
  double worst = 0.0;
  for (int i = 1; i <= tree.n; ++i)
    if (!pseudo.count(i)) worst = std::max(worst, std::abs(r(i - 1)));
  return worst;
}

namespace {

void fill_result_fields(const Network& net, const SpanningTree& tree,
                        const Eigen::VectorXd& q_label, const Eigen::VectorXd& heads_label,
                        const BoundaryValues& bv, SimulationResult& res) {
  res.q_label = q_label;
  res.flow.assign(net.pipes.size(), 0.0);
  for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
    const Pipe& p = net.pipes[pi];
    if (p.fixed_flow) {
      res.flow[pi] = p.fixed_flow_value;
    } else {
      const int j = tree.label_of_pipe[pi];
      res.flow[pi] = tree.sign[j] * q_label(j - 1);
    }
  }
  res.head.assign(net.nodes.size(), 0.0);
  for (size_t ni = 0; ni < net.nodes.size(); ++ni)
    res.head[ni] = heads_label(tree.label_of_node[ni]);

  res.inflow.assign(net.nodes.size(), 0.0);
  for (size_t ni = 0; ni < net.nodes.size(); ++ni) {
    if (net.nodes[ni].kind != NodeKind::FixedHead) continue;
    double into = 0.0;
    for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
      if (net.pipes[pi].to == net.nodes[ni].id) into += res.flow[pi];
      if (net.pipes[pi].from == net.nodes[ni].id) into -= res.flow[pi];
    }
    double d = ni < bv.demand.size() ? bv.demand[ni] : 0.0;
    res.inflow[ni] = d - into;
  }
}

}  // namespace

SimulationResult solve_cotree(const Network& net, const SpanningTree& tree,
                              const LoopSystem& loops, const BoundaryValues& bv,
                              const SimulationOptions& opts) {
  SimulationResult res;
  const double n = net.exponent;
  const int l = loops.total();
  const double H0 = bv.head.at(tree.root_id);

  const Eigen::VectorXd d = label_demand(net, tree, bv);
  const Eigen::VectorXd qi = initial_flows(tree, d);
  Eigen::VectorXd dq = Eigen::VectorXd::Zero(l);

  // Loops whose pipes all start at (numerically) zero flow have a singular
  // Jacobian row; a small seed flow in the corrective direction avoids it.
  for (int r = 0; r < l; ++r) {
    bool all_zero = true;
    for (const auto& [pipe, coeff] : loops.loops[r].pipes)
      if (std::abs(qi(pipe - 1)) >= opts.seed_flow) all_zero = false;
    if (all_zero) dq(r) = opts.seed_flow;
  }

  Eigen::VectorXd q = qi + loops.M.transpose() * dq;
  // A start that already satisfies the loop equations is a solution; the
  // zero "previous step" lets the entry check accept it.
  double last_step = 0.0;
  int it = 0;
  for (; it <= opts.max_iter; ++it) {
    Eigen::VectorXd heads = recover_heads(net, tree, q, H0);
    Eigen::VectorXd resid = loop_residual(net, tree, loops, q, bv);
    double max_h = 0.0;
    for (int j = 1; j <= tree.p; ++j)
      max_h = std::max(max_h, std::abs(head_loss(tree.k[j], n, q(j - 1))));
    const double head_tol = std::max(opts.head_tol_rel * max_h, opts.head_tol_abs);
    res.residual = l ? resid.cwiseAbs().maxCoeff() : 0.0;
    res.max_step = last_step;
    if ((last_step < opts.tol && res.residual <= head_tol) || l == 0) {
      res.converged = true;
      break;
    }
    if (it == opts.max_iter) break;

    Eigen::VectorXd a = head_loss_derivative_diagonal(net, tree, loops, q,
                                                      opts.enhancement, &heads);
    Eigen::MatrixXd J = loops.M * a.asDiagonal() * loops.M.transpose();
    Eigen::VectorXd delta = J.ldlt().solve(resid);
    if (!delta.allFinite() || (J * delta - resid).norm() > 1e-8 * (resid.norm() + 1.0)) {
      // Degenerate diagonal (all-zero flows in some loop): retry with the
      // seed-flow floor on the derivative before giving up.
      Eigen::VectorXd floor_a = a;
      for (int j = 1; j <= tree.p; ++j)
        floor_a(j - 1) = std::max(a(j - 1),
                                  n * tree.k[j] * std::pow(opts.seed_flow, n - 1.0));
      J = loops.M * floor_a.asDiagonal() * loops.M.transpose();
      delta = J.ldlt().solve(resid);
      if (!delta.allFinite() || (J * delta - resid).norm() > 1e-8 * (resid.norm() + 1.0)) {
        res.message = "singular loop Jacobian";
        break;
      }
    }
    dq -= opts.relaxation * delta;
    q = qi + loops.M.transpose() * dq;
    last_step = opts.relaxation * delta.cwiseAbs().maxCoeff();
  }
  res.iterations = it;
  if (!res.converged && res.message.empty()) {
    std::ostringstream os;
    os << "no convergence in " << opts.max_iter << " iterations (step " << res.max_step
       << " m^3/s, residual " << res.residual << " m)";
    res.message = os.str();
  }

  res.loop_flow = dq;
  Eigen::VectorXd heads = recover_heads(net, tree, q, H0);
  fill_result_fields(net, tree, q, heads, bv, res);
  return res;
}

SimulationResult oracle_nodal_solve(const Network& net, const BoundaryValues& bv, int root_id,
                                    const std::optional<std::vector<int>>& head_known,
                                    double tol, int max_iter) {
  const int nn = static_cast<int>(net.nodes.size());
  const double n = net.exponent;
  SimulationResult res;

  if (root_id < 0) {
    double best = 0.0;
    for (const auto& nd : net.nodes)
      if (nd.kind == NodeKind::FixedHead && (root_id < 0 || nd.head > best)) {
        root_id = nd.id;
        best = nd.head;
      }
    if (root_id < 0) throw std::runtime_error("no fixed-head node available");
  }

  std::set<int> pinned_ids{root_id};
  if (head_known.has_value()) {
    for (int id : *head_known) pinned_ids.insert(id);
  } else {
    for (const auto& nd : net.nodes)
      if (nd.kind == NodeKind::FixedHead) pinned_ids.insert(nd.id);
  }

  std::vector<int> free_of_node(nn, -1), node_of_free;
  Eigen::VectorXd H(nn);
  for (int i = 0; i < nn; ++i) {
    if (pinned_ids.count(net.nodes[i].id)) {
      H(i) = bv.head.count(net.nodes[i].id) ? bv.head.at(net.nodes[i].id) : net.nodes[i].head;
    } else {
      free_of_node[i] = static_cast<int>(node_of_free.size());
      node_of_free.push_back(i);
    }
  }
  const int nf = static_cast<int>(node_of_free.size());

  // Start heads: nearest pinned head minus one millimeter per hop.
  {
    std::vector<int> dist(nn, -1);
    std::queue<int> bfs;
    for (int i = 0; i < nn; ++i)
      if (free_of_node[i] < 0) {
        dist[i] = 0;
        bfs.push(i);
      }
    std::vector<std::vector<int>> adj(nn);
    for (const auto& p : net.pipes) {
      if (p.fixed_flow) continue;
      int a = net.node_index(p.from), b = net.node_index(p.to);
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    while (!bfs.empty()) {
      int u = bfs.front();
      bfs.pop();
      for (int v : adj[u])
        if (dist[v] < 0) {
          dist[v] = dist[u] + 1;
          H(v) = H(u) - 0.001;
          bfs.push(v);
        } else if (dist[v] == dist[u] + 1) {
          H(v) = std::min(H(v), H(u) - 0.001);
        }
    }
  }

  auto residual_at = [&](const Eigen::VectorXd& heads) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(nf);
    auto add = [&](int node_idx, double v) {
      int f = free_of_node[node_idx];
      if (f >= 0) r(f) += v;
    };
    for (const auto& p : net.pipes) {
      int a = net.node_index(p.from), b = net.node_index(p.to);
      double q = p.fixed_flow ? p.fixed_flow_value
                              : flow_from_head_loss(p.k, n, heads(a) - heads(b));
      add(b, q);
      add(a, -q);
    }
    for (int f = 0; f < nf; ++f) {
      int i = node_of_free[f];
      double u = bv.inflow.count(net.nodes[i].id) ? bv.inflow.at(net.nodes[i].id) : 0.0;
      double dem = i < static_cast<int>(bv.demand.size()) ? bv.demand[i] : 0.0;
      r(f) += u - dem;
    }
    return r;
  };

  Eigen::VectorXd r = residual_at(H);
  int it = 0;
  const double dh0 = 1e-9;  // derivative regularization near zero head loss
  for (; it < max_iter && r.cwiseAbs().maxCoeff() > tol; ++it) {
    Eigen::MatrixXd Jac = Eigen::MatrixXd::Zero(nf, nf);
    for (const auto& p : net.pipes) {
      if (p.fixed_flow) continue;
      int a = net.node_index(p.from), b = net.node_index(p.to);
      double adh = std::max(std::abs(H(a) - H(b)), dh0);
      double g = std::pow(adh / p.k, 1.0 / n) / (n * adh);
      int fa = free_of_node[a], fb = free_of_node[b];
      // q = f(H_a - H_b) appears +q in row b and -q in row a
      if (fb >= 0) {
        if (fa >= 0) Jac(fb, fa) += g;
        Jac(fb, fb) -= g;
      }
      if (fa >= 0) {
        if (fb >= 0) Jac(fa, fb) += g;
        Jac(fa, fa) -= g;
      }
    }
    Eigen::VectorXd step = Jac.partialPivLu().solve(-r);
    if (!step.allFinite()) break;
    double base = r.cwiseAbs().maxCoeff();
    double scale = 1.0;
    Eigen::VectorXd Hn = H;
    for (int half = 0; half < 40; ++half) {
      for (int f = 0; f < nf; ++f) Hn(node_of_free[f]) = H(node_of_free[f]) + scale * step(f);
      Eigen::VectorXd rn = residual_at(Hn);
      if (rn.cwiseAbs().maxCoeff() < base || half == 39) {
        H = Hn;
        r = rn;
        break;
      }
      scale *= 0.5;
    }
  }
  res.iterations = it;
  res.converged = r.size() == 0 || r.cwiseAbs().maxCoeff() <= tol;
  res.residual = r.size() ? r.cwiseAbs().maxCoeff() : 0.0;
  if (!res.converged) res.message = "nodal reference did not converge";

  res.flow.assign(net.pipes.size(), 0.0);
  for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
    const Pipe& p = net.pipes[pi];
    res.flow[pi] = p.fixed_flow ? p.fixed_flow_value
                                : flow_from_head_loss(p.k, n, H(net.node_index(p.from)) -
                                                                 H(net.node_index(p.to)));
  }
  res.head.assign(net.nodes.size(), 0.0);
  for (int i = 0; i < nn; ++i) res.head[i] = H(i);
  res.inflow.assign(net.nodes.size(), 0.0);
  for (int i = 0; i < nn; ++i) {
    if (net.nodes[i].kind != NodeKind::FixedHead) continue;
    double into = 0.0;
    for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
      if (net.pipes[pi].to == net.nodes[i].id) into += res.flow[pi];
      if (net.pipes[pi].from == net.nodes[i].id) into -= res.flow[pi];
    }
    double dem = i < static_cast<int>(bv.demand.size()) ? bv.demand[i] : 0.0;
    res.inflow[i] = dem - into;
  }
  return res;
}

}  // namespace cotree
