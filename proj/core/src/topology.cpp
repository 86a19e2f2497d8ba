#include "cotree/topology.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cotree {

Eigen::MatrixXd SpanningTree::A_np() const {
  Eigen::MatrixXd A(n, p);
  A.leftCols(n) = T;
  A.rightCols(p - n) = C;
  return A;
}

std::vector<int> SpanningTree::predecessor_display() const {
  std::vector<int> out(n);
  for (int i = 1; i <= n; ++i) out[i - 1] = pred[i] == 0 ? n + 1 : pred[i];
  return out;
}

int SpanningTree::tree_distance(int a, int b) const {
  int d = 0;
  while (a != b) {
    // Parent labels are always smaller, so the larger label moves up.
    if (a > b)
      a = pred[a];
    else
      b = pred[b];
    ++d;
  }
  return d;
}

SpanningTree build_spanning_tree(const Network& net, int root_id) {
  const int nn = static_cast<int>(net.nodes.size());

  if (root_id < 0) {
    double best = 0.0;
    for (const auto& nd : net.nodes) {
      if (nd.kind != NodeKind::FixedHead) continue;
      if (root_id < 0 || nd.head > best || (nd.head == best && nd.id < root_id)) {
        root_id = nd.id;
        best = nd.head;
      }
    }
    if (root_id < 0) throw std::runtime_error("no fixed-head node to root the tree at");
  }
  const int root_idx = net.node_index(root_id);
  if (root_idx < 0) throw std::runtime_error("root node id not found: " + std::to_string(root_id));
  if (net.nodes[root_idx].kind != NodeKind::FixedHead)
    throw std::runtime_error("root must be a fixed-head node");

  // Adjacency over regular pipes, sorted by ascending resistance then pipe id.
  struct Edge {
    int pipe;   // index into Network::pipes
    int other;  // neighbor node index
  };
  std::vector<std::vector<Edge>> adj(nn);
  for (size_t pi = 0; pi < net.pipes.size(); ++pi) {
    const Pipe& p = net.pipes[pi];
    if (p.fixed_flow) continue;
    int a = net.node_index(p.from), b = net.node_index(p.to);
    adj[a].push_back({static_cast<int>(pi), b});
    adj[b].push_back({static_cast<int>(pi), a});
  }
  for (auto& lst : adj)
    std::sort(lst.begin(), lst.end(), [&](const Edge& x, const Edge& y) {
      const Pipe& px = net.pipes[x.pipe];
      const Pipe& py = net.pipes[y.pipe];
      if (px.k != py.k) return px.k < py.k;
      return px.id < py.id;
    });

  SpanningTree tr;
  tr.root_id = root_id;
  tr.n = nn - 1;
  tr.p = net.loop_eligible_pipe_count();

  tr.node_of_label.assign(nn, -1);
  tr.label_of_node.assign(nn, -1);
  tr.pipe_of_label.assign(tr.p + 1, -1);
  tr.label_of_pipe.assign(net.pipes.size(), -1);
  tr.pred.assign(nn, -1);

  std::vector<int> parent_pipe(nn, -1);  // by node label, pipe index of tree pipe
  std::vector<char> visited(nn, 0);
  std::vector<char> edge_done(net.pipes.size(), 0);

  // Iterative DFS mirroring the recursive formulation: each frame scans its
  // sorted adjacency, classifying edges as tree (recurse) or chord.
  std::vector<int> tree_order;   // node indices in visit order
  std::vector<int> chord_order;  // pipe indices in detection order
  struct Frame {
    int node;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  visited[root_idx] = 1;
  tr.label_of_node[root_idx] = 0;
  tr.node_of_label[0] = root_idx;
  stack.push_back({root_idx});
  std::vector<int> tree_pipe_of_node_label;  // parallel to tree_order

  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next >= adj[f.node].size()) {
      stack.pop_back();
      continue;
    }
    const Edge e = adj[f.node][f.next++];
    if (edge_done[e.pipe]) continue;
    if (!visited[e.other]) {
      edge_done[e.pipe] = 1;
      visited[e.other] = 1;
      tree_order.push_back(e.other);
      tree_pipe_of_node_label.push_back(e.pipe);
      int label = static_cast<int>(tree_order.size());
      tr.label_of_node[e.other] = label;
      tr.node_of_label[label] = e.other;
      stack.push_back({e.other});
    } else {
      edge_done[e.pipe] = 1;
      chord_order.push_back(e.pipe);
    }
  }

  if (static_cast<int>(tree_order.size()) != tr.n) {
    std::ostringstream os;
    os << "network is disconnected once fixed-flow pipes are removed; unreachable nodes:";
    for (int i = 0; i < nn; ++i)
      if (!visited[i]) os << ' ' << net.nodes[i].id;
    throw std::runtime_error(os.str());
  }

  tr.k.assign(tr.p + 1, 0.0);
  tr.sign.assign(tr.p + 1, 1);
  tr.from_label.assign(tr.p + 1, -1);
  tr.to_label.assign(tr.p + 1, -1);

  auto install_pipe = [&](int label, int pipe_idx) {
    const Pipe& pp = net.pipes[pipe_idx];
    tr.pipe_of_label[label] = pipe_idx;
    tr.label_of_pipe[pipe_idx] = label;
    tr.k[label] = pp.k;
    tr.from_label[label] = tr.label_of_node[net.node_index(pp.from)];
    tr.to_label[label] = tr.label_of_node[net.node_index(pp.to)];
  };

  for (int i = 1; i <= tr.n; ++i) {
    install_pipe(i, tree_pipe_of_node_label[i - 1]);
    int child = i;
    int parent = tr.from_label[i] == child ? tr.to_label[i] : tr.from_label[i];
    tr.pred[child] = parent;
  }
  for (size_t c = 0; c < chord_order.size(); ++c)
    install_pipe(tr.n + 1 + static_cast<int>(c), chord_order[c]);

  tr.T = Eigen::MatrixXd::Zero(tr.n, tr.n);
  tr.C = Eigen::MatrixXd::Zero(tr.n, tr.chords());
  for (int j = 1; j <= tr.p; ++j) {
    auto put = [&](int node_label, double v) {
      if (node_label == 0) return;  // root row is dropped
      if (j <= tr.n)
        tr.T(node_label - 1, j - 1) = v;
      else
        tr.C(node_label - 1, j - tr.n - 1) = v;
    };
    put(tr.to_label[j], 1.0);    // pipe enters its "to" node
    put(tr.from_label[j], -1.0);
  }
  return tr;
}

namespace {

// Walks chord endpoints up to their lowest common ancestor, emitting tree
// pipe coefficients oriented along the cycle: chord from -> to, then back
// from "to" up and over to "from".
void append_tree_path(const SpanningTree& tr, int to_node, int from_node,
                      std::vector<std::pair<int, int>>& out) {
  std::vector<std::pair<int, int>> down_side;
  int a = to_node, b = from_node;
  while (a != b) {
    if (a > b) {
      // ascend from the chord's "to" endpoint: traversal runs child -> parent
      out.emplace_back(a, -tr.toward_child(a));
      a = tr.pred[a];
    } else {
      // this part is traversed parent -> child on the way back to "from"
      down_side.emplace_back(b, tr.toward_child(b));
      b = tr.pred[b];
    }
  }
  out.insert(out.end(), down_side.rbegin(), down_side.rend());
}

}  // namespace

LoopSystem trace_loops(const Network& net, const SpanningTree& tree,
                       const std::optional<std::vector<int>>& head_known) {
  LoopSystem ls;

  for (int c = tree.n + 1; c <= tree.p; ++c) {
    Loop lp;
    lp.chord = c;
    lp.pipes.emplace_back(c, 1);
    append_tree_path(tree, tree.to_label[c], tree.from_label[c], lp.pipes);
    ls.loops.push_back(std::move(lp));
  }
  ls.chord_loops = static_cast<int>(ls.loops.size());

  std::vector<int> hk;
  if (head_known.has_value()) {
    hk = *head_known;
    std::sort(hk.begin(), hk.end());
    for (int id : hk) {
      int idx = net.node_index(id);
      if (idx < 0) throw std::runtime_error("head-known node id not found: " + std::to_string(id));
      if (net.nodes[idx].kind != NodeKind::FixedHead)
        throw std::runtime_error("head-known node " + std::to_string(id) + " is not fixed-head");
      if (id == tree.root_id)
        throw std::runtime_error("root node cannot appear in the head-known list");
    }
  } else {
    for (const auto& nd : net.nodes)
      if (nd.kind == NodeKind::FixedHead && nd.id != tree.root_id) hk.push_back(nd.id);
    std::sort(hk.begin(), hk.end());
  }

  for (int id : hk) {
    int label = tree.label_of_node[net.node_index(id)];
    Loop lp;
    lp.node = label;
    // Path from the root down to the node: reversed predecessor chain.
    std::vector<int> chain;
    for (int x = label; x != 0; x = tree.pred[x]) chain.push_back(x);
    for (auto it = chain.rbegin(); it != chain.rend(); ++it)
      lp.pipes.emplace_back(*it, tree.toward_child(*it));
    ls.pseudo_node_label.push_back(label);
    ls.pseudo_node_id.push_back(id);
    ls.loops.push_back(std::move(lp));
  }
  ls.pseudo_loops = static_cast<int>(hk.size());

  const int l = ls.total();
  ls.M = Eigen::MatrixXd::Zero(l, tree.p);
  for (int r = 0; r < l; ++r)
    for (const auto& [pipe, coeff] : ls.loops[r].pipes) ls.M(r, pipe - 1) = coeff;

  ls.B = Eigen::MatrixXd::Zero(tree.n + 1, l);
  for (int q = 0; q < ls.pseudo_loops; ++q) {
    int r = ls.chord_loops + q;
    ls.B(0, r) = 1.0;                          // root row
    ls.B(ls.pseudo_node_label[q], r) = -1.0;   // head-known node row
  }
  return ls;
}

void update_for_reversed_flows(SpanningTree& tree, LoopSystem& loops,
                               const std::vector<int>& pipe_labels) {
  for (int j : pipe_labels) {
    if (j < 1 || j > tree.p) throw std::runtime_error("pipe label out of range");
    tree.sign[j] = -tree.sign[j];
    std::swap(tree.from_label[j], tree.to_label[j]);
    if (j <= tree.n)
      tree.T.col(j - 1) = -tree.T.col(j - 1);
    else
      tree.C.col(j - tree.n - 1) = -tree.C.col(j - tree.n - 1);
    loops.M.col(j - 1) = -loops.M.col(j - 1);
    for (auto& lp : loops.loops)
      for (auto& [pipe, coeff] : lp.pipes)
        if (pipe == j) coeff = -coeff;
    // Reversing a chord would leave its own loop traversing it backwards.
    // Renormalize that loop so the chord keeps coefficient +1.
    if (j > tree.n) {
      for (size_t r = 0; r < loops.loops.size(); ++r) {
        Loop& lp = loops.loops[r];
        if (lp.chord != j) continue;
        loops.M.row(static_cast<int>(r)) = -loops.M.row(static_cast<int>(r));
        for (auto& [pipe, coeff] : lp.pipes) coeff = -coeff;
      }
    }
  }
}

}  // namespace cotree
