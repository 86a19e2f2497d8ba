#pragma once

// Spanning-tree decomposition of a pipe network and the loop system built on
// it. Non-root nodes are relabeled in depth-first visit order so that the
// tree incidence matrix T is upper triangular; tree pipe i connects node i to
// its predecessor, chords carry labels n+1..p. Loops come in two kinds:
// chord loops (one fundamental cycle per co-tree pipe) and pseudo-loops (a
// tree path from the root to a fixed-head node whose head is enforced).

#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cotree/network.hpp"

namespace cotree {

struct SpanningTree {
  int root_id = 0;     // network id of the root (a fixed-head node)
  int n = 0;           // non-root node count
  int p = 0;           // loop-eligible pipe count (fixed-flow pipes excluded)

  // Label maps. Node labels: 0 = root, 1..n in visit order. Pipe labels:
  // 1..n tree pipes (label = child node), n+1..p chords in detection order.
  std::vector<int> node_of_label;   // label -> index into Network::nodes
  std::vector<int> label_of_node;   // index into Network::nodes -> label
  std::vector<int> pipe_of_label;   // label -> index into Network::pipes ([0] unused)
  std::vector<int> label_of_pipe;   // index into Network::pipes -> label, -1 if fixed-flow

  std::vector<int> pred;            // pred[i] = parent label of node i, pred[0] = -1
  std::vector<double> k;            // resistance by pipe label ([0] unused)
  std::vector<int> sign;            // +1 if label orientation equals the pipe's
                                    // from->to direction, -1 if reversed
  std::vector<int> from_label;      // endpoint labels in current orientation
  std::vector<int> to_label;

  Eigen::MatrixXd T;                // n x n upper-triangular tree incidence
  Eigen::MatrixXd C;                // n x (p - n) chord incidence

  int chords() const { return p - n; }
  // [T C], rows = non-root nodes by label, columns = pipes by label.
  Eigen::MatrixXd A_np() const;
  // +1 if tree pipe i points from parent to child, -1 otherwise.
  int toward_child(int i) const { return to_label[i] == i ? 1 : -1; }
  // Predecessor vector with the root displayed as n+1.
  std::vector<int> predecessor_display() const;
  // Tree path length (hops) between two nodes given by label.
  int tree_distance(int label_a, int label_b) const;
};

struct Loop {
  int chord = 0;               // chord pipe label, 0 for pseudo-loops
  int node = 0;                // head-known node label, 0 for chord loops
  // (pipe label, coefficient) pairs; coefficient +1 where the pipe direction
  // agrees with the loop traversal. Chord loops start at the chord, traversed
  // in its positive direction; pseudo-loops run from the root to the node.
  std::vector<std::pair<int, int>> pipes;
};

struct LoopSystem {
  std::vector<Loop> loops;     // chord loops first, then pseudo-loops
  int chord_loops = 0;
  int pseudo_loops = 0;
  Eigen::MatrixXd M;           // (chord_loops + pseudo_loops) x p, loop rows
  Eigen::MatrixXd B;           // (n+1) x loops: net-demand shift per unit
                               // pseudo-loop flow, +1 root row / -1 node row
  std::vector<int> pseudo_node_label;  // per pseudo-loop
  std::vector<int> pseudo_node_id;

  int total() const { return chord_loops + pseudo_loops; }
  Eigen::MatrixXd M_pl() const { return M.transpose(); }
};

// Builds the spanning tree by depth-first search from the root, visiting
// neighbors in ascending resistance order (pipe id breaks ties). root_id -1
// selects the fixed-head node with the largest head. Throws on disconnected
// input or when no fixed-head node exists.
SpanningTree build_spanning_tree(const Network& net, int root_id = -1);

// Traces one loop per chord by walking predecessor chains, plus one
// pseudo-loop per head-known fixed-head node. head_known lists node ids;
// nullopt enforces the head of every non-root fixed-head node.
LoopSystem trace_loops(const Network& net, const SpanningTree& tree,
                       const std::optional<std::vector<int>>& head_known = std::nullopt);

// Flips the orientation of the given pipes (by label) in place: T or C
// column, loop matrix column and loop coefficients, from/to bookkeeping.
// Flow values expressed in the new orientation are the negation of the old.
void update_for_reversed_flows(SpanningTree& tree, LoopSystem& loops,
                               const std::vector<int>& pipe_labels);

}  // namespace cotree
