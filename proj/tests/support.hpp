#pragma once

// Shared fixtures and reference helpers for the test suite.

#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "cotree/network.hpp"
#include "cotree/simulator.hpp"
#include "cotree/topology.hpp"

// Absolute-tolerance check; doctest's Approx is relative-only in this version.
#define CHECK_NEAR(a, b, tol)                                                  \
  do {                                                                         \
    const double check_near_a = (a);                                           \
    const double check_near_b = (b);                                           \
    INFO(#a " = ", check_near_a, "  " #b " = ", check_near_b, "  |diff| = ",   \
         std::abs(check_near_a - check_near_b), "  tol = ", (tol));            \
    CHECK(std::abs(check_near_a - check_near_b) <= (tol));                     \
  } while (0)

namespace testsupport {

inline cotree::Pipe make_pipe(int id, int from, int to, double k) {
  cotree::Pipe p;
  p.id = id;
  p.from = from;
  p.to = to;
  p.k = k;
  p.k_override = true;
  return p;
}

inline cotree::Node demand_node(int id, double demand) {
  cotree::Node n;
  n.id = id;
  n.kind = cotree::NodeKind::Demand;
  n.demand = demand;
  return n;
}

inline cotree::Node fixed_node(int id, double head) {
  cotree::Node n;
  n.id = id;
  n.kind = cotree::NodeKind::FixedHead;
  n.head = head;
  return n;
}

// Root (id 3, 40 m) feeding nodes 1 and 2; one chord loop.
inline cotree::Network triangle_network() {
  cotree::Network net;
  net.nodes = {demand_node(1, 0.02), demand_node(2, 0.03), fixed_node(3, 40.0)};
  net.pipes = {make_pipe(1, 3, 1, 3.0), make_pipe(2, 3, 2, 5.0), make_pipe(3, 1, 2, 8.0)};
  return net;
}

// Two pipes of different resistance between the root and one demand node.
inline cotree::Network parallel_network() {
  cotree::Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.025)};
  net.pipes = {make_pipe(1, 1, 2, 4.0), make_pipe(2, 1, 2, 9.0)};
  return net;
}

// Seven nodes, nine pipes; resistances arranged so the depth-first search
// produces the documented predecessor array [7 1 2 2 4 5] and the last
// chord (label 9) closes through tree pipes 3, 2, 1.
inline cotree::Network gofman_network() {
  cotree::Network net;
  net.nodes = {fixed_node(1, 50.0)};
  for (int id = 2; id <= 7; ++id) net.nodes.push_back(demand_node(id, 0.01));
  net.pipes = {
      make_pipe(1, 1, 2, 0.3),   // tree: root -> first visited
      make_pipe(2, 2, 3, 0.8),   // tree
      make_pipe(3, 3, 1, 0.5),   // chord, detected first
      make_pipe(4, 3, 4, 1.5),   // tree
      make_pipe(5, 3, 5, 2.5),   // tree
      make_pipe(6, 4, 2, 0.85),  // chord, detected second
      make_pipe(7, 4, 1, 0.9),   // chord, detected third
      make_pipe(8, 5, 6, 1.0),   // tree
      make_pipe(9, 6, 7, 1.0),   // tree
  };
  return net;
}

// Random connected network: a random tree plus a few chords, all-positive
// resistances, modest demands. Node 1 is the fixed-head root; with
// second_fixed an extra fixed-head node (id 2) is added.
inline cotree::Network random_network(unsigned seed, bool second_fixed = false) {
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> size_d(4, 12);
  std::uniform_real_distribution<double> k_d(0.5, 80.0);
  std::uniform_real_distribution<double> dem_d(0.0, 0.01);
  std::uniform_real_distribution<double> head_d(48.0, 52.0);

  const int nn = size_d(rng);
  cotree::Network net;
  net.nodes.push_back(fixed_node(1, 50.0));
  if (second_fixed) net.nodes.push_back(fixed_node(2, head_d(rng)));
  for (int id = second_fixed ? 3 : 2; id <= nn; ++id)
    net.nodes.push_back(demand_node(id, dem_d(rng)));

  int pid = 1;
  for (int id = 2; id <= nn; ++id) {
    std::uniform_int_distribution<int> parent_d(1, id - 1);
    net.pipes.push_back(make_pipe(pid++, parent_d(rng), id, k_d(rng)));
  }
  std::uniform_int_distribution<int> extra_d(1, 4);
  std::uniform_int_distribution<int> node_d(1, nn);
  int extra = extra_d(rng);
  for (int e = 0; e < extra; ++e) {
    int a = node_d(rng), b = node_d(rng);
    if (a == b) continue;
    net.pipes.push_back(make_pipe(pid++, a, b, k_d(rng)));
  }
  return net;
}

// Scalar bisection for one-unknown reference solutions.
inline double bisect(const std::function<double(double)>& f, double lo, double hi,
                     int steps = 200) {
  double flo = f(lo);
  for (int i = 0; i < steps; ++i) {
    double mid = 0.5 * (lo + hi);
    double fm = f(mid);
    if ((flo <= 0.0) == (fm <= 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace testsupport
