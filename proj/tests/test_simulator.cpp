#include <doctest.h>

#include <cmath>

#include "cotree/simulator.hpp"
#include "support.hpp"

using namespace cotree;
using namespace testsupport;

namespace {

SimulationOptions tight_options() {
  SimulationOptions o;
  o.tol = 1e-8;
  o.head_tol_abs = 1e-11;
  return o;
}

struct Solved {
  Network net;
  SpanningTree tree;
  LoopSystem loops;
  BoundaryValues bv;
  SimulationResult res;
};

Solved solve_fixture(const Network& net, const SimulationOptions& opts = tight_options(),
                     const std::optional<std::vector<int>>& head_known = std::nullopt) {
  Solved s{net, build_spanning_tree(net), {}, BoundaryValues::defaults(net), {}};
  s.loops = trace_loops(net, s.tree, head_known);
  s.res = solve_cotree(net, s.tree, s.loops, s.bv, opts);
  return s;
}

void compare_with_nodal(const Network& net,
                        const std::optional<std::vector<int>>& head_known = std::nullopt,
                        double head_tol = 1e-6, double flow_tol = 1e-8) {
  auto s = solve_fixture(net, tight_options(), head_known);
  REQUIRE(s.res.converged);
  auto bv = BoundaryValues::defaults(net);
  auto ref = oracle_nodal_solve(net, bv, s.tree.root_id, head_known);
  REQUIRE(ref.converged);
  for (size_t i = 0; i < net.nodes.size(); ++i)
    CHECK_NEAR(s.res.head[i], ref.head[i], head_tol);
  for (size_t i = 0; i < net.pipes.size(); ++i)
    CHECK_NEAR(s.res.flow[i], ref.flow[i], flow_tol);
}

}  // namespace

TEST_CASE("initial flows by back-substitution on a chain") {
  // Chain root -> a -> b with demands 1 and 2 l/s carries 3 then 2 l/s.
  Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.001), demand_node(3, 0.002)};
  net.pipes = {make_pipe(1, 1, 2, 2.0), make_pipe(2, 2, 3, 3.0)};
  auto tr = build_spanning_tree(net);
  auto d = label_demand(net, tr, BoundaryValues::defaults(net));
  auto q = initial_flows(tr, d);
  CHECK_NEAR(q(0), 0.003, 1e-15);
  CHECK_NEAR(q(1), 0.002, 1e-15);
}

TEST_CASE("head recovery walks losses down the tree") {
  // Resistances tuned so the two tree pipes lose exactly 2 m and 3 m.
  Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.001), demand_node(3, 0.002)};
  double n = net.exponent;
  net.pipes = {make_pipe(1, 1, 2, 2.0 / std::pow(0.003, n)),
               make_pipe(2, 2, 3, 3.0 / std::pow(0.002, n))};
  auto tr = build_spanning_tree(net);
  auto d = label_demand(net, tr, BoundaryValues::defaults(net));
  auto q = initial_flows(tr, d);
  auto H = recover_heads(net, tr, q, 50.0);
  CHECK(H(0) == 50.0);
  CHECK_NEAR(H(tr.label_of_node[1]), 48.0, 1e-12);
  CHECK_NEAR(H(tr.label_of_node[2]), 45.0, 1e-12);
}

TEST_CASE("loop jacobian of a single loop sums pipe derivatives") {
  // Quadratic losses, three pipes in one loop: J = sum of 2 k_j |q_j|.
  Network net = triangle_network();
  net.exponent = 2.0;
  auto tr = build_spanning_tree(net);
  auto ls = trace_loops(net, tr);
  Eigen::VectorXd q(3);
  q << 0.01, -0.02, 0.004;
  auto J = loop_jacobian(net, tr, ls, q);
  REQUIRE(J.rows() == 1);
  double expect = 0.0;
  for (int j = 1; j <= 3; ++j) expect += 2.0 * tr.k[j] * std::abs(q(j - 1));
  CHECK_NEAR(J(0, 0), expect, 1e-14);
}

TEST_CASE("triangle network matches the bisection reference") {
  auto s = solve_fixture(triangle_network());
  REQUIRE(s.res.converged);
  // Chord flow solved independently by 200-step bisection on the loop
  // head-loss balance; heads follow from the tree path.
  CHECK_NEAR(s.res.flow[0], 0.027086476092759503, 1e-9);
  CHECK_NEAR(s.res.flow[1], 0.022913523907240496, 1e-9);
  CHECK_NEAR(s.res.flow[2], 0.007086476092759503, 1e-9);
  CHECK_NEAR(s.res.head[0], 39.99624526838924, 1e-9);
  CHECK_NEAR(s.res.head[1], 39.995409498055835, 1e-9);
  CHECK(s.res.head[2] == 40.0);
  CHECK_NEAR(s.res.inflow[2], 0.05, 1e-10);
  CHECK(continuity_error(s.net, s.tree, s.loops, s.res.q_label, s.bv) < 1e-14);
}

TEST_CASE("parallel pipes split flow by the resistance ratio") {
  auto s = solve_fixture(parallel_network());
  REQUIRE(s.res.converged);
  CHECK_NEAR(s.res.flow[0], 0.015193768271335518, 1e-9);
  CHECK_NEAR(s.res.flow[1], 0.009806231728664483, 1e-9);
  // Both branches see the same head loss.
  double h1 = head_loss(4.0, s.net.exponent, s.res.flow[0]);
  double h2 = head_loss(9.0, s.net.exponent, s.res.flow[1]);
  CHECK_NEAR(h1, h2, 1e-10);
}

TEST_CASE("converged runs satisfy the loop energy bound") {
  for (unsigned seed = 1; seed <= 20; ++seed) {
    CAPTURE(seed);
    auto net = random_network(seed, seed % 3 == 0);
    SimulationOptions opts;  // stock tolerances
    auto s = solve_fixture(net, opts);
    REQUIRE(s.res.converged);
    double max_h = 0.0;
    for (int j = 1; j <= s.tree.p; ++j)
      max_h = std::max(max_h,
                       std::abs(head_loss(s.tree.k[j], net.exponent, s.res.q_label(j - 1))));
    CHECK(s.res.residual <= std::max(1e-6 * max_h, 1e-9));
    CHECK(continuity_error(net, s.tree, s.loops, s.res.q_label, s.bv) < 1e-12);
  }
}

TEST_CASE("loop jacobian is positive semidefinite") {
  for (unsigned seed = 1; seed <= 10; ++seed) {
    CAPTURE(seed);
    auto net = random_network(seed, seed % 2 == 0);
    auto s = solve_fixture(net);
    REQUIRE(s.res.converged);
    auto J = loop_jacobian(net, s.tree, s.loops, s.res.q_label);
    if (J.rows() == 0) continue;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (J + J.transpose()));
    CHECK(eig.eigenvalues().minCoeff() >= -1e-9);
  }
}

TEST_CASE("cotree solver agrees with the nodal reference") {
  compare_with_nodal(triangle_network());
  compare_with_nodal(parallel_network());
  compare_with_nodal(gofman_network());
  for (unsigned seed = 1; seed <= 15; ++seed) {
    CAPTURE(seed);
    compare_with_nodal(random_network(seed, seed % 2 == 0));
  }
}

TEST_CASE("pseudo-loop enforces the second fixed head") {
  Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.01), fixed_node(3, 49.0)};
  net.pipes = {make_pipe(1, 1, 2, 5.0), make_pipe(2, 2, 3, 5.0)};
  auto s = solve_fixture(net);
  REQUIRE(s.res.converged);
  CHECK(s.loops.pseudo_loops == 1);
  CHECK_NEAR(s.res.head[2], 49.0, 1e-9);

  // Independent scalar reference: demand splits between the two sources so
  // that the path head losses meet the enforced 1 m difference.
  double n = net.exponent;
  double u = bisect(
      [&](double x) {
        return head_loss(5.0, n, 0.01 - x) - head_loss(5.0, n, x) - 1.0;
      },
      -0.5, 0.5);
  CHECK_NEAR(s.res.flow[0], 0.01 - u, 1e-7);
  CHECK_NEAR(s.res.inflow[2], u, 1e-7);

  // The reported inflow is the initial inflow minus the pseudo-loop flow.
  CHECK_NEAR(s.res.inflow[2], 0.0 - s.res.loop_flow(0), 1e-10);

  compare_with_nodal(net);
}

TEST_CASE("inflow-known fixed head keeps its inflow and frees its head") {
  Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.01), fixed_node(3, 49.0)};
  net.pipes = {make_pipe(1, 1, 2, 5.0), make_pipe(2, 2, 3, 5.0)};
  auto tr = build_spanning_tree(net);
  auto ls = trace_loops(net, tr, std::vector<int>{});
  auto bv = BoundaryValues::defaults(net);
  bv.inflow[3] = 0.004;
  auto res = solve_cotree(net, tr, ls, bv, tight_options());
  REQUIRE(res.converged);
  CHECK_NEAR(res.inflow[2], 0.004, 1e-12);
  double n = net.exponent;
  double H2 = 50.0 - head_loss(5.0, n, 0.006);
  CHECK_NEAR(res.head[1], H2, 1e-10);
  CHECK_NEAR(res.head[2], H2 + head_loss(5.0, n, 0.004), 1e-10);
  // The nominal 49 m plays no role: the computed head differs from it.
  CHECK(std::abs(res.head[2] - 49.0) > 0.1);

  auto ref = oracle_nodal_solve(net, bv, 1, std::vector<int>{});
  REQUIRE(ref.converged);
  CHECK_NEAR(res.head[2], ref.head[2], 1e-6);
}

TEST_CASE("fixed-flow pipe shifts demands at both endpoints") {
  Network net;
  net.nodes = {fixed_node(1, 50.0), demand_node(2, 0.01), demand_node(3, 0.008)};
  net.pipes = {make_pipe(1, 1, 2, 5.0), make_pipe(2, 1, 3, 6.0)};
  Pipe pump;
  pump.id = 3;
  pump.from = 2;
  pump.to = 3;
  pump.fixed_flow = true;
  pump.fixed_flow_value = 0.003;
  net.pipes.push_back(pump);

  auto s = solve_fixture(net);
  REQUIRE(s.res.converged);
  double n = net.exponent;
  CHECK_NEAR(s.res.flow[0], 0.013, 1e-10);
  CHECK_NEAR(s.res.flow[1], 0.005, 1e-10);
  CHECK(s.res.flow[2] == 0.003);
  CHECK_NEAR(s.res.head[1], 50.0 - head_loss(5.0, n, 0.013), 1e-10);
  CHECK_NEAR(s.res.head[2], 50.0 - head_loss(6.0, n, 0.005), 1e-10);
  compare_with_nodal(net);
}

TEST_CASE("zero demands converge through seeding to zero flow") {
  auto net = triangle_network();
  net.nodes[0].demand = 0.0;
  net.nodes[1].demand = 0.0;
  auto s = solve_fixture(net, SimulationOptions{});
  REQUIRE(s.res.converged);
  for (double q : s.res.flow) CHECK(std::abs(q) < 1e-5);
  for (double h : s.res.head) CHECK_NEAR(h, 40.0, 1e-8);
}

TEST_CASE("enhancement changes the path, not the fixed point") {
  for (unsigned seed : {2u, 5u, 9u}) {
    CAPTURE(seed);
    auto net = random_network(seed);
    SimulationOptions off = tight_options();
    off.enhancement = false;
    auto a = solve_fixture(net, tight_options());
    auto b = solve_fixture(net, off);
    REQUIRE(a.res.converged);
    REQUIRE(b.res.converged);
    for (size_t i = 0; i < net.pipes.size(); ++i)
      CHECK_NEAR(a.res.flow[i], b.res.flow[i], 1e-7);
    MESSAGE("seed ", seed, ": iterations with enhancement ", a.res.iterations,
            ", without ", b.res.iterations);
  }
}

TEST_CASE("reversing pipes leaves the physics unchanged") {
  auto net = gofman_network();
  auto tr = build_spanning_tree(net);
  auto ls = trace_loops(net, tr);
  auto bv = BoundaryValues::defaults(net);
  auto base = solve_cotree(net, tr, ls, bv, tight_options());
  REQUIRE(base.converged);

  update_for_reversed_flows(tr, ls, {1, 4, 7, 9});
  auto flipped = solve_cotree(net, tr, ls, bv, tight_options());
  REQUIRE(flipped.converged);
  for (size_t i = 0; i < net.nodes.size(); ++i)
    CHECK_NEAR(flipped.head[i], base.head[i], 1e-9);
  for (size_t i = 0; i < net.pipes.size(); ++i)
    CHECK_NEAR(flipped.flow[i], base.flow[i], 1e-9);
}

TEST_CASE("non-convergence is reported as state, not thrown") {
  auto net = triangle_network();
  SimulationOptions opts;
  opts.max_iter = 0;
  opts.tol = 1e-15;
  auto s = solve_fixture(net, opts);
  CHECK_FALSE(s.res.converged);
  CHECK(s.res.message.find("0 iterations") != std::string::npos);
  CHECK(s.res.flow.size() == s.net.pipes.size());  // partial results still present
}
