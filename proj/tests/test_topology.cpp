#include <doctest.h>

#include <Eigen/Dense>
#include <set>

#include "cotree/topology.hpp"
#include "support.hpp"

using namespace cotree;
using namespace testsupport;

namespace {

// Structural oracle applied to any traced loop system: T strictly upper
// triangular with unit diagonal, fundamental cycles annihilated by the
// incidence matrix, chord rows independent, pseudo columns matching B.
void check_loop_invariants(const Network& net, const SpanningTree& tr, const LoopSystem& ls) {
  REQUIRE(tr.T.rows() == tr.n);
  for (int r = 0; r < tr.n; ++r) {
    CHECK(std::abs(tr.T(r, r)) == 1.0);
    for (int c = 0; c < r; ++c) CHECK(tr.T(r, c) == 0.0);
  }

  // Exactly one loop per chord, chord appearing once with coefficient +-1.
  CHECK(ls.chord_loops == tr.chords());
  std::set<int> chord_seen;
  for (int r = 0; r < ls.chord_loops; ++r) {
    const Loop& lp = ls.loops[r];
    CHECK(lp.chord > tr.n);
    CHECK(chord_seen.insert(lp.chord).second);
    int chord_count = 0;
    for (auto& [pipe, coeff] : lp.pipes) {
      CHECK(std::abs(coeff) == 1);
      if (pipe == lp.chord)
        ++chord_count;
      else
        CHECK(pipe <= tr.n);  // every other member is a tree pipe
    }
    CHECK(chord_count == 1);
    CHECK(ls.M(r, lp.chord - 1) == 1.0);
    // No other chord participates: the co-tree block of M_pl is diagonal.
    for (int other = tr.n + 1; other <= tr.p; ++other)
      if (other != lp.chord) CHECK(ls.M(r, other - 1) == 0.0);
  }

  const Eigen::MatrixXd A = tr.A_np();
  const Eigen::MatrixXd prod = A * ls.M.transpose();
  for (int r = 0; r < ls.chord_loops; ++r)
    CHECK(prod.col(r).cwiseAbs().maxCoeff() == 0.0);  // cycles exactly, no tolerance
  for (int q = 0; q < ls.pseudo_loops; ++q) {
    int col = ls.chord_loops + q;
    // A pseudo-loop pushes one unit of flow from the root to its node, so
    // the product equals minus the non-root rows of its B column.
    Eigen::VectorXd expect = -ls.B.col(col).tail(tr.n);
    CHECK((prod.col(col) - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  if (ls.chord_loops > 0) {
    Eigen::MatrixXd chordM = ls.M.topRows(ls.chord_loops);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(chordM);
    CHECK(lu.rank() == ls.chord_loops);  // independent cycle set
  }
}

}  // namespace

TEST_CASE("documented seven-node fixture: labels, predecessors and loops") {
  auto net = gofman_network();
  auto tr = build_spanning_tree(net);
  CHECK(tr.root_id == 1);
  CHECK(tr.n == 6);
  CHECK(tr.p == 9);

  CHECK(tr.predecessor_display() == std::vector<int>{7, 1, 2, 2, 4, 5});

  auto ls = trace_loops(net, tr);
  CHECK(ls.chord_loops == 3);
  CHECK(ls.pseudo_loops == 0);

  // The last chord closes through tree pipes 3, 2, 1 back to the root.
  const Loop& last = ls.loops[2];
  CHECK(last.chord == 9);
  std::set<int> members;
  for (auto& [pipe, coeff] : last.pipes) members.insert(pipe);
  CHECK(members == std::set<int>{1, 2, 3, 9});

  check_loop_invariants(net, tr, ls);
}

TEST_CASE("triangle and parallel fixtures trace one loop each") {
  for (auto net : {triangle_network(), parallel_network()}) {
    auto tr = build_spanning_tree(net);
    auto ls = trace_loops(net, tr);
    CHECK(ls.total() == 1);
    check_loop_invariants(net, tr, ls);
  }
}

TEST_CASE("random networks satisfy all loop-system invariants") {
  for (unsigned seed = 1; seed <= 25; ++seed) {
    CAPTURE(seed);
    auto net = random_network(seed, seed % 2 == 0);
    REQUIRE(validate_network(net).ok());
    auto tr = build_spanning_tree(net);
    auto ls = trace_loops(net, tr);

    auto rep = validate_network(net);
    CHECK(ls.chord_loops == rep.expected_loops);
    CHECK(ls.pseudo_loops == rep.expected_pseudo_loops);
    check_loop_invariants(net, tr, ls);

    // Parent labels precede child labels: preorder labeling.
    for (int i = 1; i <= tr.n; ++i) CHECK(tr.pred[i] < i);
  }
}

TEST_CASE("head-known selection controls pseudo-loop count") {
  auto net = random_network(7, true);  // fixed-head nodes 1 and 2
  auto tr = build_spanning_tree(net);
  const int other = tr.root_id == 1 ? 2 : 1;  // the non-root fixed head

  auto all = trace_loops(net, tr);
  CHECK(all.pseudo_loops == 1);
  CHECK(all.pseudo_node_id == std::vector<int>{other});

  auto none = trace_loops(net, tr, std::vector<int>{});
  CHECK(none.pseudo_loops == 0);

  CHECK_THROWS_AS(trace_loops(net, tr, std::vector<int>{tr.root_id}),
                  std::runtime_error);
  CHECK_THROWS_AS(trace_loops(net, tr, std::vector<int>{99}), std::runtime_error);
}

TEST_CASE("reversal flips columns consistently") {
  auto net = gofman_network();
  auto tr = build_spanning_tree(net);
  auto ls = trace_loops(net, tr);
  auto tr0 = tr;
  auto ls0 = ls;

  update_for_reversed_flows(tr, ls, {2, 9, 5});
  CHECK(tr.sign[2] == -1);
  CHECK(tr.from_label[9] == tr0.to_label[9]);
  CHECK(tr.T.col(1) == -tr0.T.col(1));
  check_loop_invariants(net, tr, ls);

  // Chord 9 was reversed, so its loop flipped direction as a whole: the
  // chord column is restored to +1 while the loop's tree members negate
  // (except pipe 2, whose own column flip cancels the loop flip).
  int r9 = -1;
  for (size_t r = 0; r < ls.loops.size(); ++r)
    if (ls.loops[r].chord == 9) r9 = static_cast<int>(r);
  REQUIRE(r9 >= 0);
  CHECK(ls.M.col(8) == ls0.M.col(8));
  CHECK(ls.M(r9, 0) == -ls0.M(r9, 0));
  CHECK(ls.M(r9, 1) == ls0.M(r9, 1));
  CHECK(ls.M(r9, 2) == -ls0.M(r9, 2));

  // Reversing twice restores the original system.
  update_for_reversed_flows(tr, ls, {2, 9, 5});
  CHECK(tr.sign == tr0.sign);
  CHECK(tr.T == tr0.T);
  CHECK(ls.M == ls0.M);
}

TEST_CASE("root defaults to the fixed-head node with the largest head") {
  auto net = random_network(3, true);
  net.nodes[1].head = 60.0;  // node id 2 outranks the 50 m root
  auto tr = build_spanning_tree(net);
  CHECK(tr.root_id == 2);
  auto tr1 = build_spanning_tree(net, 1);
  CHECK(tr1.root_id == 1);
}
