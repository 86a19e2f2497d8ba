#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "cotree/gfmm.hpp"
#include "support.hpp"

using namespace cotree;
using namespace testsupport;

namespace {

Pattern point(std::initializer_list<double> xs, int label = 0) {
  Pattern p;
  p.lower = Eigen::VectorXd(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) p.lower(i++) = x;
  p.upper = p.lower;
  p.label = label;
  return p;
}

Pattern interval(std::initializer_list<double> lo, std::initializer_list<double> hi,
                 int label = 0) {
  Pattern p = point(lo, label);
  int i = 0;
  for (double x : hi) p.upper(i++) = x;
  return p;
}

Hyperbox box1d(double v, double w, int cls = 1) {
  Hyperbox b = Hyperbox::fresh(1);
  b.V(0) = v;
  b.W(0) = w;
  b.cls = cls;
  return b;
}

Eigen::VectorXd gamma4(int dims) { return Eigen::VectorXd::Constant(dims, 4.0); }

// Two well-separated Gaussian blobs in the unit square.
std::vector<Pattern> two_blobs(int per_class, unsigned seed, double spread = 0.04) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n1(0.0, spread);
  std::vector<Pattern> out;
  auto clamp = [](double x) { return std::min(1.0, std::max(0.0, x)); };
  for (int i = 0; i < per_class; ++i) {
    out.push_back(point({clamp(0.3 + n1(rng)), clamp(0.3 + n1(rng))}, 1));
    out.push_back(point({clamp(0.7 + n1(rng)), clamp(0.7 + n1(rng))}, 2));
  }
  return out;
}

}  // namespace

TEST_CASE("ramp and membership frozen values") {
  CHECK(ramp(-0.1, 4.0) == 0.0);
  CHECK_NEAR(ramp(0.1, 4.0), 0.4, 1e-15);
  CHECK(ramp(0.3, 4.0) == 1.0);

  Hyperbox b = box1d(0.2, 0.4);
  CHECK_NEAR(membership(b, point({0.5}), gamma4(1)), 0.6, 1e-12);
  CHECK(membership(b, point({0.3}), gamma4(1)) == 1.0);   // inside
  CHECK(membership(b, point({0.2}), gamma4(1)) == 1.0);   // on the face
  CHECK(membership(b, point({0.65}), gamma4(1)) == 0.0);  // past the ramp
  CHECK(membership(b, point({0.9}), gamma4(1)) == 0.0);

  // interval pattern: the upper end is what violates the max face
  CHECK_NEAR(membership(b, interval({0.3}, {0.5}), gamma4(1)), 0.6, 1e-12);
}

TEST_CASE("membership decays monotonically away from a box") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Hyperbox b = Hyperbox::fresh(3);
    for (int i = 0; i < 3; ++i) {
      double a = u(rng) * 0.5, w = a + u(rng) * 0.3;
      b.V(i) = a;
      b.W(i) = w;
    }
    b.cls = 1;
    double prev = 1.0;
    for (int s = 0; s <= 10; ++s) {
      Pattern p = point({0.0, 0.0, 0.0});
      p.lower = b.W;
      p.lower(0) += 0.05 * s;  // walk out along one axis
      p.lower = p.lower.cwiseMin(Eigen::VectorXd::Ones(3));
      p.upper = p.lower;
      double m = membership(b, p, gamma4(3));
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
      CHECK(m <= prev + 1e-15);
      prev = m;
    }
  }
}

TEST_CASE("a fresh box snaps to its first pattern") {
  Hyperbox b = Hyperbox::fresh(2);
  CHECK(b.V(0) == 1.0);
  CHECK(b.W(0) == 0.0);
  b.absorb(interval({0.2, 0.3}, {0.25, 0.4}));
  CHECK(b.V(0) == 0.2);
  CHECK(b.V(1) == 0.3);
  CHECK(b.W(0) == 0.25);
  CHECK(b.W(1) == 0.4);

  GfmmModel m = train({interval({0.2, 0.3}, {0.25, 0.4}, 5)});
  REQUIRE(m.boxes.size() == 1);
  CHECK(m.boxes[0].cls == 5);
  CHECK(m.boxes[0].V(1) == 0.3);
  CHECK(m.boxes[0].W(1) == 0.4);
  CHECK(m.report.clean);
  CHECK(m.report.epochs == 1);
  CHECK(m.class_ids == std::vector<int>{5});
  CHECK(m.class_names.at(5) == "class-5");
}

TEST_CASE("nearby same-class points merge into one box") {
  GfmmModel m = train({point({0.30, 0.50}, 1), point({0.35, 0.52}, 1)});
  REQUIRE(m.boxes.size() == 1);
  CHECK(m.boxes[0].V(0) == 0.30);
  CHECK(m.boxes[0].W(0) == 0.35);
  CHECK(m.boxes[0].V(1) == 0.50);
  CHECK(m.boxes[0].W(1) == 0.52);
  CHECK(m.report.clean);

  // beyond the cap they stay apart
  GfmmOptions tight;
  tight.theta_start = 0.04;
  tight.theta_min = 0.03;
  GfmmModel two = train({point({0.30, 0.50}, 1), point({0.35, 0.52}, 1)}, tight);
  CHECK(two.boxes.size() == 2);
}

TEST_CASE("contraction trims the smallest-overlap dimension") {
  // crossing boxes: overlap [0.4, 0.5] splits at 0.45
  Hyperbox a = box1d(0.2, 0.5, 1);
  Hyperbox b = box1d(0.4, 0.6, 2);
  REQUIRE(contract_overlap(a, b));
  CHECK_NEAR(a.W(0), 0.45, 1e-15);
  CHECK_NEAR(b.V(0), 0.45, 1e-15);
  CHECK(!contract_overlap(a, b));  // shared face left alone

  // mirrored crossing
  a = box1d(0.4, 0.6, 1);
  b = box1d(0.2, 0.5, 2);
  REQUIRE(contract_overlap(a, b));
  CHECK_NEAR(a.V(0), 0.45, 1e-15);
  CHECK_NEAR(b.W(0), 0.45, 1e-15);

  // containment: the contained box is close to one face, snap that side
  a = box1d(0.2, 0.8, 1);
  b = box1d(0.25, 0.4, 2);
  REQUIRE(contract_overlap(a, b));
  CHECK(a.V(0) == 0.4);  // wb - va = 0.2 < wa - vb = 0.55
  CHECK(a.W(0) == 0.8);
  CHECK(b.V(0) == 0.25);

  a = box1d(0.2, 0.8, 1);
  b = box1d(0.6, 0.75, 2);
  REQUIRE(contract_overlap(a, b));
  CHECK(a.W(0) == 0.6);  // now the upper face loses less

  // containment the other way adjusts the outer box b
  a = box1d(0.45, 0.5, 1);
  b = box1d(0.2, 0.8, 2);
  REQUIRE(contract_overlap(a, b));
  CHECK(b.V(0) == 0.5);  // wb - va = 0.35 >= wa - vb = 0.3

  // multi-dimension: only the smallest overlap moves
  Hyperbox c = Hyperbox::fresh(2);
  c.V << 0.0, 0.0;
  c.W << 0.5, 0.5;
  c.cls = 1;
  Hyperbox d = Hyperbox::fresh(2);
  d.V << 0.45, 0.2;
  d.W << 0.9, 0.9;
  d.cls = 2;
  REQUIRE(contract_overlap(c, d));  // overlaps 0.05 (dim 0) and 0.3 (dim 1)
  CHECK_NEAR(c.W(0), 0.475, 1e-15);
  CHECK_NEAR(d.V(0), 0.475, 1e-15);
  CHECK(c.W(1) == 0.5);
  CHECK(d.V(1) == 0.2);

  // disjoint boxes are untouched
  a = box1d(0.1, 0.2, 1);
  b = box1d(0.3, 0.4, 2);
  CHECK(!contract_overlap(a, b));
}

TEST_CASE("training separates blobs and reports the schedule") {
  auto patterns = two_blobs(25, 7);
  GfmmModel m = train(patterns);
  CHECK(m.report.clean);
  CHECK(m.report.misclassified == 0);
  CHECK(m.class_ids == std::vector<int>{1, 2});

  for (const Hyperbox& b : m.boxes) {
    CHECK(b.cls != 0);
    CHECK((b.W - b.V).minCoeff() >= 0.0);
    CHECK(b.size() <= m.report.theta_final + 1e-12);
  }

  // contraction postcondition: no interior overlap across classes
  for (size_t i = 0; i < m.boxes.size(); ++i)
    for (size_t j = i + 1; j < m.boxes.size(); ++j) {
      const Hyperbox& a = m.boxes[i];
      const Hyperbox& b = m.boxes[j];
      if (a.cls == b.cls) continue;
      double smallest = 1.0;
      for (int k = 0; k < 2; ++k)
        smallest = std::min(smallest,
                            std::min(a.W(k), b.W(k)) - std::max(a.V(k), b.V(k)));
      CHECK(smallest <= 1e-12);
    }

  // every training pattern lands on its own label at rank 1
  for (const Pattern& p : patterns) CHECK(classify(m, p).top() == p.label);
}

TEST_CASE("an unlearnable set ends with an honest report") {
  std::vector<Pattern> clash = {point({0.5, 0.5}, 1), point({0.5, 0.5}, 2)};
  GfmmModel m = train(clash);
  CHECK(!m.report.clean);
  CHECK(m.report.misclassified == 1);
  CHECK(m.report.epochs > 1);
  CHECK(m.report.theta_history.size() == static_cast<size_t>(m.report.epochs));
  CHECK(m.report.theta_final >= 0.03);
  CHECK(m.report.theta_final < 0.3);
}

TEST_CASE("classification matches a brute-force box scan") {
  auto patterns = two_blobs(20, 19, 0.08);
  GfmmModel m = train(patterns);

  std::mt19937 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    Pattern p = point({u(rng), u(rng)});
    Ranked r = classify(m, p);
    REQUIRE(r.scores.size() == 2);
    for (const auto& [cls, score] : r.scores) {
      double best = 0.0;
      for (const Hyperbox& b : m.boxes)
        if (b.cls == cls) best = std::max(best, membership(b, p, m.gamma));
      CHECK(score == best);
    }
    CHECK(r.scores[0].second >= r.scores[1].second);
  }
}

TEST_CASE("unlabeled boxes inherit labels and unlabeled patterns cluster") {
  // the unlabeled point founds a box, the labeled one claims it
  GfmmModel m = train({point({0.4, 0.4}, 0), point({0.42, 0.41}, 3)});
  REQUIRE(m.boxes.size() == 1);
  CHECK(m.boxes[0].cls == 3);
  CHECK(m.report.clean);

  // unlabeled pattern joins the nearest existing box without changing labels
  GfmmModel n = train({point({0.2, 0.2}, 1), point({0.8, 0.8}, 2), point({0.22, 0.2}, 0)});
  CHECK(n.boxes.size() == 2);
  CHECK(n.boxes[0].W(0) == 0.22);
}

TEST_CASE("ties are broken by ascending class id and flagged") {
  // 0.375 and 0.625 sit exactly 0.125 from the midpoint in binary, so both
  // memberships come out bit-identical
  GfmmOptions tight;
  tight.theta_start = 0.05;
  tight.theta_min = 0.04;
  GfmmModel m = train({point({0.375}, 2), point({0.625}, 1)}, tight);
  Ranked r = classify(m, point({0.5}));
  REQUIRE(r.scores.size() == 2);
  CHECK(r.scores[0].second == r.scores[1].second);
  CHECK_NEAR(r.scores[0].second, 0.5, 1e-15);
  CHECK(r.ambiguous);
  CHECK(r.top() == 1);
  CHECK(r.scores[1].first == 2);

  Ranked off = classify(m, point({0.4375}));
  CHECK(!off.ambiguous);
  CHECK(off.top() == 2);
}

TEST_CASE("invalid patterns and empty models are rejected") {
  CHECK_THROWS_AS(train({}), std::runtime_error);

  Pattern bad = point({0.5, 0.5}, 1);
  bad.upper(0) = 1.2;
  CHECK_THROWS_AS(train({bad}), std::runtime_error);

  Pattern inverted = interval({0.6, 0.2}, {0.4, 0.3}, 1);
  CHECK_THROWS_AS(train({inverted}), std::runtime_error);

  CHECK_THROWS_AS(train({point({0.5}, 1), point({0.5, 0.5}, 1)}), std::runtime_error);

  GfmmModel empty;
  empty.dims = 1;
  empty.gamma = gamma4(1);
  CHECK_THROWS_AS(classify(empty, point({0.5})), std::runtime_error);

  GfmmOptions bad_schedule;
  bad_schedule.theta_min = 0.5;  // above theta_start
  CHECK_THROWS_AS(train({point({0.5}, 1)}, bad_schedule), std::runtime_error);
}

TEST_CASE("two-level routing picks the period expert") {
  // level 1: hour-of-day (scaled) to one of six periods
  const int period_of_hour[25] = {0, 1, 1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3,
                                  4, 4, 4, 4, 4, 5, 5, 5, 6, 6, 6, 6};
  std::vector<Pattern> gate_data;
  for (int h = 1; h <= 24; ++h)
    gate_data.push_back(point({(h - 1) / 23.0}, period_of_hour[h]));
  GfmmOptions gate_opts;
  gate_opts.theta_start = 0.08;
  gate_opts.theta_min = 0.005;
  GfmmModel gate = train(gate_data, gate_opts);
  REQUIRE(gate.report.clean);

  // experts: period k answers class 100 + k for anything it sees
  std::map<int, GfmmModel> experts;
  for (int k = 1; k <= 6; ++k)
    experts[k] = train({interval({0.0, 0.0}, {1.0, 1.0}, 100 + k)});

  DimensionSplit split;
  split.level1 = {0};
  split.level2 = {1, 2};
  for (int h = 1; h <= 24; ++h) {
    Pattern p = point({(h - 1) / 23.0, 0.4, 0.6});
    TwoLevelResult r1 = two_level_classify(gate, experts, p, split);
    TwoLevelResult r2 = two_level_classify(gate, experts, p, split);
    CHECK(r1.expert == period_of_hour[h]);
    CHECK(r1.result.top() == 100 + period_of_hour[h]);
    CHECK(r2.expert == r1.expert);  // routing is deterministic
  }

  std::map<int, GfmmModel> missing;
  missing[1] = experts[1];
  CHECK_THROWS_AS(
      two_level_classify(gate, missing, point({23.0 / 23.0, 0.5, 0.5}), split),
      std::runtime_error);

  // a single expert behind a one-class gate is plain classification
  GfmmModel solo_gate = train({point({0.5}, 1)});
  TwoLevelResult solo =
      two_level_classify(solo_gate, missing, point({0.9, 0.3, 0.3}), split);
  Ranked direct = classify(missing[1], point({0.3, 0.3}));
  CHECK(solo.result.top() == direct.top());
  CHECK(solo.result.scores[0].second == direct.scores[0].second);
}

TEST_CASE("the model round-trips through json") {
  auto patterns = two_blobs(15, 31);
  GfmmOptions opts;
  opts.class_names = {{1, "low"}, {2, "high"}};
  GfmmModel m = train(patterns, opts);

  GfmmModel back = gfmm_from_json(gfmm_to_json(m));
  CHECK(back.dims == m.dims);
  CHECK((back.gamma - m.gamma).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(back.boxes.size() == m.boxes.size());
  for (size_t i = 0; i < m.boxes.size(); ++i) {
    CHECK((back.boxes[i].V - m.boxes[i].V).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.boxes[i].W - m.boxes[i].W).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.boxes[i].cls == m.boxes[i].cls);
  }
  CHECK(back.class_ids == m.class_ids);
  CHECK(back.class_names.at(1) == "low");
  CHECK(back.class_names.at(2) == "high");
  CHECK(back.report.theta_history == m.report.theta_history);
  CHECK(back.report.clean == m.report.clean);

  std::mt19937 rng(37);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Pattern p = point({u(rng), u(rng)});
    Ranked a = classify(m, p);
    Ranked b = classify(back, p);
    CHECK(a.scores == b.scores);
  }

  const std::string path = "/tmp/cotree_gfmm_roundtrip.json";
  save_gfmm_file(m, path);
  GfmmModel loaded = load_gfmm_file(path);
  CHECK(loaded.boxes.size() == m.boxes.size());
  std::remove(path.c_str());

  CHECK_THROWS_AS(gfmm_from_json("{not json"), std::runtime_error);
  CHECK_THROWS_AS(gfmm_from_json("{\"dims\": 2}"), std::runtime_error);
}

TEST_CASE("the assignment matrix has one active column per box") {
  GfmmOptions opts;
  opts.theta_start = 0.1;  // keep the stray unlabeled point in its own box
  opts.theta_min = 0.05;
  GfmmModel m =
      train({point({0.2, 0.2}, 1), point({0.8, 0.8}, 2), point({0.5, 0.9}, 0)}, opts);
  Eigen::MatrixXd U = m.u_matrix();
  REQUIRE(U.rows() == static_cast<int>(m.boxes.size()));
  REQUIRE(U.cols() == static_cast<int>(m.class_ids.size()) + 1);
  for (int r = 0; r < U.rows(); ++r) {
    CHECK(U.row(r).sum() == 1.0);
    CHECK(U.row(r).maxCoeff() == 1.0);
  }
  // the unlabeled cluster box occupies the leading column
  bool found_unlabeled = false;
  for (int r = 0; r < U.rows(); ++r)
    if (U(r, 0) == 1.0) found_unlabeled = true;
  CHECK(found_unlabeled);
}
