#pragma once

// General fuzzy min-max classifier over hyperbox fuzzy sets. Patterns are
// interval vectors in the unit cube (a point is a degenerate interval);
// training grows, expands and contracts hyperboxes online; classification
// scores each class by its best box membership. A two-level arrangement
// routes a pattern through a coarse first-level model that picks one expert
// model for the final decision.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace cotree {

// Interval pattern in [0,1]^N with an optional class label; 0 = unlabeled.
struct Pattern {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  int label = 0;
};

struct Hyperbox {
  Eigen::VectorXd V;  // min point
  Eigen::VectorXd W;  // max point
  int cls = 0;        // 0 = unlabeled

  // A box that has absorbed nothing yet: min point all ones, max point all
  // zeros, so the first absorption snaps both to the pattern.
  static Hyperbox fresh(int dims);
  void absorb(const Pattern& p);
  double size() const { return (W - V).maxCoeff(); }
};

struct GfmmOptions {
  double theta_start = 0.3;   // box size cap for the first epoch
  double theta_min = 0.03;    // give up once the schedule passes this
  double theta_decay = 0.9;   // cap multiplier between epochs
  double gamma = 4.0;         // membership ramp slope, every dimension
  Eigen::VectorXd gamma_per_dim;  // nonempty overrides the uniform slope
  std::map<int, std::string> class_names;
};

struct TrainingReport {
  int epochs = 0;
  double theta_final = 0.0;
  int misclassified = 0;      // training-set errors of the returned model
  bool clean = false;         // reached zero training errors
  std::vector<double> theta_history;  // cap used in each epoch
};

struct GfmmModel {
  int dims = 0;
  Eigen::VectorXd gamma;
  std::vector<Hyperbox> boxes;
  std::vector<int> class_ids;  // distinct nonzero labels, ascending
  std::map<int, std::string> class_names;
  TrainingReport report;

  // Binary box-to-class assignment matrix; row per box, column per entry of
  // class_ids, plus a leading column for unlabeled boxes.
  Eigen::MatrixXd u_matrix() const;
};

// Ramp threshold: 0 below the box face, rising with slope gamma, saturated
// at 1 from distance 1/gamma outward.
double ramp(double d, double gamma);

// Degree to which the pattern interval fits the box: the worst over
// dimensions of the upper- and lower-face violations through the ramp.
// 1 exactly when the pattern lies inside the box.
double membership(const Hyperbox& box, const Pattern& p, const Eigen::VectorXd& gamma);

// The single place the overlap rule lives, so it can be swapped out.
// Detects interior overlap (positive extent in every dimension) between two
// boxes and trims both along the dimension where the overlap is smallest:
// crossing boxes split the overlap at its midpoint, a contained edge snaps
// to the containing box's nearer face. Returns whether anything changed.
bool contract_overlap(Hyperbox& a, Hyperbox& b);

// One online pass per epoch: each pattern expands the best willing box of a
// compatible class (or founds a new one), expansion is capped at the epoch's
// box size, and any interior overlap with a differently labeled box is
// contracted away. Epochs restart with a tighter cap until the model
// reproduces every training label or the cap falls below theta_min; the
// report carries the outcome either way.
GfmmModel train(const std::vector<Pattern>& patterns, const GfmmOptions& opts = {});

struct Ranked {
  std::vector<std::pair<int, double>> scores;  // class id, best membership;
                                               // descending, ties by id
  bool ambiguous = false;                      // top two scores equal
  int top() const { return scores.front().first; }
};

// Scores every class of the model against the pattern. Throws on a model
// with no labeled boxes.
Ranked classify(const GfmmModel& model, const Pattern& p);

// Dimension indices feeding each level of the two-level arrangement.
struct DimensionSplit {
  std::vector<int> level1;
  std::vector<int> level2;
};

struct TwoLevelResult {
  int expert = 0;        // class chosen by the first level
  bool expert_tie = false;
  Ranked result;         // the expert's ranking of the level-2 sub-pattern
};

Pattern subpattern(const Pattern& p, const std::vector<int>& dims);

// Level 1 sees only its dimensions and its top class names the expert that
// classifies the rest of the pattern. Throws when the chosen expert is not
// configured.
TwoLevelResult two_level_classify(const GfmmModel& level1,
                                  const std::map<int, GfmmModel>& experts,
                                  const Pattern& p, const DimensionSplit& split);

// JSON round trip of the model (boxes, assignment matrix, slopes, cap
// history, class names).
std::string gfmm_to_json(const GfmmModel& model);
GfmmModel gfmm_from_json(const std::string& text);
void save_gfmm_file(const GfmmModel& model, const std::string& path);
GfmmModel load_gfmm_file(const std::string& path);

}  // namespace cotree
