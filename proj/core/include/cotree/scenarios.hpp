#pragma once

// Operational scenario tooling on top of the solvers: stochastic demand
// series, leak injection that splits a pipe at its midpoint while keeping
// the spanning tree, extended-time simulation reusing one tree across
// hours, labeled training-set generation for the leak classifier, and
// misclassification scoring.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cotree/estimator.hpp"
#include "cotree/gfmm.hpp"
#include "cotree/simulator.hpp"
#include "cotree/uncertainty.hpp"

namespace cotree {

enum class EventShape { Rectangular, Trapezoidal, Triangular };

// One consumption event family: count instances are placed at uniform
// random start times inside the window. Rectangular events hold the peak
// flow for the whole duration, trapezoidal events ramp linearly over the
// first and last quarter, triangular events peak at the midpoint.
struct DemandEvent {
  EventShape shape = EventShape::Rectangular;
  double intensity = 0.0;     // m^3/s at the peak
  double duration = 0.0;      // s
  double window_start = 0.0;  // s, earliest start
  double window_end = 0.0;    // s; starts are drawn so the event ends by here
  int count = 1;              // instances drawn per window
};

// Mean flow per step over [0, horizon), as the exact integral of the summed
// event shapes divided by the step. Overlapping instances add. The horizon
// must be a whole number of steps; the same seed reproduces the series.
std::vector<double> demand_profile(const std::vector<DemandEvent>& events,
                                   double horizon, double step, std::uint64_t seed);

// JSON round trip for event lists: {"events": [{shape, intensity, duration,
// window: [start, end], count}, ...]}.
std::vector<DemandEvent> demand_events_from_json(const std::string& text);
std::string demand_events_to_json(const std::vector<DemandEvent>& events);
std::vector<DemandEvent> load_demand_events_file(const std::string& path);

struct LeakScenario {
  int pipe = 0;            // id of the pipe to split
  double magnitude = 0.0;  // m^3/s drawn at the inserted node
};

// A network with one pipe split in half and a demand node inserted at the
// joint. Labels, predecessor chains and incidence matrices are carried over
// from the source system and extended in place; the tree shape is preserved
// rather than rediscovered, so solves on the injected system start from the
// same structure as the original.
struct InjectedSystem {
  Network net;
  SpanningTree tree;
  LoopSystem loops;
  int leak_node_id = 0;  // id of the inserted node
  int from_half_id = 0;  // reuses the split pipe's id
  int to_half_id = 0;    // fresh id for the half on the "to" side

  // Boundary data for the injected network: the base demands plus the leak
  // draw at the inserted node. Heads and inflows carry over unchanged.
  BoundaryValues extend_boundary(const BoundaryValues& base, double magnitude) const;
};

// Splits the pipe of the scenario at its midpoint into two half-length
// pipes (resistance recomputed for the halved length, or halved directly
// for override resistances) joined by a new demand node carrying the leak
// magnitude. Throws on unknown or fixed-flow pipes and negative magnitudes.
InjectedSystem inject_leak(const Network& net, const SpanningTree& tree,
                           const LoopSystem& loops, const LeakScenario& leak);

// Boundary data per hour: network defaults with every demand scaled by the
// hour's multiplier.
std::vector<BoundaryValues> hourly_boundaries(const Network& net,
                                              const std::vector<double>& multipliers);

struct ExtendedPeriodRecord {
  int hour = 0;                      // index into the boundary list
  std::vector<int> reversed_labels;  // pipes flipped before this solve
  SimulationResult result;
};

struct ExtendedPeriodRun {
  std::vector<ExtendedPeriodRecord> hours;
  int failures = 0;  // hours whose solve did not converge; the run continues
};

// One steady solve per boundary entry on a shared tree. Each hour the
// initial flows are recomputed from the new demands, tree pipes whose
// initial flow turned negative are reversed in place, and the loop solve
// runs on the updated system. The tree is never rebuilt.
ExtendedPeriodRun extended_time_simulation(const Network& net, const SpanningTree& tree,
                                           const LoopSystem& loops,
                                           const std::vector<BoundaryValues>& hours,
                                           const SimulationOptions& opts = {});

// Affine map between a physical range and [0,1]. Out-of-range inputs clamp;
// callers that care count them via scale(x, clamped).
struct ScalingRange {
  double lo = 0.0;
  double hi = 1.0;
  double scale(double x) const;
  double scale(double x, bool& clamped) const;
  double unscale(double u) const;
};

// What goes into a training pattern: the packed state estimate (heads then
// fixed-node inflows) or the per-demand-node consumption corrections.
enum class PatternMode { State, DemandDelta };

struct TrainingRow {
  int hour = 0;            // 1-based hour the pattern was generated at
  int label = 0;           // class id; leak classes first, normal class last
  Eigen::VectorXd lower;   // scaled pattern bounds, in [0,1]
  Eigen::VectorXd upper;
  int leak_pipe = 0;       // pipe id, 0 for the normal class
  double leak_level = 0.0; // m^3/s, 0 for the normal class
};

struct TrainingDataset {
  std::vector<std::string> dim_names;  // one per pattern dimension
  std::vector<TrainingRow> rows;
  std::map<int, std::string> class_names;
  int skipped = 0;   // cells dropped because a solve or estimate failed
  int clamped = 0;   // pattern components that fell outside their range
  std::vector<std::string> notes;

  std::vector<Pattern> patterns() const;  // rows as classifier input
};

struct GenerationOptions {
  std::vector<int> pipes;      // leak candidates; class i+1 = pipes[i]
  std::vector<double> levels;  // leak magnitudes, m^3/s
  PatternMode mode = PatternMode::DemandDelta;
  MeasurementSet meters;       // meter placement; values are filled per cell
  UncertaintySpec spec;        // error widths for the confidence bounds
  EstimationOptions est;
  SimulationOptions sim;
  ScalingRange head_range{2.0, 50.0};
  ScalingRange inflow_range{-0.2, 0.2};
  ScalingRange delta_range{-0.05, 0.05};
  int jobs = 1;                // worker threads over the generation grid
  std::uint64_t noise_seed = 0;  // 0 reads meters exactly; otherwise every
                                 // estimator input gets a fresh uniform error
                                 // within the spec widths, per-cell seeded
};

// Labeled patterns for every hour x candidate pipe x leak level, plus one
// normal pattern per hour. Each cell simulates the injected network, reads
// the meters off that truth, estimates on the unmodified network (the leak
// stays unknown to the estimator), brackets the estimate with one
// error-maximization run per side, and scales the resulting interval into
// [0,1]. Cells whose solves fail are skipped and counted. Row order is
// hour-major with the normal pattern first, regardless of the job count.
TrainingDataset generate_training_set(const Network& net, const SpanningTree& tree,
                                      const LoopSystem& loops,
                                      const std::vector<BoundaryValues>& hours,
                                      const GenerationOptions& opts);

// CSV round trip. Columns: hour, label, lower_1..N, upper_1..N, leak_pipe,
// leak_level. Dimension and class names are not part of the file.
void save_dataset_csv(const TrainingDataset& ds, const std::string& path);
TrainingDataset load_dataset_csv(const std::string& path);

struct MisclassificationReport {
  std::vector<int> top_k;
  std::vector<double> rate;  // per entry of top_k: share of labeled patterns
                             // whose true class misses the top k ranks
  int evaluated = 0;
};

MisclassificationReport evaluate_misclassification(const GfmmModel& model,
                                                   const std::vector<Pattern>& patterns,
                                                   const std::vector<int>& top_k);

// Two-level variant: the gate picks the expert, the expert's ranking is
// scored.
MisclassificationReport evaluate_misclassification(const GfmmModel& gate,
                                                   const std::map<int, GfmmModel>& experts,
                                                   const DimensionSplit& split,
                                                   const std::vector<Pattern>& patterns,
                                                   const std::vector<int>& top_k);

}  // namespace cotree
