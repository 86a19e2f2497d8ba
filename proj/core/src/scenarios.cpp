#include "cotree/scenarios.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <utility>

#include <json.hpp>

namespace cotree {

namespace {

using nlohmann::json;

void check_event(const DemandEvent& e, size_t pos) {
  auto bad = [&](const std::string& what) {
    throw std::runtime_error("demand event " + std::to_string(pos) + ": " + what);
  };
  if (!(e.intensity > 0.0)) bad("intensity must be > 0");
  if (!(e.duration > 0.0)) bad("duration must be > 0");
  if (e.window_end < e.window_start) bad("window ends before it starts");
  if (e.count < 1) bad("count must be >= 1");
}

// Vertices of one event instance as a piecewise-linear flow curve over time.
std::vector<std::pair<double, double>> event_vertices(const DemandEvent& e, double start) {
  const double D = e.duration, I = e.intensity;
  switch (e.shape) {
    case EventShape::Rectangular:
      return {{start, I}, {start + D, I}};
    case EventShape::Trapezoidal:
      return {{start, 0.0}, {start + 0.25 * D, I}, {start + 0.75 * D, I}, {start + D, 0.0}};
    case EventShape::Triangular:
      return {{start, 0.0}, {start + 0.5 * D, I}, {start + D, 0.0}};
  }
  return {};
}

// Integral of the linear segment (t0,f0)-(t1,f1) restricted to [a,b].
double segment_integral(double t0, double f0, double t1, double f1, double a, double b) {
  const double lo = std::max(a, t0), hi = std::min(b, t1);
  if (hi <= lo || t1 <= t0) return 0.0;
  auto at = [&](double t) { return f0 + (f1 - f0) * (t - t0) / (t1 - t0); };
  return 0.5 * (at(lo) + at(hi)) * (hi - lo);
}

}  // namespace

std::vector<double> demand_profile(const std::vector<DemandEvent>& events,
                                   double horizon, double step, std::uint64_t seed) {
  if (!(step > 0.0)) throw std::runtime_error("profile step must be > 0");
  if (!(horizon > 0.0)) throw std::runtime_error("profile horizon must be > 0");
  const double ratio = horizon / step;
  const long long steps = std::llround(ratio);
  if (steps < 1 || std::abs(ratio - static_cast<double>(steps)) > 1e-9)
    throw std::runtime_error("profile horizon must be a whole number of steps");
  for (size_t i = 0; i < events.size(); ++i) check_event(events[i], i);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<double> series(static_cast<size_t>(steps), 0.0);
  for (const DemandEvent& e : events) {
    const double span = std::max(0.0, e.window_end - e.duration - e.window_start);
    for (int c = 0; c < e.count; ++c) {
      const double start = e.window_start + unif(rng) * span;
      const auto verts = event_vertices(e, start);
      const long long first =
          std::max<long long>(0, static_cast<long long>(std::floor(start / step)));
      const long long last = std::min<long long>(
          steps - 1, static_cast<long long>(std::ceil((start + e.duration) / step)));
      for (long long s = first; s <= last; ++s) {
        const double a = static_cast<double>(s) * step, b = a + step;
        double vol = 0.0;
        for (size_t v = 0; v + 1 < verts.size(); ++v)
          vol += segment_integral(verts[v].first, verts[v].second, verts[v + 1].first,
                                  verts[v + 1].second, a, b);
        series[static_cast<size_t>(s)] += vol / step;
      }
    }
  }
  return series;
}

namespace {

std::string shape_name(EventShape s) {
  switch (s) {
    case EventShape::Rectangular: return "rectangular";
    case EventShape::Trapezoidal: return "trapezoidal";
    case EventShape::Triangular: return "triangular";
  }
  return "?";
}

EventShape shape_from_name(const std::string& s) {
  if (s == "rectangular") return EventShape::Rectangular;
  if (s == "trapezoidal") return EventShape::Trapezoidal;
  if (s == "triangular") return EventShape::Triangular;
  throw std::runtime_error("demand profile json: unknown shape \"" + s + "\"");
}

}  // namespace

std::vector<DemandEvent> demand_events_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("demand profile json: ") + e.what());
  }
  if (!j.is_object() || !j.contains("events") || !j["events"].is_array())
    throw std::runtime_error("demand profile json: missing \"events\" array");
  std::vector<DemandEvent> out;
  for (const json& je : j["events"]) {
    DemandEvent e;
    try {
      e.shape = shape_from_name(je.value("shape", std::string("rectangular")));
      e.intensity = je.at("intensity").get<double>();
      e.duration = je.at("duration").get<double>();
      if (je.contains("window")) {
        const json& w = je.at("window");
        if (!w.is_array() || w.size() != 2)
          throw std::runtime_error("demand profile json: window must be [start, end]");
        e.window_start = w[0].get<double>();
        e.window_end = w[1].get<double>();
      } else {
        e.window_start = 0.0;
        e.window_end = e.duration;
      }
      e.count = je.value("count", 1);
    } catch (const json::exception& ex) {
      throw std::runtime_error(std::string("demand profile json: event ") +
                               std::to_string(out.size()) + ": " + ex.what());
    }
    out.push_back(e);
  }
  return out;
}

std::string demand_events_to_json(const std::vector<DemandEvent>& events) {
  json j;
  j["events"] = json::array();
  for (const DemandEvent& e : events) {
    json je;
    je["shape"] = shape_name(e.shape);
    je["intensity"] = e.intensity;
    je["duration"] = e.duration;
    je["window"] = {e.window_start, e.window_end};
    je["count"] = e.count;
    j["events"].push_back(je);
  }
  return j.dump(2);
}

std::vector<DemandEvent> load_demand_events_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open demand profile file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return demand_events_from_json(ss.str());
}

BoundaryValues InjectedSystem::extend_boundary(const BoundaryValues& base, double magnitude) const {
  BoundaryValues bv = base;
  bv.demand.resize(net.nodes.size(), 0.0);
  bv.demand.back() = magnitude;
  return bv;
}

InjectedSystem inject_leak(const Network& net, const SpanningTree& tree,
                           const LoopSystem& loops, const LeakScenario& leak) {
  const int pi = net.pipe_index(leak.pipe);
  if (pi < 0) throw std::runtime_error("leak pipe id not found: " + std::to_string(leak.pipe));
  const Pipe old = net.pipes[static_cast<size_t>(pi)];
  if (old.fixed_flow)
    throw std::runtime_error("pipe " + std::to_string(leak.pipe) +
                             " carries a fixed flow; a leak cannot be placed on it");
  if (leak.magnitude < 0.0) throw std::runtime_error("leak magnitude must be >= 0");

  const int nn = static_cast<int>(net.nodes.size());
  const int old_n = tree.n, old_p = tree.p;
  const int m = tree.label_of_pipe[static_cast<size_t>(pi)];

  InjectedSystem out;
  out.net = net;
  out.tree = tree;
  out.loops = loops;

  int node_id = 0, pipe_id = 0;
  for (const Node& nd : net.nodes) node_id = std::max(node_id, nd.id);
  for (const Pipe& pp : net.pipes) pipe_id = std::max(pipe_id, pp.id);
  out.leak_node_id = ++node_id;
  out.from_half_id = old.id;
  out.to_half_id = ++pipe_id;

  // The two halves keep the split pipe's material data at half length. The
  // half adjacent to the original "from" node reuses the pipe's id.
  Pipe near = old, far = old;
  near.to = out.leak_node_id;
  far.id = out.to_half_id;
  far.from = out.leak_node_id;
  for (Pipe* h : {&near, &far}) {
    h->length = old.length / 2.0;
    h->k = old.k_override ? old.k / 2.0
                          : hazen_williams_resistance(h->C, h->length, h->diameter);
  }

  Node leak_node;
  leak_node.id = out.leak_node_id;
  leak_node.kind = NodeKind::Demand;
  leak_node.demand = leak.magnitude;
  leak_node.elevation = 0.5 * (net.node(old.from).elevation + net.node(old.to).elevation);

  out.net.pipes[static_cast<size_t>(pi)] = near;
  out.net.pipes.push_back(far);
  out.net.nodes.push_back(leak_node);
  const int new_node_idx = nn;
  const int far_idx = static_cast<int>(net.pipes.size());

  SpanningTree& tr = out.tree;
  LoopSystem& ls = out.loops;
  tr.n = old_n + 1;
  tr.p = old_p + 1;

  std::vector<double> k2(static_cast<size_t>(old_p) + 2, 0.0);
  std::vector<int> sign2(static_cast<size_t>(old_p) + 2, 1);
  std::vector<int> fl2(static_cast<size_t>(old_p) + 2, -1);
  std::vector<int> tl2(static_cast<size_t>(old_p) + 2, -1);
  std::vector<int> pol2(static_cast<size_t>(old_p) + 2, -1);

  if (m <= old_n) {
    // Splitting a tree pipe: the new node takes the child's label and every
    // label from there on moves up by one, which keeps parents ahead of
    // children and the tree matrix upper triangular.
    const int parent = tree.pred[static_cast<size_t>(m)];
    auto shift_node = [&](int lab) { return lab >= m ? lab + 1 : lab; };
    auto shift_pipe = [&](int j) { return j >= m ? j + 1 : j; };

    tr.node_of_label.insert(tr.node_of_label.begin() + m, new_node_idx);
    for (int& lab : tr.label_of_node)
      if (lab >= m) ++lab;
    tr.label_of_node.push_back(m);

    std::vector<int> pred2(static_cast<size_t>(nn) + 1, -1);
    for (int v = 1; v <= old_n; ++v)
      pred2[static_cast<size_t>(shift_node(v))] =
          v == m ? m : shift_node(tree.pred[static_cast<size_t>(v)]);
    pred2[static_cast<size_t>(m)] = parent;
    tr.pred = pred2;

    for (int j = 1; j <= old_p; ++j) {
      if (j == m) continue;
      const int j2 = shift_pipe(j);
      k2[static_cast<size_t>(j2)] = tree.k[static_cast<size_t>(j)];
      sign2[static_cast<size_t>(j2)] = tree.sign[static_cast<size_t>(j)];
      fl2[static_cast<size_t>(j2)] = shift_node(tree.from_label[static_cast<size_t>(j)]);
      tl2[static_cast<size_t>(j2)] = shift_node(tree.to_label[static_cast<size_t>(j)]);
      pol2[static_cast<size_t>(j2)] = tree.pipe_of_label[static_cast<size_t>(j)];
    }

    // Label m is the parent half (its child is the new node), m+1 the child
    // half. Orientations continue the split pipe's, so the signs carry over.
    k2[static_cast<size_t>(m)] = k2[static_cast<size_t>(m) + 1] = near.k;
    sign2[static_cast<size_t>(m)] = sign2[static_cast<size_t>(m) + 1] =
        tree.sign[static_cast<size_t>(m)];
    const bool parent_first = tree.from_label[static_cast<size_t>(m)] == parent;
    if (parent_first) {
      fl2[static_cast<size_t>(m)] = parent;
      tl2[static_cast<size_t>(m)] = m;
      fl2[static_cast<size_t>(m) + 1] = m;
      tl2[static_cast<size_t>(m) + 1] = m + 1;
    } else {
      fl2[static_cast<size_t>(m)] = m;
      tl2[static_cast<size_t>(m)] = parent;
      fl2[static_cast<size_t>(m) + 1] = m + 1;
      tl2[static_cast<size_t>(m) + 1] = m;
    }
    const bool parent_is_from =
        tree.node_of_label[static_cast<size_t>(parent)] == net.node_index(old.from);
    pol2[static_cast<size_t>(m)] = parent_is_from ? pi : far_idx;
    pol2[static_cast<size_t>(m) + 1] = parent_is_from ? far_idx : pi;

    for (Loop& lp : ls.loops) {
      if (lp.chord > 0) lp.chord = shift_pipe(lp.chord);
      if (lp.node > 0) lp.node = shift_node(lp.node);
      std::vector<std::pair<int, int>> np;
      np.reserve(lp.pipes.size() + 1);
      for (const auto& [j, c] : lp.pipes) {
        if (j == m) {
          np.emplace_back(m, c);
          np.emplace_back(m + 1, c);
        } else {
          np.emplace_back(shift_pipe(j), c);
        }
      }
      lp.pipes = std::move(np);
    }
    for (int& lab : ls.pseudo_node_label) lab = shift_node(lab);
  } else {
    // Splitting a chord: the new node joins the tree as the last label via
    // the half on the chord's "from" side; the other half replaces the
    // chord. No existing label moves.
    const int A = tree.from_label[static_cast<size_t>(m)];
    const int B = tree.to_label[static_cast<size_t>(m)];
    const int x = old_n + 1;

    tr.node_of_label.push_back(new_node_idx);
    tr.label_of_node.push_back(x);
    tr.pred.push_back(A);

    for (int j = 1; j <= old_p; ++j) {
      if (j == m) continue;
      const int j2 = j > old_n ? j + 1 : j;
      k2[static_cast<size_t>(j2)] = tree.k[static_cast<size_t>(j)];
      sign2[static_cast<size_t>(j2)] = tree.sign[static_cast<size_t>(j)];
      fl2[static_cast<size_t>(j2)] = tree.from_label[static_cast<size_t>(j)];
      tl2[static_cast<size_t>(j2)] = tree.to_label[static_cast<size_t>(j)];
      pol2[static_cast<size_t>(j2)] = tree.pipe_of_label[static_cast<size_t>(j)];
    }

    k2[static_cast<size_t>(x)] = k2[static_cast<size_t>(m) + 1] = near.k;
    sign2[static_cast<size_t>(x)] = sign2[static_cast<size_t>(m) + 1] =
        tree.sign[static_cast<size_t>(m)];
    fl2[static_cast<size_t>(x)] = A;
    tl2[static_cast<size_t>(x)] = x;
    fl2[static_cast<size_t>(m) + 1] = x;
    tl2[static_cast<size_t>(m) + 1] = B;
    const bool a_is_from =
        tree.node_of_label[static_cast<size_t>(A)] == net.node_index(old.from);
    pol2[static_cast<size_t>(x)] = a_is_from ? pi : far_idx;
    pol2[static_cast<size_t>(m) + 1] = a_is_from ? far_idx : pi;

    for (Loop& lp : ls.loops) {
      const bool own = lp.chord == m;
      if (lp.chord > 0) ++lp.chord;
      for (auto& [j, c] : lp.pipes)
        if (j > old_n) ++j;
      // The loop that owned the chord now closes through the new tree pipe.
      if (own) lp.pipes.emplace_back(x, 1);
    }
  }

  tr.k = std::move(k2);
  tr.sign = std::move(sign2);
  tr.from_label = std::move(fl2);
  tr.to_label = std::move(tl2);
  tr.pipe_of_label = std::move(pol2);
  tr.label_of_pipe.assign(out.net.pipes.size(), -1);
  for (int j = 1; j <= tr.p; ++j)
    if (tr.pipe_of_label[static_cast<size_t>(j)] >= 0)
      tr.label_of_pipe[static_cast<size_t>(tr.pipe_of_label[static_cast<size_t>(j)])] = j;

  tr.T = Eigen::MatrixXd::Zero(tr.n, tr.n);
  tr.C = Eigen::MatrixXd::Zero(tr.n, tr.chords());
  for (int j = 1; j <= tr.p; ++j) {
    auto put = [&](int node_label, double v) {
      if (node_label == 0) return;
      if (j <= tr.n)
        tr.T(node_label - 1, j - 1) = v;
      else
        tr.C(node_label - 1, j - tr.n - 1) = v;
    };
    put(tr.to_label[static_cast<size_t>(j)], 1.0);
    put(tr.from_label[static_cast<size_t>(j)], -1.0);
  }

  const int l = ls.total();
  ls.M = Eigen::MatrixXd::Zero(l, tr.p);
  for (int r = 0; r < l; ++r)
    for (const auto& [pipe, coeff] : ls.loops[static_cast<size_t>(r)].pipes)
      ls.M(r, pipe - 1) = coeff;
  ls.B = Eigen::MatrixXd::Zero(tr.n + 1, l);
  for (int q = 0; q < ls.pseudo_loops; ++q) {
    const int r = ls.chord_loops + q;
    ls.B(0, r) = 1.0;
    ls.B(ls.pseudo_node_label[static_cast<size_t>(q)], r) = -1.0;
  }
  return out;
}

std::vector<BoundaryValues> hourly_boundaries(const Network& net,
                                              const std::vector<double>& multipliers) {
  std::vector<BoundaryValues> out;
  out.reserve(multipliers.size());
  for (double mult : multipliers) {
    BoundaryValues bv = BoundaryValues::defaults(net);
    for (size_t i = 0; i < net.nodes.size(); ++i)
      if (net.nodes[i].kind == NodeKind::Demand) bv.demand[i] *= mult;
    out.push_back(std::move(bv));
  }
  return out;
}

ExtendedPeriodRun extended_time_simulation(const Network& net, const SpanningTree& tree,
                                           const LoopSystem& loops,
                                           const std::vector<BoundaryValues>& hours,
                                           const SimulationOptions& opts) {
  ExtendedPeriodRun run;
  SpanningTree tr = tree;
  LoopSystem ls = loops;
  for (size_t h = 0; h < hours.size(); ++h) {
    ExtendedPeriodRecord rec;
    rec.hour = static_cast<int>(h);
    const Eigen::VectorXd d = label_demand(net, tr, hours[h]);
    const Eigen::VectorXd qi = initial_flows(tr, d);
    for (int j = 1; j <= tr.n; ++j)
      if (qi(j - 1) < 0.0) rec.reversed_labels.push_back(j);
    if (!rec.reversed_labels.empty()) update_for_reversed_flows(tr, ls, rec.reversed_labels);
    rec.result = solve_cotree(net, tr, ls, hours[h], opts);
    if (!rec.result.converged) ++run.failures;
    run.hours.push_back(std::move(rec));
  }
  return run;
}

double ScalingRange::scale(double x) const {
  bool clamped = false;
  return scale(x, clamped);
}

double ScalingRange::scale(double x, bool& clamped) const {
  if (!(hi > lo)) throw std::runtime_error("scaling range needs hi > lo");
  clamped = x < lo || x > hi;
  return (std::clamp(x, lo, hi) - lo) / (hi - lo);
}

double ScalingRange::unscale(double u) const { return lo + u * (hi - lo); }

std::vector<Pattern> TrainingDataset::patterns() const {
  std::vector<Pattern> out;
  out.reserve(rows.size());
  for (const TrainingRow& r : rows) out.push_back({r.lower, r.upper, r.label});
  return out;
}

namespace {

struct Cell {
  int hour = 0;        // index into the boundary list
  int pipe_slot = -1;  // index into GenerationOptions::pipes, -1 = normal
  int level_slot = -1;
};

struct CellOutcome {
  bool ok = false;
  TrainingRow row;
  int clamped = 0;
  std::vector<std::string> notes;
};

std::string cell_name(const Cell& c, const GenerationOptions& opts) {
  std::ostringstream os;
  os << "hour " << c.hour + 1;
  if (c.pipe_slot < 0)
    os << " normal";
  else
    os << " pipe " << opts.pipes[static_cast<size_t>(c.pipe_slot)] << " level "
       << opts.levels[static_cast<size_t>(c.level_slot)];
  return os.str();
}

}  // namespace

TrainingDataset generate_training_set(const Network& net, const SpanningTree& tree,
                                      const LoopSystem& loops,
                                      const std::vector<BoundaryValues>& hours,
                                      const GenerationOptions& opts) {
  if (hours.empty()) throw std::runtime_error("training set needs at least one hour");
  if (!opts.pipes.empty() && opts.levels.empty())
    throw std::runtime_error("leak pipes given without leak levels");
  for (double lv : opts.levels)
    if (!(lv > 0.0)) throw std::runtime_error("leak levels must be > 0");
  for (const HeadMeasurement& mh : opts.meters.heads)
    if (net.node_index(mh.node) < 0)
      throw std::runtime_error("meter node id not found: " + std::to_string(mh.node));
  for (const FlowMeasurement& mf : opts.meters.flows)
    if (net.pipe_index(mf.pipe) < 0)
      throw std::runtime_error("meter pipe id not found: " + std::to_string(mf.pipe));

  TrainingDataset ds;
  std::vector<int> demand_idx;
  for (size_t i = 0; i < net.nodes.size(); ++i)
    if (net.nodes[i].kind == NodeKind::Demand) demand_idx.push_back(static_cast<int>(i));

  if (opts.mode == PatternMode::State) {
    ds.dim_names = state_variable_names(net);
  } else {
    for (int i : demand_idx)
      ds.dim_names.push_back("delta:" + std::to_string(net.nodes[static_cast<size_t>(i)].id));
  }
  for (size_t s = 0; s < opts.pipes.size(); ++s)
    ds.class_names[static_cast<int>(s) + 1] = "pipe-" + std::to_string(opts.pipes[s]);
  const int normal_class = static_cast<int>(opts.pipes.size()) + 1;
  ds.class_names[normal_class] = "normal";

  // Scaling per dimension: heads then inflows in state mode, the demand
  // correction range otherwise.
  const int dims = static_cast<int>(ds.dim_names.size());
  auto range_of = [&](int dim) -> const ScalingRange& {
    if (opts.mode != PatternMode::State) return opts.delta_range;
    return dim < static_cast<int>(net.nodes.size()) ? opts.head_range : opts.inflow_range;
  };

  std::vector<InjectedSystem> injected;
  injected.reserve(opts.pipes.size());
  for (int id : opts.pipes) injected.push_back(inject_leak(net, tree, loops, {id, 0.0}));

  std::vector<Cell> cells;
  for (size_t h = 0; h < hours.size(); ++h) {
    cells.push_back({static_cast<int>(h), -1, -1});
    for (size_t ps = 0; ps < opts.pipes.size(); ++ps)
      for (size_t lv = 0; lv < opts.levels.size(); ++lv)
        cells.push_back({static_cast<int>(h), static_cast<int>(ps), static_cast<int>(lv)});
  }

  auto compute = [&](const Cell& cell, size_t cell_index) -> CellOutcome {
    CellOutcome out;
    try {
      const BoundaryValues& bvh = hours[static_cast<size_t>(cell.hour)];
      SimulationResult truth;
      const Network* truth_net = &net;
      if (cell.pipe_slot < 0) {
        truth = solve_cotree(net, tree, loops, bvh, opts.sim);
      } else {
        const InjectedSystem& sys = injected[static_cast<size_t>(cell.pipe_slot)];
        truth_net = &sys.net;
        const BoundaryValues bvi =
            sys.extend_boundary(bvh, opts.levels[static_cast<size_t>(cell.level_slot)]);
        truth = solve_cotree(sys.net, sys.tree, sys.loops, bvi, opts.sim);
      }
      if (!truth.converged) {
        out.notes.push_back(cell_name(cell, opts) + ": simulation failed: " + truth.message);
        return out;
      }

      MeasurementSet ms = opts.meters;
      for (HeadMeasurement& mh : ms.heads)
        mh.value = truth.head[static_cast<size_t>(truth_net->node_index(mh.node))];
      for (FlowMeasurement& mf : ms.flows)
        mf.value = truth.flow[static_cast<size_t>(truth_net->pipe_index(mf.pipe))];

      // The truth stays exact; noise lands only on what the estimator sees.
      BoundaryValues bve = bvh;
      if (opts.noise_seed != 0) {
        std::mt19937_64 rng(opts.noise_seed ^
                            (0x9E3779B97F4A7C15ULL * (cell_index + 1)));
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (HeadMeasurement& mh : ms.heads)
          mh.value += u(rng) * opts.spec.head_meas_accuracy;
        for (FlowMeasurement& mf : ms.flows)
          mf.value += u(rng) * opts.spec.flow_meas_accuracy;
        for (size_t i = 0; i < bve.demand.size(); ++i)
          if (net.nodes[i].kind == NodeKind::Demand)
            bve.demand[i] += u(rng) * opts.spec.demand_variability * std::abs(bve.demand[i]);
        for (auto& [id, h] : bve.head) h += u(rng) * opts.spec.fixed_head_accuracy;
        for (auto& [id, q] : bve.inflow) q += u(rng) * opts.spec.inflow_accuracy * std::abs(q);
      }

      const StateEstimate est = estimate(net, tree, loops, bve, ms, opts.est);
      if (!est.converged) {
        out.notes.push_back(cell_name(cell, opts) + ": estimation failed: " + est.message);
        return out;
      }

      StateEstimate bound[2];
      const double sides[2] = {-1.0, 1.0};
      for (int b = 0; b < 2; ++b) {
        auto [bvs, mss] = em_shifted_inputs(net, tree, loops, bve, ms, opts.spec, est, sides[b]);
        bound[b] = estimate(net, tree, loops, bvs, mss, opts.est);
        if (!bound[b].converged) {
          out.notes.push_back(cell_name(cell, opts) + ": bound run failed: " + bound[b].message);
          return out;
        }
      }

      auto extract = [&](const StateEstimate& e) -> Eigen::VectorXd {
        if (opts.mode == PatternMode::State) return pack_state(net, e.head, e.inflow);
        Eigen::VectorXd v(demand_idx.size());
        for (size_t i = 0; i < demand_idx.size(); ++i)
          v(static_cast<int>(i)) = e.delta_demand[static_cast<size_t>(demand_idx[i])];
        return v;
      };
      const Eigen::VectorXd x = extract(est);
      const Eigen::VectorXd lo_run = extract(bound[0]);
      const Eigen::VectorXd hi_run = extract(bound[1]);
      // Keep the corner displacements signed: each dimension's interval is
      // the span of the estimate and the two corner solutions, matching the
      // lower/upper limit convention of the confidence analysis.
      const Eigen::VectorXd lower_raw = x.cwiseMin(lo_run).cwiseMin(hi_run);
      const Eigen::VectorXd upper_raw = x.cwiseMax(lo_run).cwiseMax(hi_run);

      out.row.lower.resize(dims);
      out.row.upper.resize(dims);
      for (int d = 0; d < dims; ++d) {
        bool c1 = false, c2 = false;
        out.row.lower(d) = range_of(d).scale(lower_raw(d), c1);
        out.row.upper(d) = range_of(d).scale(upper_raw(d), c2);
        out.clamped += static_cast<int>(c1) + static_cast<int>(c2);
      }
      out.row.hour = cell.hour + 1;
      if (cell.pipe_slot < 0) {
        out.row.label = normal_class;
      } else {
        out.row.label = cell.pipe_slot + 1;
        out.row.leak_pipe = opts.pipes[static_cast<size_t>(cell.pipe_slot)];
        out.row.leak_level = opts.levels[static_cast<size_t>(cell.level_slot)];
      }
      out.ok = true;
    } catch (const std::exception& ex) {
      out.ok = false;
      out.notes.push_back(cell_name(cell, opts) + ": " + ex.what());
    }
    return out;
  };

  std::vector<CellOutcome> outcomes(cells.size());
  const int jobs = std::max(1, opts.jobs);
  if (jobs == 1 || cells.size() < 2) {
    for (size_t i = 0; i < cells.size(); ++i) outcomes[i] = compute(cells[i], i);
  } else {
    std::atomic<size_t> next{0};
    auto worker = [&]() {
      for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
        outcomes[i] = compute(cells[i], i);
    };
    std::vector<std::thread> pool;
    const int workers = std::min<int>(jobs, static_cast<int>(cells.size()));
    pool.reserve(static_cast<size_t>(workers));
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  for (CellOutcome& oc : outcomes) {
    if (oc.ok) {
      ds.rows.push_back(std::move(oc.row));
      ds.clamped += oc.clamped;
    } else {
      ++ds.skipped;
    }
    for (std::string& note : oc.notes) ds.notes.push_back(std::move(note));
  }
  if (!cells.empty() && ds.skipped == static_cast<int>(cells.size()))
    throw std::runtime_error("every training cell failed; first: " +
                             (ds.notes.empty() ? std::string("(no note)") : ds.notes.front()));
  if (ds.skipped > 0)
    ds.notes.push_back("skipped " + std::to_string(ds.skipped) + " of " +
                       std::to_string(cells.size()) + " cells");
  if (ds.clamped > 0)
    ds.notes.push_back(std::to_string(ds.clamped) + " pattern components clamped into range");
  return ds;
}

void save_dataset_csv(const TrainingDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  const int dims = ds.rows.empty() ? static_cast<int>(ds.dim_names.size())
                                   : static_cast<int>(ds.rows.front().lower.size());
  out << "hour,label";
  for (int d = 1; d <= dims; ++d) out << ",lower_" << d;
  for (int d = 1; d <= dims; ++d) out << ",upper_" << d;
  out << ",leak_pipe,leak_level\n";
  out << std::setprecision(17);
  for (const TrainingRow& r : ds.rows) {
    out << r.hour << ',' << r.label;
    for (int d = 0; d < dims; ++d) out << ',' << r.lower(d);
    for (int d = 0; d < dims; ++d) out << ',' << r.upper(d);
    out << ',' << r.leak_pipe << ',' << r.leak_level << '\n';
  }
  if (!out) throw std::runtime_error("failed writing dataset file: " + path);
}

TrainingDataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset file is empty: " + path);
  int cols = 1;
  for (char ch : line) cols += ch == ',';
  const int dims = (cols - 4) / 2;
  if (dims < 0 || cols != 2 * dims + 4)
    throw std::runtime_error("dataset header has an unexpected column count");

  TrainingDataset ds;
  for (int d = 1; d <= dims; ++d) ds.dim_names.push_back("lower_" + std::to_string(d));
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<std::string> parts;
    while (std::getline(ss, tok, ',')) parts.push_back(tok);
    if (static_cast<int>(parts.size()) != cols)
      throw std::runtime_error("dataset line " + std::to_string(lineno) +
                               " has " + std::to_string(parts.size()) + " columns, expected " +
                               std::to_string(cols));
    try {
      TrainingRow r;
      r.hour = std::stoi(parts[0]);
      r.label = std::stoi(parts[1]);
      r.lower.resize(dims);
      r.upper.resize(dims);
      for (int d = 0; d < dims; ++d) r.lower(d) = std::stod(parts[static_cast<size_t>(2 + d)]);
      for (int d = 0; d < dims; ++d)
        r.upper(d) = std::stod(parts[static_cast<size_t>(2 + dims + d)]);
      r.leak_pipe = std::stoi(parts[static_cast<size_t>(2 + 2 * dims)]);
      r.leak_level = std::stod(parts[static_cast<size_t>(3 + 2 * dims)]);
      ds.rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw std::runtime_error("dataset line " + std::to_string(lineno) + " is malformed");
    }
  }
  return ds;
}

namespace {

MisclassificationReport score_rates(const std::vector<Pattern>& patterns,
                                    const std::vector<int>& top_k,
                                    const std::function<Ranked(const Pattern&)>& rank) {
  for (int k : top_k)
    if (k < 1) throw std::runtime_error("top-k entries must be >= 1");
  MisclassificationReport rep;
  rep.top_k = top_k;
  rep.rate.assign(top_k.size(), 0.0);
  std::vector<int> misses(top_k.size(), 0);
  for (const Pattern& p : patterns) {
    if (p.label == 0) continue;
    ++rep.evaluated;
    const Ranked r = rank(p);
    for (size_t ki = 0; ki < top_k.size(); ++ki) {
      bool hit = false;
      const int k = std::min<int>(top_k[ki], static_cast<int>(r.scores.size()));
      for (int j = 0; j < k; ++j) hit = hit || r.scores[static_cast<size_t>(j)].first == p.label;
      if (!hit) ++misses[ki];
    }
  }
  if (rep.evaluated > 0)
    for (size_t ki = 0; ki < top_k.size(); ++ki)
      rep.rate[ki] = static_cast<double>(misses[ki]) / static_cast<double>(rep.evaluated);
  return rep;
}

}  // namespace

MisclassificationReport evaluate_misclassification(const GfmmModel& model,
                                                   const std::vector<Pattern>& patterns,
                                                   const std::vector<int>& top_k) {
  return score_rates(patterns, top_k, [&](const Pattern& p) { return classify(model, p); });
}

MisclassificationReport evaluate_misclassification(const GfmmModel& gate,
                                                   const std::map<int, GfmmModel>& experts,
                                                   const DimensionSplit& split,
                                                   const std::vector<Pattern>& patterns,
                                                   const std::vector<int>& top_k) {
  return score_rates(patterns, top_k, [&](const Pattern& p) {
    return two_level_classify(gate, experts, p, split).result;
  });
}

}  // namespace cotree
