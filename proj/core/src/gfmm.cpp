#include "cotree/gfmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cotree {

namespace {

using json = nlohmann::json;

void check_pattern(const Pattern& p, int dims, size_t at) {
  auto fail = [&](const std::string& why) {
    throw std::runtime_error("pattern " + std::to_string(at) + ": " + why);
  };
  if (p.lower.size() != dims || p.upper.size() != dims)
    fail("dimension mismatch, expected " + std::to_string(dims));
  for (int i = 0; i < dims; ++i) {
    if (p.lower(i) < 0.0 || p.upper(i) > 1.0)
      fail("component " + std::to_string(i) + " outside [0,1]");
    if (p.lower(i) > p.upper(i))
      fail("lower bound above upper bound in component " + std::to_string(i));
  }
  if (p.label < 0) fail("negative class label");
}

// Largest per-dimension extent the box would reach after absorbing the
// pattern; the expansion test compares it with the epoch's cap.
double expanded_size(const Hyperbox& box, const Pattern& p) {
  double worst = 0.0;
  for (int i = 0; i < box.V.size(); ++i)
    worst = std::max(worst, std::max(box.W(i), p.upper(i)) - std::min(box.V(i), p.lower(i)));
  return worst;
}

void resolve_overlaps(std::vector<Hyperbox>& boxes, size_t changed) {
  Hyperbox& a = boxes[changed];
  if (a.cls == 0) return;
  for (size_t k = 0; k < boxes.size(); ++k) {
    if (k == changed) continue;
    Hyperbox& b = boxes[k];
    if (b.cls == 0 || b.cls == a.cls) continue;
    while (contract_overlap(a, b)) {
    }
  }
}

// One presentation pass over the patterns with a fixed size cap.
std::vector<Hyperbox> epoch_pass(const std::vector<Pattern>& patterns,
                                 const Eigen::VectorXd& gamma, double theta) {
  std::vector<Hyperbox> boxes;
  for (const Pattern& p : patterns) {
    std::vector<std::pair<double, size_t>> cand;
    for (size_t i = 0; i < boxes.size(); ++i)
      if (p.label == 0 || boxes[i].cls == 0 || boxes[i].cls == p.label)
        cand.push_back({membership(boxes[i], p, gamma), i});
    std::sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) {
      if (x.first != y.first) return x.first > y.first;
      return x.second < y.second;
    });

    // A pattern already inside a box of its own class (or any box, when
    // unlabeled) needs no work at all.
    bool placed = false;
    for (const auto& [m, i] : cand)
      if (m == 1.0 && (p.label == 0 || boxes[i].cls == p.label)) placed = true;

    for (size_t c = 0; !placed && c < cand.size(); ++c) {
      const auto& [m, i] = cand[c];
      Hyperbox& box = boxes[i];
      if (m == 1.0) {
        // Inside an unlabeled host: labeling it is the only change.
        box.cls = p.label;
        resolve_overlaps(boxes, i);
        placed = true;
      } else if (expanded_size(box, p) <= theta) {
        box.absorb(p);
        if (box.cls == 0) box.cls = p.label;
        resolve_overlaps(boxes, i);
        placed = true;
      }
    }
    if (!placed) {
      Hyperbox box = Hyperbox::fresh(static_cast<int>(p.lower.size()));
      box.absorb(p);
      box.cls = p.label;
      boxes.push_back(box);
      resolve_overlaps(boxes, boxes.size() - 1);
    }
  }
  return boxes;
}

std::vector<int> labeled_classes(const std::vector<Hyperbox>& boxes) {
  std::vector<int> ids;
  for (const Hyperbox& b : boxes)
    if (b.cls != 0 && std::find(ids.begin(), ids.end(), b.cls) == ids.end())
      ids.push_back(b.cls);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Ranked rank_boxes(const std::vector<Hyperbox>& boxes, const std::vector<int>& class_ids,
                  const Eigen::VectorXd& gamma, const Pattern& p) {
  Ranked out;
  for (int id : class_ids) {
    double best = 0.0;
    for (const Hyperbox& b : boxes)
      if (b.cls == id) best = std::max(best, membership(b, p, gamma));
    out.scores.push_back({id, best});
  }
  std::sort(out.scores.begin(), out.scores.end(), [](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second > y.second;
    return x.first < y.first;
  });
  out.ambiguous = out.scores.size() >= 2 && out.scores[0].second == out.scores[1].second;
  return out;
}

int count_misclassified(const std::vector<Hyperbox>& boxes, const Eigen::VectorXd& gamma,
                        const std::vector<Pattern>& patterns) {
  const std::vector<int> ids = labeled_classes(boxes);
  int wrong = 0;
  for (const Pattern& p : patterns) {
    if (p.label == 0) continue;
    if (ids.empty()) {
      ++wrong;
      continue;
    }
    Ranked r = rank_boxes(boxes, ids, gamma, p);
    if (r.top() != p.label) ++wrong;
  }
  return wrong;
}

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vec_from_json(const json& a, const std::string& what) {
  if (!a.is_array()) throw std::runtime_error("model json: " + what + " must be an array");
  Eigen::VectorXd v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v(static_cast<int>(i)) = a[i].get<double>();
  return v;
}

}  // namespace

Hyperbox Hyperbox::fresh(int dims) {
  Hyperbox b;
  b.V = Eigen::VectorXd::Ones(dims);
  b.W = Eigen::VectorXd::Zero(dims);
  return b;
}

void Hyperbox::absorb(const Pattern& p) {
  V = V.cwiseMin(p.lower);
  W = W.cwiseMax(p.upper);
}

Eigen::MatrixXd GfmmModel::u_matrix() const {
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(boxes.size(), class_ids.size() + 1);
  for (size_t i = 0; i < boxes.size(); ++i) {
    if (boxes[i].cls == 0) {
      U(static_cast<int>(i), 0) = 1.0;
      continue;
    }
    auto it = std::find(class_ids.begin(), class_ids.end(), boxes[i].cls);
    U(static_cast<int>(i), 1 + static_cast<int>(it - class_ids.begin())) = 1.0;
  }
  return U;
}

double ramp(double d, double gamma) {
  const double s = d * gamma;
  if (s > 1.0) return 1.0;
  if (s < 0.0) return 0.0;
  return s;
}

double membership(const Hyperbox& box, const Pattern& p, const Eigen::VectorXd& gamma) {
  if (box.V.size() != p.lower.size() || gamma.size() != p.lower.size())
    throw std::runtime_error("membership: dimension mismatch");
  double value = 1.0;
  for (int i = 0; i < box.V.size(); ++i) {
    const double over = 1.0 - ramp(p.upper(i) - box.W(i), gamma(i));
    const double under = 1.0 - ramp(box.V(i) - p.lower(i), gamma(i));
    value = std::min(value, std::min(over, under));
  }
  return value;
}

bool contract_overlap(Hyperbox& a, Hyperbox& b) {
  const int dims = static_cast<int>(a.V.size());
  int dim = -1;
  double smallest = std::numeric_limits<double>::infinity();
  for (int i = 0; i < dims; ++i) {
    const double d = std::min(a.W(i), b.W(i)) - std::max(a.V(i), b.V(i));
    if (d <= 0.0) return false;  // a shared face is not interior overlap
    if (d < smallest) {
      smallest = d;
      dim = i;
    }
  }

  const double va = a.V(dim), wa = a.W(dim);
  const double vb = b.V(dim), wb = b.W(dim);
  if (va <= vb && wa <= wb) {
    const double mid = 0.5 * (wa + vb);
    a.W(dim) = mid;
    b.V(dim) = mid;
  } else if (vb <= va && wb <= wa) {
    const double mid = 0.5 * (va + wb);
    a.V(dim) = mid;
    b.W(dim) = mid;
  } else if (va <= vb && wb <= wa) {
    // b sits inside a: push the a-face that loses less span
    if (wb - va < wa - vb)
      a.V(dim) = wb;
    else
      a.W(dim) = vb;
  } else {
    if (wb - va < wa - vb)
      b.W(dim) = va;
    else
      b.V(dim) = wa;
  }
  return true;
}

GfmmModel train(const std::vector<Pattern>& patterns, const GfmmOptions& opts) {
  if (patterns.empty()) throw std::runtime_error("train: no patterns");
  if (opts.theta_start <= 0.0 || opts.theta_min <= 0.0 || opts.theta_min > opts.theta_start)
    throw std::runtime_error("train: size cap schedule must satisfy 0 < theta_min <= theta_start");
  if (opts.theta_decay <= 0.0 || opts.theta_decay >= 1.0)
    throw std::runtime_error("train: theta_decay must lie in (0,1)");

  const int dims = static_cast<int>(patterns[0].lower.size());
  for (size_t i = 0; i < patterns.size(); ++i) check_pattern(patterns[i], dims, i);

  GfmmModel model;
  model.dims = dims;
  if (opts.gamma_per_dim.size() > 0) {
    if (opts.gamma_per_dim.size() != dims)
      throw std::runtime_error("train: gamma_per_dim length mismatch");
    model.gamma = opts.gamma_per_dim;
  } else {
    model.gamma = Eigen::VectorXd::Constant(dims, opts.gamma);
  }

  double theta = opts.theta_start;
  while (true) {
    model.boxes = epoch_pass(patterns, model.gamma, theta);
    model.report.theta_history.push_back(theta);
    model.report.theta_final = theta;
    ++model.report.epochs;
    model.report.misclassified = count_misclassified(model.boxes, model.gamma, patterns);
    if (model.report.misclassified == 0) {
      model.report.clean = true;
      break;
    }
    const double next = theta * opts.theta_decay;
    if (next < opts.theta_min) break;
    theta = next;
  }

  model.class_ids = labeled_classes(model.boxes);
  for (int id : model.class_ids) {
    auto it = opts.class_names.find(id);
    model.class_names[id] = it != opts.class_names.end() ? it->second
                                                         : "class-" + std::to_string(id);
  }
  return model;
}

Ranked classify(const GfmmModel& model, const Pattern& p) {
  if (model.class_ids.empty())
    throw std::runtime_error("classify: model has no labeled hyperboxes");
  check_pattern(p, model.dims, 0);
  return rank_boxes(model.boxes, model.class_ids, model.gamma, p);
}

Pattern subpattern(const Pattern& p, const std::vector<int>& dims) {
  Pattern out;
  out.label = p.label;
  out.lower.resize(static_cast<int>(dims.size()));
  out.upper.resize(static_cast<int>(dims.size()));
  for (size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 0 || dims[i] >= p.lower.size())
      throw std::runtime_error("subpattern: dimension index out of range");
    out.lower(static_cast<int>(i)) = p.lower(dims[i]);
    out.upper(static_cast<int>(i)) = p.upper(dims[i]);
  }
  return out;
}

TwoLevelResult two_level_classify(const GfmmModel& level1,
                                  const std::map<int, GfmmModel>& experts,
                                  const Pattern& p, const DimensionSplit& split) {
  TwoLevelResult out;
  Ranked gate = classify(level1, subpattern(p, split.level1));
  out.expert = gate.top();
  out.expert_tie = gate.ambiguous;
  auto it = experts.find(out.expert);
  if (it == experts.end())
    throw std::runtime_error("two_level_classify: no expert configured for class " +
                             std::to_string(out.expert));
  out.result = classify(it->second, subpattern(p, split.level2));
  return out;
}

std::string gfmm_to_json(const GfmmModel& model) {
  json j;
  j["dims"] = model.dims;
  j["gamma"] = vec_to_json(model.gamma);
  j["boxes"] = json::array();
  for (const Hyperbox& b : model.boxes)
    j["boxes"].push_back({{"v", vec_to_json(b.V)}, {"w", vec_to_json(b.W)}, {"class", b.cls}});
  const Eigen::MatrixXd U = model.u_matrix();
  j["u"] = json::array();
  for (int r = 0; r < U.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < U.cols(); ++c) row.push_back(U(r, c));
    j["u"].push_back(row);
  }
  j["class_ids"] = model.class_ids;
  json names = json::object();
  for (const auto& [id, name] : model.class_names) names[std::to_string(id)] = name;
  j["class_names"] = names;
  j["theta_history"] = model.report.theta_history;
  j["theta_final"] = model.report.theta_final;
  j["epochs"] = model.report.epochs;
  j["misclassified"] = model.report.misclassified;
  j["clean"] = model.report.clean;
  return j.dump(2);
}

GfmmModel gfmm_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("model json: ") + e.what());
  }
  GfmmModel model;
  try {
    model.dims = j.at("dims").get<int>();
    model.gamma = vec_from_json(j.at("gamma"), "gamma");
    for (const json& bj : j.at("boxes")) {
      Hyperbox b;
      b.V = vec_from_json(bj.at("v"), "box v");
      b.W = vec_from_json(bj.at("w"), "box w");
      b.cls = bj.at("class").get<int>();
      if (b.V.size() != model.dims || b.W.size() != model.dims)
        throw std::runtime_error("model json: box dimension mismatch");
      model.boxes.push_back(b);
    }
    model.class_ids = j.at("class_ids").get<std::vector<int>>();
    for (const auto& [key, value] : j.at("class_names").items())
      model.class_names[std::stoi(key)] = value.get<std::string>();
    model.report.theta_history = j.at("theta_history").get<std::vector<double>>();
    model.report.theta_final = j.at("theta_final").get<double>();
    model.report.epochs = j.at("epochs").get<int>();
    model.report.misclassified = j.at("misclassified").get<int>();
    model.report.clean = j.at("clean").get<bool>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("model json: ") + e.what());
  }
  if (model.gamma.size() != model.dims)
    throw std::runtime_error("model json: gamma length mismatch");
  return model;
}

void save_gfmm_file(const GfmmModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << gfmm_to_json(model) << "\n";
}

GfmmModel load_gfmm_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return gfmm_from_json(ss.str());
}

}  // namespace cotree
