#include "cotree/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cotree {

using nlohmann::json;

int Network::node_index(int id) const {
  for (size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].id == id) return static_cast<int>(i);
  return -1;
}

int Network::pipe_index(int id) const {
  for (size_t i = 0; i < pipes.size(); ++i)
    if (pipes[i].id == id) return static_cast<int>(i);
  return -1;
}

const Node& Network::node(int id) const {
  int i = node_index(id);
  if (i < 0) throw std::runtime_error("unknown node id " + std::to_string(id));
  return nodes[i];
}

const Pipe& Network::pipe(int id) const {
  int i = pipe_index(id);
  if (i < 0) throw std::runtime_error("unknown pipe id " + std::to_string(id));
  return pipes[i];
}

std::vector<int> Network::fixed_head_nodes() const {
  std::vector<int> out;
  for (const auto& nd : nodes)
    if (nd.kind == NodeKind::FixedHead) out.push_back(nd.id);
  return out;
}

int Network::loop_eligible_pipe_count() const {
  int c = 0;
  for (const auto& p : pipes)
    if (!p.fixed_flow) ++c;
  return c;
}

void Network::compute_resistances() {
  for (auto& p : pipes)
    if (!p.k_override)
      p.k = hazen_williams_resistance(p.C, p.length, p.diameter);
}

double hazen_williams_resistance(double C, double length, double diameter) {
  return 10.742 * std::pow(C, -1.85) * length * std::pow(diameter, -4.87);
}

double head_loss(double k, double n, double q) {
  return k * q * std::pow(std::abs(q), n - 1.0);
}

double flow_from_head_loss(double k, double n, double dh) {
  if (dh == 0.0) return 0.0;
  return std::copysign(std::pow(std::abs(dh) / k, 1.0 / n), dh);
}

ValidationReport validate_network(const Network& net) {
  ValidationReport rep;
  rep.node_count = static_cast<int>(net.nodes.size());
  rep.pipe_count = static_cast<int>(net.pipes.size());

  if (!(net.exponent > 1.0))
    rep.errors.push_back("exponent must exceed 1, got " + std::to_string(net.exponent));

  std::set<int> node_ids;
  for (const auto& nd : net.nodes) {
    if (!node_ids.insert(nd.id).second)
      rep.errors.push_back("duplicate node id " + std::to_string(nd.id));
    if (nd.kind == NodeKind::FixedHead) ++rep.fixed_head_count;
    if (nd.kind == NodeKind::Demand && nd.demand < 0.0)
      rep.warnings.push_back("node " + std::to_string(nd.id) +
                             " has negative demand (treated as local inflow)");
  }
  if (rep.fixed_head_count == 0)
    rep.errors.push_back("network has no fixed-head node");

  std::set<int> pipe_ids;
  for (const auto& p : net.pipes) {
    const std::string tag = "pipe " + std::to_string(p.id);
    if (!pipe_ids.insert(p.id).second)
      rep.errors.push_back("duplicate pipe id " + std::to_string(p.id));
    if (p.from == p.to)
      rep.errors.push_back(tag + " is a self-loop");
    if (!node_ids.count(p.from))
      rep.errors.push_back(tag + " references unknown node " + std::to_string(p.from));
    if (!node_ids.count(p.to))
      rep.errors.push_back(tag + " references unknown node " + std::to_string(p.to));
    if (p.fixed_flow) {
      ++rep.fixed_flow_count;
    } else if (p.k_override) {
      if (!(p.k > 0.0)) rep.errors.push_back(tag + " has non-positive resistance");
    } else {
      if (!(p.C > 0.0)) rep.errors.push_back(tag + " has non-positive C");
      if (!(p.length > 0.0)) rep.errors.push_back(tag + " has non-positive length");
      if (!(p.diameter > 0.0)) rep.errors.push_back(tag + " has non-positive diameter");
    }
  }

  // Connectivity over regular pipes only: fixed-flow pipes are boundary
  // conditions, not part of the spanning tree or any loop.
  if (rep.errors.empty() && !net.nodes.empty()) {
    std::map<int, std::vector<int>> adj;
    for (const auto& p : net.pipes) {
      if (p.fixed_flow) continue;
      adj[p.from].push_back(p.to);
      adj[p.to].push_back(p.from);
    }
    std::set<int> seen;
    std::queue<int> q;
    q.push(net.nodes.front().id);
    seen.insert(net.nodes.front().id);
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (int v : adj[u])
        if (seen.insert(v).second) q.push(v);
    }
    if (seen.size() != node_ids.size()) {
      std::ostringstream os;
      os << "network is disconnected once fixed-flow pipes are removed; unreachable nodes:";
      for (int id : node_ids)
        if (!seen.count(id)) os << ' ' << id;
      rep.errors.push_back(os.str());
    }
  }

  int regular = rep.pipe_count - rep.fixed_flow_count;
  rep.expected_loops = std::max(0, regular - rep.node_count + 1);
  rep.expected_pseudo_loops = std::max(0, rep.fixed_head_count - 1);
  return rep;
}

namespace {

double require_number(const json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_number())
    throw std::runtime_error("missing or non-numeric \"" + key + "\" in " + ctx);
  return j[key].get<double>();
}

}  // namespace

Network load_network(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("invalid JSON: ") + e.what());
  }
  Network net;
  net.exponent = j.value("exponent", 1.852);
  if (!j.contains("nodes") || !j["nodes"].is_array())
    throw std::runtime_error("missing \"nodes\" array");
  if (!j.contains("pipes") || !j["pipes"].is_array())
    throw std::runtime_error("missing \"pipes\" array");

  for (const auto& jn : j["nodes"]) {
    Node nd;
    nd.id = static_cast<int>(require_number(jn, "id", "node"));
    const std::string ctx = "node " + std::to_string(nd.id);
    std::string kind = jn.value("kind", "demand");
    if (kind == "demand") {
      nd.kind = NodeKind::Demand;
      nd.demand = jn.value("demand_m3s", 0.0);
    } else if (kind == "fixed_head") {
      nd.kind = NodeKind::FixedHead;
      nd.head = require_number(jn, "head_m", ctx);
    } else {
      throw std::runtime_error("unknown node kind \"" + kind + "\" in " + ctx);
    }
    nd.elevation = jn.value("elevation_m", 0.0);
    net.nodes.push_back(nd);
  }

  for (const auto& jp : j["pipes"]) {
    Pipe p;
    p.id = static_cast<int>(require_number(jp, "id", "pipe"));
    const std::string ctx = "pipe " + std::to_string(p.id);
    p.from = static_cast<int>(require_number(jp, "from", ctx));
    p.to = static_cast<int>(require_number(jp, "to", ctx));
    if (jp.contains("fixed_flow_m3s")) {
      p.fixed_flow = true;
      p.fixed_flow_value = jp["fixed_flow_m3s"].get<double>();
    }
    if (jp.contains("k")) {
      p.k = jp["k"].get<double>();
      p.k_override = true;
    }
    p.C = jp.value("C", 100.0);
    p.length = jp.value("length_m", 0.0);
    p.diameter = jp.value("diameter_m", 0.0);
    if (!p.fixed_flow && !p.k_override) {
      require_number(jp, "C", ctx);
      require_number(jp, "length_m", ctx);
      require_number(jp, "diameter_m", ctx);
    }
    net.pipes.push_back(p);
  }
  net.compute_resistances();
  return net;
}

Network load_network_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open network file: " + path);
  return load_network(in);
}

std::string network_to_json(const Network& net) {
  json j;
  j["exponent"] = net.exponent;
  j["nodes"] = json::array();
  for (const auto& nd : net.nodes) {
    json jn;
    jn["id"] = nd.id;
    if (nd.kind == NodeKind::Demand) {
      jn["kind"] = "demand";
      jn["demand_m3s"] = nd.demand;
    } else {
      jn["kind"] = "fixed_head";
      jn["head_m"] = nd.head;
    }
    if (nd.elevation != 0.0) jn["elevation_m"] = nd.elevation;
    j["nodes"].push_back(jn);
  }
  j["pipes"] = json::array();
  for (const auto& p : net.pipes) {
    json jp;
    jp["id"] = p.id;
    jp["from"] = p.from;
    jp["to"] = p.to;
    if (p.fixed_flow) {
      jp["fixed_flow_m3s"] = p.fixed_flow_value;
    }
    if (p.k_override) {
      jp["k"] = p.k;
    } else if (!p.fixed_flow) {
      jp["C"] = p.C;
      jp["length_m"] = p.length;
      jp["diameter_m"] = p.diameter;
    }
    j["pipes"].push_back(jp);
  }
  return j.dump(2);
}

void save_network_file(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write network file: " + path);
  out << network_to_json(net) << '\n';
}

}  // namespace cotree
