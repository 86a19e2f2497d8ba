#pragma once

// Pressurized pipe network model: nodes, pipes, Hazen-Williams relations,
// validation and JSON (de)serialization. Units are SI throughout: flows in
// m^3/s, heads and lengths in m, diameters in m.

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cotree {

inline constexpr const char* kToolVersion = "0.1.0";

enum class NodeKind { Demand, FixedHead };

struct Node {
  int id = 0;                 // external label, unique, >= 1
  NodeKind kind = NodeKind::Demand;
  double demand = 0.0;        // m^3/s, demand nodes (negative = local inflow)
  double head = 0.0;          // m, fixed-head nodes
  double elevation = 0.0;     // m, optional datum information
};

struct Pipe {
  int id = 0;                 // external label, unique, >= 1
  int from = 0;               // node id; positive flow runs from -> to
  int to = 0;
  double C = 100.0;           // Hazen-Williams roughness coefficient
  double length = 0.0;        // m
  double diameter = 0.0;      // m
  double k = 0.0;             // resistance; derived from C/length/diameter
  bool k_override = false;    // resistance supplied directly in the input
  bool fixed_flow = false;    // carries a known constant flow (e.g. a pump)
  double fixed_flow_value = 0.0;  // m^3/s in the from -> to direction
};

struct Network {
  double exponent = 1.852;    // head-loss exponent n
  std::vector<Node> nodes;
  std::vector<Pipe> pipes;

  int node_index(int id) const;   // position in nodes, -1 if absent
  int pipe_index(int id) const;   // position in pipes, -1 if absent
  const Node& node(int id) const;
  const Pipe& pipe(int id) const;

  std::vector<int> fixed_head_nodes() const;  // ids, in node order
  int loop_eligible_pipe_count() const;       // pipes minus fixed-flow pipes

  // Fills in k from C/length/diameter wherever no override was given.
  void compute_resistances();
};

// Pipe resistance k = 10.742 C^-1.85 L D^-4.87 (SI form of Hazen-Williams).
double hazen_williams_resistance(double C, double length, double diameter);

// Signed head loss h = k q |q|^(n-1).
double head_loss(double k, double n, double q);

// Inverse relation q = sign(dh) (|dh| / k)^(1/n); returns 0 for dh = 0.
double flow_from_head_loss(double k, double n, double dh);

struct ValidationReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
  int node_count = 0;
  int fixed_head_count = 0;
  int pipe_count = 0;
  int fixed_flow_count = 0;
  int expected_loops = 0;         // chords of any spanning tree
  int expected_pseudo_loops = 0;  // fixed-head nodes beyond the root
  bool ok() const { return errors.empty(); }
};

// Structural checks: unique ids, resolvable endpoints, positive resistances,
// at least one fixed-head node, connectivity once fixed-flow pipes are
// removed. Never throws; findings are returned as diagnostics.
ValidationReport validate_network(const Network& net);

// JSON round trip. load_network throws std::runtime_error with a message
// naming the offending field on malformed input.
Network load_network(std::istream& in);
Network load_network_file(const std::string& path);
std::string network_to_json(const Network& net);
void save_network_file(const Network& net, const std::string& path);

}  // namespace cotree
