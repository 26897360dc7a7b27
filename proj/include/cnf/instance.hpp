#ifndef CNF_INSTANCE_HPP
#define CNF_INSTANCE_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnf/rng.hpp"

namespace cnf {

enum class ProblemKind { Tsp, Cvrp };

std::string to_string(ProblemKind k);
ProblemKind problem_kind_from_string(const std::string& s);

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point& a, const Point& b) { return a.x == b.x && a.y == b.y; }
};

inline double dist(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

// One routing problem instance. Coordinates live in the unit square; CVRP
// instances additionally carry a depot, integer demands in {1..9} and a
// vehicle capacity. In tours the depot is addressed by index n (customers
// are 0..n-1, matching coords).
struct VrpInstance {
  ProblemKind kind = ProblemKind::Tsp;
  std::vector<Point> coords;
  std::optional<Point> depot;
  std::optional<std::vector<int>> demands;
  std::optional<int> capacity;
  std::string id;
  // Original coordinate span for instances normalized at load time (TSPLIB).
  // Annotation only: not persisted and not part of equality.
  double source_scale = 1.0;

  int n() const { return static_cast<int>(coords.size()); }
  int depot_index() const { return n(); }

  // Position of a tour index: customers 0..n-1, depot n (CVRP).
  Point position(int idx) const;

  void validate() const;  // throws ArgumentError on any violated invariant
  bool is_valid() const;

  friend bool operator==(const VrpInstance& a, const VrpInstance& b) {
    return a.kind == b.kind && a.coords == b.coords && a.depot == b.depot &&
           a.demands == b.demands && a.capacity == b.capacity && a.id == b.id;
  }
};

// A feasible visiting sequence with its cached cost. TSP: a permutation of
// 0..n-1, cost includes the closing edge. CVRP: explicit depot visits (index
// n), sequence starts and ends at the depot.
struct Tour {
  std::vector<int> sequence;
  double cost = 0.0;
};

struct DatasetMeta {
  std::string generator;
  uint64_t seed = 0;
  int n = 0;
  std::string distribution;
};

struct Dataset {
  std::vector<VrpInstance> instances;
  DatasetMeta meta;

  size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
};

// Vehicle capacity for generated CVRP instances of size n.
inline int capacity_for(int n) { return 30 + (n + 4) / 5; }

// ---- generators -----------------------------------------------------------

Dataset gen_uniform(int n, int count, uint64_t seed, ProblemKind kind);
Dataset gen_rotation(int n, int count, uint64_t seed);
Dataset gen_explosion(int n, int count, uint64_t seed);

// Mutation primitives behind gen_rotation / gen_explosion, exposed separately
// so their geometry can be tested without going through seed plumbing. Both
// return raw (unprojected) coordinates.
std::vector<Point> rotate_subset(const std::vector<Point>& coords,
                                 const std::vector<bool>& subset, double angle);
std::vector<Point> explode(const std::vector<Point>& coords, const Point& center, Rng& rng,
                           double radius = 0.3, double displacement_mean = 0.1);

// ---- projections ----------------------------------------------------------

// Joint min-max normalization into the unit square. Returns the input
// unchanged when it already lies in [0,1]^2; otherwise rescales all
// coordinate entries by the shared min/max (a similarity transform, so it
// preserves relative geometry). Idempotent. Throws DegenerateInstanceError
// when all entries are identical.
std::vector<Point> project_coords(const std::vector<Point>& coords);

// Min-max normalization of real-valued demands into {1..9}: the minimum maps
// to 1, the maximum to 9. A constant input maps to its rounded value clamped
// into the domain.
std::vector<int> project_demands(const std::vector<double>& raw);

// ---- cost / gap -----------------------------------------------------------

// Throws FeasibilityError naming the first violated constraint.
void validate_tour(const VrpInstance& instance, const std::vector<int>& sequence);

// Euclidean length of a feasible tour (validates first).
double tour_cost(const VrpInstance& instance, const std::vector<int>& sequence);
inline double tour_cost(const VrpInstance& instance, const Tour& tour) {
  return tour_cost(instance, tour.sequence);
}

// Length without feasibility checks, for inner loops that construct
// sequences known to be feasible. `closed` adds the edge back to the first
// node (TSP convention).
double sequence_length(const VrpInstance& instance, const std::vector<int>& sequence,
                       bool closed);

// Optimality gap in percent. ref_cost must be positive.
double opt_gap(double cost, double ref_cost);

// The eight dihedral symmetries of the unit square applied to an instance;
// element 0 is the identity.
std::array<VrpInstance, 8> augment_x8(const VrpInstance& instance);
Point apply_dihedral(const Point& p, int which);

// ---- persistence ----------------------------------------------------------

// JSON-lines dataset files: one instance per line, floats with 17
// significant digits so round-trips are bit-exact.
void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

std::string instance_to_json(const VrpInstance& instance);
VrpInstance instance_from_json(const std::string& line, int line_number = 0);

// TSPLIB reader (EUC_2D node coordinates only). Coordinates are normalized
// into the unit square at load; the original span is kept in source_scale.
VrpInstance read_tsplib(const std::string& path);

}  // namespace cnf

#endif
