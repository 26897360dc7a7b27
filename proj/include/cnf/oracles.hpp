#ifndef CNF_ORACLES_HPP
#define CNF_ORACLES_HPP

#include <string>

#include "cnf/instance.hpp"

namespace cnf {

struct OracleResult {
  Tour tour;
  bool is_exact = false;
  std::string solver_name;
  double runtime_seconds = 0.0;
};

// Maximum size for the exact dynamic-programming TSP solver.
inline constexpr int kExactTspLimit = 13;

// Globally optimal TSP tour via bitmask dynamic programming. Throws
// SizeLimitError for n > kExactTspLimit.
OracleResult solve_exact_tsp(const VrpInstance& instance);

// Constructive heuristics, deterministic with start node 0 and lowest-index
// tie breaking.
OracleResult nearest_neighbour(const VrpInstance& instance);
OracleResult farthest_insertion(const VrpInstance& instance);

// First-improvement 2-opt passes until no improvement or max_passes. Never
// increases the cost.
Tour two_opt(const VrpInstance& instance, const Tour& tour, int max_passes = 1000);

// Surrogate reference for TSP sizes beyond the exact limit: nearest
// neighbour from every start node, each polished by two_opt, best kept.
OracleResult solve_tsp_reference(const VrpInstance& instance);

// Sweep construction alone: customers ordered by polar angle around the
// depot, split into routes whenever the capacity would overflow.
Tour cvrp_sweep(const VrpInstance& instance);

// Desk-scale CVRP reference: cvrp_sweep, then intra-route 2-opt and
// inter-route relocate until no improvement.
OracleResult solve_cvrp_reference(const VrpInstance& instance);

}  // namespace cnf

#endif
