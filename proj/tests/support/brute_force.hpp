#ifndef CNF_TESTS_BRUTE_FORCE_HPP
#define CNF_TESTS_BRUTE_FORCE_HPP

#include <algorithm>
#include <numeric>
#include <vector>

#include "cnf/instance.hpp"

namespace cnf::testing {

// Exhaustive TSP oracle: enumerates every permutation with node 0 fixed
// first. Independent of the production solvers; keep it dumb.
inline Tour brute_force_tsp(const VrpInstance& instance) {
  const int n = instance.n();
  std::vector<int> rest(static_cast<size_t>(n - 1));
  std::iota(rest.begin(), rest.end(), 1);
  std::vector<int> best;
  double best_cost = 1e300;
  std::vector<int> seq(static_cast<size_t>(n));
  seq[0] = 0;
  do {
    std::copy(rest.begin(), rest.end(), seq.begin() + 1);
    double cost = 0.0;
    for (int i = 0; i + 1 < n; ++i)
      cost += dist(instance.coords[static_cast<size_t>(seq[static_cast<size_t>(i)])],
                   instance.coords[static_cast<size_t>(seq[static_cast<size_t>(i + 1)])]);
    cost += dist(instance.coords[static_cast<size_t>(seq[static_cast<size_t>(n - 1)])],
                 instance.coords[0]);
    if (cost < best_cost) {
      best_cost = cost;
      best = seq;
    }
  } while (std::next_permutation(rest.begin(), rest.end()));
  return {best, best_cost};
}

}  // namespace cnf::testing

#endif
