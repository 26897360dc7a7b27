#include "cnf/oracles.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <numeric>

#include "cnf/errors.hpp"

namespace cnf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::vector<double>> distance_matrix(const std::vector<Point>& pts) {
  const size_t n = pts.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = dist(pts[i], pts[j]);
  return d;
}

void require_tsp(const VrpInstance& instance, const char* op) {
  if (instance.kind != ProblemKind::Tsp)
    throw ArgumentError(std::string(op) + " requires a TSP instance");
}

std::vector<int> nn_from(const std::vector<std::vector<double>>& d, int n, int start) {
  std::vector<char> visited(static_cast<size_t>(n), 0);
  std::vector<int> seq;
  seq.reserve(static_cast<size_t>(n));
  int cur = start;
  visited[static_cast<size_t>(cur)] = 1;
  seq.push_back(cur);
  for (int step = 1; step < n; ++step) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int v = 0; v < n; ++v) {
      if (visited[static_cast<size_t>(v)]) continue;
      if (d[static_cast<size_t>(cur)][static_cast<size_t>(v)] < best_d) {
        best_d = d[static_cast<size_t>(cur)][static_cast<size_t>(v)];
        best = v;
      }
    }
    visited[static_cast<size_t>(best)] = 1;
    seq.push_back(best);
    cur = best;
  }
  return seq;
}

// One first-improvement 2-opt pass over a closed tour; returns true if any
// exchange was applied.
bool two_opt_pass(const std::vector<std::vector<double>>& d, std::vector<int>& seq) {
  const int n = static_cast<int>(seq.size());
  bool improved = false;
  for (int i = 0; i < n - 1; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const int a = seq[static_cast<size_t>(i)];
      const int b = seq[static_cast<size_t>((i + 1) % n)];
      const int c = seq[static_cast<size_t>(j)];
      const int e = seq[static_cast<size_t>((j + 1) % n)];
      if (a == c || b == e || a == e) continue;
      const double delta = d[a][c] + d[b][e] - d[a][b] - d[c][e];
      if (delta < -1e-12) {
        std::reverse(seq.begin() + i + 1, seq.begin() + j + 1);
        improved = true;
      }
    }
  }
  return improved;
}

}  // namespace

OracleResult solve_exact_tsp(const VrpInstance& instance) {
  require_tsp(instance, "solve_exact_tsp");
  const auto start = Clock::now();
  const int n = instance.n();
  if (n > kExactTspLimit)
    throw SizeLimitError("exact TSP solver limited to n <= " + std::to_string(kExactTspLimit) +
                         " (got n = " + std::to_string(n) +
                         "); use the heuristic surrogate solve_tsp_reference");
  const auto d = distance_matrix(instance.coords);

  if (n == 2) {
    Tour tour{{0, 1}, 2.0 * d[0][1]};
    return {tour, true, "held-karp", seconds_since(start)};
  }

  // Held-Karp over subsets of {1..n-1}, anchored at node 0.
  const int m = n - 1;
  const size_t full = size_t{1} << m;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dp(full * static_cast<size_t>(m), inf);
  std::vector<int16_t> parent(full * static_cast<size_t>(m), -1);
  auto at = [m](size_t mask, int last) { return mask * static_cast<size_t>(m) + last; };

  for (int v = 0; v < m; ++v) dp[at(size_t{1} << v, v)] = d[0][static_cast<size_t>(v + 1)];
  for (size_t mask = 1; mask < full; ++mask) {
    for (int last = 0; last < m; ++last) {
      if (!(mask & (size_t{1} << last))) continue;
      const double base = dp[at(mask, last)];
      if (base == inf) continue;
      for (int nxt = 0; nxt < m; ++nxt) {
        if (mask & (size_t{1} << nxt)) continue;
        const size_t nmask = mask | (size_t{1} << nxt);
        const double cand = base + d[static_cast<size_t>(last + 1)][static_cast<size_t>(nxt + 1)];
        if (cand < dp[at(nmask, nxt)]) {
          dp[at(nmask, nxt)] = cand;
          parent[at(nmask, nxt)] = static_cast<int16_t>(last);
        }
      }
    }
  }

  double best = inf;
  int best_last = -1;
  for (int last = 0; last < m; ++last) {
    const double cand = dp[at(full - 1, last)] + d[static_cast<size_t>(last + 1)][0];
    if (cand < best) {
      best = cand;
      best_last = last;
    }
  }

  std::vector<int> seq(static_cast<size_t>(n));
  size_t mask = full - 1;
  int last = best_last;
  for (int pos = n - 1; pos >= 1; --pos) {
    seq[static_cast<size_t>(pos)] = last + 1;
    const int prev = parent[at(mask, last)];
    mask ^= size_t{1} << last;
    last = prev;
  }
  seq[0] = 0;

  Tour tour{seq, best};
  return {tour, true, "held-karp", seconds_since(start)};
}

OracleResult nearest_neighbour(const VrpInstance& instance) {
  require_tsp(instance, "nearest_neighbour");
  const auto start = Clock::now();
  const auto d = distance_matrix(instance.coords);
  std::vector<int> seq = nn_from(d, instance.n(), 0);
  Tour tour{seq, sequence_length(instance, seq, true)};
  return {tour, false, "nearest-neighbour", seconds_since(start)};
}

OracleResult farthest_insertion(const VrpInstance& instance) {
  require_tsp(instance, "farthest_insertion");
  const auto start = Clock::now();
  const int n = instance.n();
  const auto d = distance_matrix(instance.coords);

  std::vector<char> in_tour(static_cast<size_t>(n), 0);
  std::vector<int> seq{0};
  in_tour[0] = 1;
  if (n > 1) {
    int far = 1;
    for (int v = 2; v < n; ++v)
      if (d[0][static_cast<size_t>(v)] > d[0][static_cast<size_t>(far)]) far = v;
    seq.push_back(far);
    in_tour[static_cast<size_t>(far)] = 1;
  }

  // min distance from each outside node to the current tour
  std::vector<double> to_tour(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  for (int v = 0; v < n; ++v)
    if (!in_tour[static_cast<size_t>(v)])
      for (int u : seq) to_tour[static_cast<size_t>(v)] =
          std::min(to_tour[static_cast<size_t>(v)], d[static_cast<size_t>(v)][static_cast<size_t>(u)]);

  while (static_cast<int>(seq.size()) < n) {
    int pick = -1;
    for (int v = 0; v < n; ++v) {
      if (in_tour[static_cast<size_t>(v)]) continue;
      if (pick == -1 || to_tour[static_cast<size_t>(v)] > to_tour[static_cast<size_t>(pick)]) pick = v;
    }
    // cheapest insertion position (earliest position wins ties)
    const int sz = static_cast<int>(seq.size());
    int best_pos = 0;
    double best_inc = std::numeric_limits<double>::infinity();
    for (int i = 0; i < sz; ++i) {
      const int a = seq[static_cast<size_t>(i)];
      const int b = seq[static_cast<size_t>((i + 1) % sz)];
      const double inc = d[static_cast<size_t>(a)][static_cast<size_t>(pick)] +
                         d[static_cast<size_t>(pick)][static_cast<size_t>(b)] -
                         d[static_cast<size_t>(a)][static_cast<size_t>(b)];
      if (inc < best_inc - 1e-15) {
        best_inc = inc;
        best_pos = i;
      }
    }
    seq.insert(seq.begin() + best_pos + 1, pick);
    in_tour[static_cast<size_t>(pick)] = 1;
    for (int v = 0; v < n; ++v)
      if (!in_tour[static_cast<size_t>(v)])
        to_tour[static_cast<size_t>(v)] = std::min(to_tour[static_cast<size_t>(v)],
                                                   d[static_cast<size_t>(v)][static_cast<size_t>(pick)]);
  }

  Tour tour{seq, sequence_length(instance, seq, true)};
  return {tour, false, "farthest-insertion", seconds_since(start)};
}

Tour two_opt(const VrpInstance& instance, const Tour& tour, int max_passes) {
  require_tsp(instance, "two_opt");
  validate_tour(instance, tour.sequence);
  const auto d = distance_matrix(instance.coords);
  std::vector<int> seq = tour.sequence;
  for (int pass = 0; pass < max_passes; ++pass)
    if (!two_opt_pass(d, seq)) break;
  return {seq, sequence_length(instance, seq, true)};
}

OracleResult solve_tsp_reference(const VrpInstance& instance) {
  require_tsp(instance, "solve_tsp_reference");
  const auto start = Clock::now();
  const int n = instance.n();
  const auto d = distance_matrix(instance.coords);
  Tour best;
  best.cost = std::numeric_limits<double>::infinity();
  for (int s = 0; s < n; ++s) {
    std::vector<int> seq = nn_from(d, n, s);
    for (int pass = 0; pass < 1000; ++pass)
      if (!two_opt_pass(d, seq)) break;
    const double cost = sequence_length(instance, seq, true);
    if (cost < best.cost) best = {seq, cost};
  }
  return {best, false, "multistart-nn-2opt", seconds_since(start)};
}

namespace {

std::vector<std::vector<int>> sweep_routes(const VrpInstance& instance) {
  const int n = instance.n();
  const int q = *instance.capacity;
  const auto& demands = *instance.demands;
  for (int v = 0; v < n; ++v)
    if (demands[static_cast<size_t>(v)] > q)
      throw ArgumentError("infeasible instance: demand of customer " + std::to_string(v) +
                          " exceeds capacity");
  const Point depot = *instance.depot;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> angle(static_cast<size_t>(n));
  for (int v = 0; v < n; ++v)
    angle[static_cast<size_t>(v)] =
        std::atan2(instance.coords[static_cast<size_t>(v)].y - depot.y,
                   instance.coords[static_cast<size_t>(v)].x - depot.x);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (angle[static_cast<size_t>(a)] != angle[static_cast<size_t>(b)])
      return angle[static_cast<size_t>(a)] < angle[static_cast<size_t>(b)];
    return a < b;
  });

  std::vector<std::vector<int>> routes;
  std::vector<int> cur;
  int load = 0;
  for (int v : order) {
    if (load + demands[static_cast<size_t>(v)] > q) {
      routes.push_back(cur);
      cur.clear();
      load = 0;
    }
    cur.push_back(v);
    load += demands[static_cast<size_t>(v)];
  }
  if (!cur.empty()) routes.push_back(cur);
  return routes;
}

Tour routes_to_tour(const VrpInstance& instance, const std::vector<std::vector<int>>& routes) {
  std::vector<int> seq{instance.n()};
  for (const auto& r : routes) {
    if (r.empty()) continue;
    for (int v : r) seq.push_back(v);
    seq.push_back(instance.n());
  }
  Tour tour{seq, 0.0};
  tour.cost = tour_cost(instance, seq);
  return tour;
}

}  // namespace

Tour cvrp_sweep(const VrpInstance& instance) {
  if (instance.kind != ProblemKind::Cvrp)
    throw ArgumentError("cvrp_sweep requires a CVRP instance");
  instance.validate();
  return routes_to_tour(instance, sweep_routes(instance));
}

OracleResult solve_cvrp_reference(const VrpInstance& instance) {
  if (instance.kind != ProblemKind::Cvrp)
    throw ArgumentError("solve_cvrp_reference requires a CVRP instance");
  instance.validate();
  const auto start = Clock::now();
  const int n = instance.n();
  const int q = *instance.capacity;
  const auto& demands = *instance.demands;
  const Point depot = *instance.depot;
  std::vector<std::vector<int>> routes = sweep_routes(instance);

  auto route_cost = [&](const std::vector<int>& r) {
    if (r.empty()) return 0.0;
    double c = dist(depot, instance.coords[static_cast<size_t>(r.front())]);
    for (size_t i = 0; i + 1 < r.size(); ++i)
      c += dist(instance.coords[static_cast<size_t>(r[i])],
                instance.coords[static_cast<size_t>(r[i + 1])]);
    c += dist(instance.coords[static_cast<size_t>(r.back())], depot);
    return c;
  };
  auto route_load = [&](const std::vector<int>& r) {
    int l = 0;
    for (int v : r) l += demands[static_cast<size_t>(v)];
    return l;
  };

  // intra-route 2-opt on the open depot-to-depot path
  auto improve_route = [&](std::vector<int>& r) {
    bool any = true;
    while (any) {
      any = false;
      const int sz = static_cast<int>(r.size());
      for (int i = 0; i < sz - 1 && !any; ++i)
        for (int j = i + 1; j < sz && !any; ++j) {
          std::vector<int> cand = r;
          std::reverse(cand.begin() + i, cand.begin() + j + 1);
          if (route_cost(cand) < route_cost(r) - 1e-12) {
            r = std::move(cand);
            any = true;
          }
        }
    }
  };

  for (auto& r : routes) improve_route(r);

  // inter-route relocate until no improvement, re-polishing routes after
  // every round of successful moves
  bool moved = true;
  while (moved) {
    moved = false;
    for (size_t ra = 0; ra < routes.size() && !moved; ++ra) {
      for (size_t i = 0; i < routes[ra].size() && !moved; ++i) {
        const int v = routes[ra][i];
        for (size_t rb = 0; rb < routes.size() && !moved; ++rb) {
          if (ra == rb) continue;
          if (route_load(routes[rb]) + demands[static_cast<size_t>(v)] > q) continue;
          const double before = route_cost(routes[ra]) + route_cost(routes[rb]);
          std::vector<int> a = routes[ra];
          a.erase(a.begin() + static_cast<long>(i));
          for (size_t pos = 0; pos <= routes[rb].size() && !moved; ++pos) {
            std::vector<int> b = routes[rb];
            b.insert(b.begin() + static_cast<long>(pos), v);
            if (route_cost(a) + route_cost(b) < before - 1e-12) {
              routes[ra] = a;
              routes[rb] = b;
              moved = true;
            }
          }
        }
      }
    }
    if (moved)
      for (auto& r : routes) improve_route(r);
  }
  routes.erase(std::remove_if(routes.begin(), routes.end(),
                              [](const std::vector<int>& r) { return r.empty(); }),
               routes.end());
  (void)n;
  return {routes_to_tour(instance, routes), false, "sweep+local-search", seconds_since(start)};
}

}  // namespace cnf
