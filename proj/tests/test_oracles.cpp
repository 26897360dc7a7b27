#include <doctest.h>

#include "cnf/errors.hpp"
#include "cnf/oracles.hpp"
#include "support/brute_force.hpp"

using namespace cnf;

namespace {

VrpInstance square_corners() {
  VrpInstance inst;
  inst.kind = ProblemKind::Tsp;
  inst.coords = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  inst.id = "square";
  return inst;
}

}  // namespace

TEST_CASE("exact solver: squares, pairs and the size limit") {
  CHECK(solve_exact_tsp(square_corners()).tour.cost == doctest::Approx(4.0));

  VrpInstance pair;
  pair.kind = ProblemKind::Tsp;
  pair.coords = {{0.2, 0.2}, {0.8, 0.4}};
  pair.id = "pair";
  CHECK(solve_exact_tsp(pair).tour.cost ==
        doctest::Approx(2.0 * dist(pair.coords[0], pair.coords[1])));
  CHECK(solve_exact_tsp(pair).is_exact);

  const VrpInstance big = gen_uniform(14, 1, 1, ProblemKind::Tsp).instances[0];
  CHECK_THROWS_AS(solve_exact_tsp(big), SizeLimitError);
}

TEST_CASE("exact solver agrees with exhaustive enumeration") {
  for (int n : {5, 6, 7, 8, 9}) {
    const Dataset ds = gen_uniform(n, 20, 1000 + n, ProblemKind::Tsp);
    for (const auto& inst : ds.instances) {
      const OracleResult hk = solve_exact_tsp(inst);
      const Tour bf = testing::brute_force_tsp(inst);
      CHECK(hk.tour.cost == doctest::Approx(bf.cost).epsilon(1e-9));
      CHECK(tour_cost(inst, hk.tour.sequence) == doctest::Approx(hk.tour.cost).epsilon(1e-9));
    }
  }
}

TEST_CASE("nearest neighbour sweeps collinear equally spaced points") {
  VrpInstance line;
  line.kind = ProblemKind::Tsp;
  for (int i = 0; i < 6; ++i) line.coords.push_back({0.1 + 0.15 * i, 0.5});
  line.id = "line";
  const OracleResult nn = nearest_neighbour(line);
  CHECK(nn.tour.sequence == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(nn.tour.cost == doctest::Approx(2.0 * 0.15 * 5));
}

TEST_CASE("farthest insertion solves the unit square") {
  CHECK(farthest_insertion(square_corners()).tour.cost == doctest::Approx(4.0));
}

TEST_CASE("constructive heuristics never beat the exact optimum") {
  for (int n : {6, 8, 10}) {
    const Dataset ds = gen_uniform(n, 20, 31 + n, ProblemKind::Tsp);
    for (const auto& inst : ds.instances) {
      const double opt = n <= 10 ? testing::brute_force_tsp(inst).cost
                                 : solve_exact_tsp(inst).tour.cost;
      CHECK(nearest_neighbour(inst).tour.cost >= opt - 1e-9);
      CHECK(farthest_insertion(inst).tour.cost >= opt - 1e-9);
    }
  }
}

TEST_CASE("two-opt uncrosses and never increases cost") {
  const VrpInstance sq = square_corners();
  const Tour crossing{{0, 2, 1, 3}, tour_cost(sq, {0, 2, 1, 3})};
  const Tour fixed = two_opt(sq, crossing);
  CHECK(fixed.cost == doctest::Approx(4.0));

  const Tour optimal{{0, 1, 2, 3}, 4.0};
  CHECK(two_opt(sq, optimal).sequence == optimal.sequence);

  const Dataset ds = gen_uniform(12, 30, 8, ProblemKind::Tsp);
  for (const auto& inst : ds.instances) {
    const Tour start = nearest_neighbour(inst).tour;
    const Tour improved = two_opt(inst, start);
    CHECK(improved.cost <= start.cost + 1e-12);
    CHECK_NOTHROW(validate_tour(inst, improved.sequence));
  }
}

TEST_CASE("multistart reference matches the exact optimum on most instances") {
  const Dataset ds = gen_uniform(10, 60, 4242, ProblemKind::Tsp);
  int hits = 0;
  for (const auto& inst : ds.instances) {
    const double ref = solve_tsp_reference(inst).tour.cost;
    const double opt = solve_exact_tsp(inst).tour.cost;
    CHECK(ref >= opt - 1e-9);
    if (ref <= opt + 1e-9) ++hits;
  }
  CHECK(hits >= 57);  // 95% of 60
}

TEST_CASE("CVRP reference solver structure") {
  // one customer: out and back
  VrpInstance one;
  one.kind = ProblemKind::Cvrp;
  one.coords = {{0.25, 0.25}};
  one.depot = Point{0.75, 0.75};
  one.demands = std::vector<int>{5};
  one.capacity = 34;
  one.id = "one";
  const OracleResult r1 = solve_cvrp_reference(one);
  CHECK(r1.tour.sequence == std::vector<int>{1, 0, 1});
  CHECK(r1.tour.cost == doctest::Approx(2.0 * dist(one.coords[0], *one.depot)));

  // all demands equal to the capacity: one route per customer
  VrpInstance full = gen_uniform(6, 1, 9, ProblemKind::Cvrp).instances[0];
  full.capacity = 9;
  full.demands = std::vector<int>(6, 9);
  const OracleResult r2 = solve_cvrp_reference(full);
  int depot_visits = 0;
  for (int v : r2.tour.sequence)
    if (v == full.n()) ++depot_visits;
  CHECK(depot_visits == 7);  // 6 routes

  // a single over-capacity demand is infeasible
  VrpInstance bad = full;
  bad.demands = std::vector<int>{1, 2, 3, 4, 5, 99};
  CHECK_THROWS_AS(solve_cvrp_reference(bad), ArgumentError);
  bad.demands = std::vector<int>(6, 9);
  bad.capacity = 8;
  CHECK_THROWS_AS(solve_cvrp_reference(bad), ArgumentError);
}

TEST_CASE("CVRP local search only improves on the sweep construction") {
  const Dataset ds = gen_uniform(20, 40, 77, ProblemKind::Cvrp);
  for (const auto& inst : ds.instances) {
    const Tour sweep = cvrp_sweep(inst);
    const OracleResult improved = solve_cvrp_reference(inst);
    CHECK(improved.tour.cost <= sweep.cost + 1e-9);
    CHECK_NOTHROW(validate_tour(inst, improved.tour.sequence));
  }
}
