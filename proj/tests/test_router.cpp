#include <doctest.h>

#include <cmath>

#include "cnf/errors.hpp"
#include "cnf/router.hpp"

using namespace cnf;

namespace {

RouterConfig tiny_router_config() {
  RouterConfig cfg;
  cfg.embed_dim = 16;
  return cfg;
}

CostMatrix greedy_cost_stub(int n, int m, uint64_t seed) {
  CostMatrix cm;
  cm.values = Mat(n, m);
  Rng rng(seed);
  for (double& v : cm.values.a) v = rng.uniform(3.0, 6.0);
  return cm;
}

}  // namespace

TEST_CASE("route logits stay inside the clipping range and are row-local") {
  const int n = 12, m = 3;
  const Dataset ds = gen_uniform(10, n, 5, ProblemKind::Tsp);
  const NeuralRouter router = init_router(tiny_router_config(), ProblemKind::Tsp, m, 3);
  const CostMatrix costs = greedy_cost_stub(n, m, 7);
  const Mat p = route_logits(router, ds.instances, costs);

  REQUIRE(p.rows == n);
  REQUIRE(p.cols == m);
  for (double v : p.a) CHECK(std::abs(v) < 10.0);

  // permuting instances permutes rows identically
  std::vector<VrpInstance> shuffled(ds.instances.rbegin(), ds.instances.rend());
  CostMatrix shuffled_costs = costs;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) shuffled_costs.values(i, j) = costs.values(n - 1 - i, j);
  const Mat p2 = route_logits(router, shuffled, shuffled_costs);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) CHECK(p2(i, j) == doctest::Approx(p(n - 1 - i, j)).epsilon(1e-12));

  // duplicating an instance duplicates its logit row exactly
  std::vector<VrpInstance> dup = ds.instances;
  dup.push_back(ds.instances[4]);
  CostMatrix dup_costs = costs;
  dup_costs.values = Mat(n + 1, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) dup_costs.values(i, j) = costs.values(i, j);
  for (int j = 0; j < m; ++j) dup_costs.values(n, j) = costs.values(4, j);
  const Mat p3 = route_logits(router, dup, dup_costs);
  for (int j = 0; j < m; ++j) CHECK(p3(n, j) == p3(4, j));
}

TEST_CASE("CVRP router consumes depot and demand features") {
  const int n = 6, m = 2;
  const Dataset ds = gen_uniform(8, n, 11, ProblemKind::Cvrp);
  const NeuralRouter router = init_router(tiny_router_config(), ProblemKind::Cvrp, m, 9);
  const CostMatrix costs = greedy_cost_stub(n, m, 1);
  const Mat p = route_logits(router, ds.instances, costs);
  REQUIRE(p.rows == n);

  // a demand change must move the logits (the summary features see it)
  std::vector<VrpInstance> tweaked = ds.instances;
  (*tweaked[0].demands)[0] = (*tweaked[0].demands)[0] == 9 ? 1 : 9;
  const Mat p2 = route_logits(router, tweaked, costs);
  bool moved = false;
  for (int j = 0; j < m; ++j) moved = moved || p2(0, j) != p(0, j);
  CHECK(moved);
}

TEST_CASE("softmax orientations normalize the right dimension") {
  Mat logits(4, 2);
  Rng rng(3);
  for (double& v : logits.a) v = rng.uniform(-2.0, 2.0);
  const Mat pi = instance_softmax(logits);
  for (int j = 0; j < 2; ++j) {
    double sum = 0.0;
    for (int i = 0; i < 4; ++i) sum += pi(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  const Mat pm = model_softmax(logits);
  for (int i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 2; ++j) sum += pm(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("selection strategies: worked example, load balancing, tie-breaks") {
  // model-0 logit column [3, 1, 2, 0] -> top-2 = instances {0, 2}
  Mat logits(4, 2);
  logits(0, 0) = 3;
  logits(1, 0) = 1;
  logits(2, 0) = 2;
  logits(3, 0) = 0;
  logits(0, 1) = 0;
  logits(1, 1) = 5;
  logits(2, 1) = 4;
  logits(3, 1) = 1;
  const Assignment a = select(RouteStrategy::MTopK, logits, 2, 0);
  CHECK(a.per_model[0] == std::vector<int>{0, 2});
  CHECK(a.per_model[1] == std::vector<int>{1, 2});

  // exact-k load balancing over random logit matrices
  Rng rng(12);
  for (int trial = 0; trial < 10000; ++trial) {
    Mat l(8, 3);
    for (double& v : l.a) v = rng.uniform(-3.0, 3.0);
    for (RouteStrategy s : {RouteStrategy::MTopK, RouteStrategy::MSample, RouteStrategy::Random}) {
      const Assignment asg = select(s, l, 4, trial);
      for (const auto& list : asg.per_model) {
        REQUIRE(list.size() == 4);
        for (size_t i = 1; i < list.size(); ++i) REQUIRE(list[i - 1] < list[i]);  // distinct
      }
    }
  }

  // ties break toward the lowest instance index
  Mat tie(3, 1, 0.5);
  const Assignment t = select(RouteStrategy::MTopK, tie, 2, 0);
  CHECK(t.per_model[0] == std::vector<int>{0, 1});

  // one dominant model column attracts every instance under I-TopK
  Mat dom(5, 2);
  for (int i = 0; i < 5; ++i) {
    dom(i, 0) = 3.0;
    dom(i, 1) = -3.0;
  }
  const Assignment itk = select(RouteStrategy::ITopK, dom, 1, 0);
  CHECK(itk.per_model[0].size() == 5);
  CHECK(itk.per_model[1].empty());

  // sampling strategies are deterministic given the seed
  const Assignment s1 = select(RouteStrategy::MSample, logits, 2, 42);
  const Assignment s2 = select(RouteStrategy::MSample, logits, 2, 42);
  CHECK(s1.per_model == s2.per_model);

  CHECK_THROWS_AS(select(RouteStrategy::MTopK, logits, 9, 0), ArgumentError);
  CHECK_THROWS_AS(select(RouteStrategy::SelfTrain, logits, 2, 0), ArgumentError);
}

TEST_CASE("selftrain assignment follows the provenance") {
  // X = 2 clean + 2x2 local + 2 global, M = 2
  Mat logits(8, 2);
  BatchProvenance prov;
  prov.owner = {BatchProvenance::kClean, BatchProvenance::kClean, 0, 0, 1, 1,
                BatchProvenance::kGlobal, BatchProvenance::kGlobal};
  const Assignment a = select(RouteStrategy::SelfTrain, logits, 0, 0, &prov);
  CHECK(a.per_model[0] == std::vector<int>{0, 1, 2, 3, 6, 7});
  CHECK(a.per_model[1] == std::vector<int>{0, 1, 4, 5, 6, 7});
}

TEST_CASE("router reward is the collaborative improvement") {
  CostMatrix r, rp;
  r.values = Mat::from({{5, 6}, {7, 4}});
  rp.values = Mat::from({{5, 5}, {6, 5}});
  const auto rewards = router_reward(r, rp);
  CHECK(rewards[0] == doctest::Approx(0.0));
  CHECK(rewards[1] == doctest::Approx(-1.0));

  CHECK(router_reward(r, r) == std::vector<double>{0.0, 0.0});

  CostMatrix shifted_r = r, shifted_rp = rp;
  for (double& v : shifted_r.values.a) v += 2.5;
  for (double& v : shifted_rp.values.a) v += 2.5;
  CHECK(router_reward(shifted_r, shifted_rp) == rewards);

  CostMatrix bad;
  bad.values = Mat(3, 2);
  CHECK_THROWS_AS(router_reward(r, bad), ArgumentError);
}

TEST_CASE("router update: zero rewards leave parameters, positive rewards reinforce") {
  const int n = 10, m = 3;
  const Dataset ds = gen_uniform(8, n, 21, ProblemKind::Tsp);
  NeuralRouter router = init_router(tiny_router_config(), ProblemKind::Tsp, m, 31);
  const CostMatrix costs = greedy_cost_stub(n, m, 2);
  const Mat p = route_logits(router, ds.instances, costs);
  const Assignment asg = select(RouteStrategy::MTopK, p, 4, 0);

  // zero rewards, zero decay: bit-identical parameters
  {
    NeuralRouter r2 = router;
    AdamState opt;
    router_update(r2, ds.instances, costs, asg, std::vector<double>(n, 0.0), opt, 1e-4, 0.0);
    CHECK(r2.params.flatten() == router.params.flatten());
  }

  // a single selected entry with positive reward gains probability
  {
    NeuralRouter r2 = router;
    AdamState opt;
    Assignment single;
    single.strategy = RouteStrategy::MTopK;
    single.per_model.assign(m, {});
    single.per_model[1] = {6};
    std::vector<double> rewards(n, 0.0);
    rewards[6] = 0.8;
    const double before = instance_softmax(p)(6, 1);
    router_update(r2, ds.instances, costs, single, rewards, opt, 1e-4, 0.0);
    const Mat p2 = route_logits(r2, ds.instances, costs);
    const double after = instance_softmax(p2)(6, 1);
    CHECK(after > before);
  }

  // random/selftrain assignments are not functions of the logits
  {
    AdamState opt;
    Assignment random_asg = select(RouteStrategy::Random, p, 4, 1);
    CHECK_THROWS_AS(router_update(router, ds.instances, costs, random_asg,
                                  std::vector<double>(n, 0.1), opt, 1e-4, 0.0),
                    ArgumentError);
  }
}

TEST_CASE("router gradient matches finite differences of the masked surrogate") {
  const int n = 6, m = 2;
  const Dataset ds = gen_uniform(7, n, 4, ProblemKind::Tsp);
  NeuralRouter router = init_router(tiny_router_config(), ProblemKind::Tsp, m, 8);
  const CostMatrix costs = greedy_cost_stub(n, m, 3);
  const Mat p = route_logits(router, ds.instances, costs);
  const Assignment asg = select(RouteStrategy::MTopK, p, 3, 0);
  std::vector<double> rewards(n);
  Rng rng(5);
  for (double& r : rewards) r = rng.uniform(-1.0, 1.0);

  // surrogate value at given flat parameters
  auto surrogate = [&](const std::vector<double>& flat) {
    NeuralRouter probe = router;
    probe.params.unflatten(flat);
    const Mat logits = route_logits(probe, ds.instances, costs);
    const Mat probs = instance_softmax(logits);
    double total = 0.0;
    for (int j = 0; j < m; ++j)
      for (int i : asg.per_model[static_cast<size_t>(j)])
        total += rewards[static_cast<size_t>(i)] * std::log(probs(i, j));
    return total;
  };

  const std::vector<Mat> grads =
      router_update_gradient(router, ds.instances, costs, asg, rewards);
  std::vector<double> flat_grad;
  for (const Mat& g : grads) flat_grad.insert(flat_grad.end(), g.a.begin(), g.a.end());
  const std::vector<double> flat = router.params.flatten();

  Rng pick(17);
  const double eps = 1e-6;
  int checked = 0;
  while (checked < 20) {
    const size_t idx = pick.next_u64() % flat.size();
    if (std::abs(flat_grad[idx]) < 1e-9) continue;
    std::vector<double> up = flat, down = flat;
    up[idx] += eps;
    down[idx] -= eps;
    const double fd = (surrogate(up) - surrogate(down)) / (2.0 * eps);
    CHECK(flat_grad[idx] == doctest::Approx(fd).epsilon(1e-3));
    ++checked;
  }
}
