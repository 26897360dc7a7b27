#include <doctest.h>

#include <cmath>

#include "cnf/errors.hpp"
#include "cnf/policy.hpp"

using namespace cnf;

namespace {

PolicyConfig tiny_config(int h = 32, int layers = 1) {
  PolicyConfig cfg;
  cfg.embed_dim = h;
  cfg.encoder_layers = layers;
  cfg.heads = 4;
  return cfg;
}

}  // namespace

TEST_CASE("policy init is deterministic in the seed") {
  const PolicyConfig cfg = tiny_config();
  const PolicySolver a = init_policy(cfg, ProblemKind::Tsp, 5);
  const PolicySolver b = init_policy(cfg, ProblemKind::Tsp, 5);
  const PolicySolver c = init_policy(cfg, ProblemKind::Tsp, 6);
  CHECK(a.parameters_flat() == b.parameters_flat());
  CHECK(a.parameters_flat() != c.parameters_flat());

  PolicyConfig bad = cfg;
  bad.heads = 5;  // 32 % 5 != 0
  CHECK_THROWS_AS(init_policy(bad, ProblemKind::Tsp, 1), ArgumentError);
}

TEST_CASE("parameter count matches the layer-shape formula for h=64, L=3") {
  PolicyConfig cfg;
  cfg.embed_dim = 64;
  cfg.encoder_layers = 3;
  cfg.heads = 8;
  const PolicySolver p = init_policy(cfg, ProblemKind::Tsp, 1);
  const int h = 64, f = 4 * 64;
  const size_t embed = 2 * h + h;
  const size_t per_layer = 4 * h * h /*qkvo*/ + 2 * (h + h) /*norm affine*/ +
                           (h * f + f) + (f * h + h) /*feedforward*/;
  const size_t decoder = (3 * h) * h /*context*/ + 3 * h * h /*glimpse+logit keys*/;
  CHECK(p.params.total_size() == embed + 3 * per_layer + decoder);
}

TEST_CASE("two-node TSP has a forced tour with zero log-probability") {
  VrpInstance pair;
  pair.kind = ProblemKind::Tsp;
  pair.coords = {{0.1, 0.2}, {0.9, 0.8}};
  pair.id = "pair";
  const PolicySolver p = init_policy(tiny_config(), ProblemKind::Tsp, 3);
  for (RolloutMode mode : {RolloutMode::Greedy, RolloutMode::Sample}) {
    const RolloutResult rr = rollout(p, {pair}, mode, false, 7);
    REQUIRE(rr.tours[0].size() == 1);
    CHECK(rr.tours[0][0].sequence == std::vector<int>{0, 1});
    CHECK(rr.log_probs[0][0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(rr.costs[0][0] ==
          doctest::Approx(2.0 * dist(pair.coords[0], pair.coords[1])));
  }
}

TEST_CASE("greedy rollout is deterministic; multistart only helps") {
  const Dataset ds = gen_uniform(9, 4, 21, ProblemKind::Tsp);
  const PolicySolver p = init_policy(tiny_config(), ProblemKind::Tsp, 11);

  const RolloutResult g1 = rollout(p, ds.instances, RolloutMode::Greedy, true);
  const RolloutResult g2 = rollout(p, ds.instances, RolloutMode::Greedy, true);
  const RolloutResult single = rollout(p, ds.instances, RolloutMode::Greedy, false);
  for (size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(g1.tours[i].size() == 9);
    double best = 1e300;
    for (size_t k = 0; k < g1.tours[i].size(); ++k) {
      CHECK(g1.tours[i][k].sequence == g2.tours[i][k].sequence);
      best = std::min(best, g1.costs[i][k]);
    }
    CHECK(best <= single.costs[i][0] + 1e-12);
    // multistart decodes one tour per forced first node
    for (size_t k = 0; k < 9; ++k) CHECK(g1.tours[i][k].sequence[0] == static_cast<int>(k));
  }
}

TEST_CASE("sampled rollouts are feasible and log-probabilities are non-positive") {
  const PolicySolver pt = init_policy(tiny_config(16, 1), ProblemKind::Tsp, 2);
  const PolicySolver pc = init_policy(tiny_config(16, 1), ProblemKind::Cvrp, 2);
  const Dataset dt = gen_uniform(7, 40, 33, ProblemKind::Tsp);
  const Dataset dc = gen_uniform(7, 40, 34, ProblemKind::Cvrp);

  const RolloutResult rt = rollout(pt, dt.instances, RolloutMode::Sample, true, 5);
  const RolloutResult rc = rollout(pc, dc.instances, RolloutMode::Sample, true, 5);
  for (const auto& per_inst : {rt, rc})
    for (size_t i = 0; i < per_inst.tours.size(); ++i)
      for (size_t k = 0; k < per_inst.tours[i].size(); ++k)
        CHECK(per_inst.log_probs[i][k] <= 1e-9);
  // tour_cost inside rollout already validates feasibility; reaching here
  // without a FeasibilityError is the property being tested
  CHECK(rt.tours.size() == dt.size());
  CHECK(rc.tours.size() == dc.size());

  // sample mode is reproducible given the seed
  const RolloutResult rt2 = rollout(pt, dt.instances, RolloutMode::Sample, true, 5);
  for (size_t i = 0; i < rt.tours.size(); ++i)
    for (size_t k = 0; k < rt.tours[i].size(); ++k)
      CHECK(rt.tours[i][k].sequence == rt2.tours[i][k].sequence);
}

TEST_CASE("encoder is permutation-equivariant") {
  const PolicySolver p = init_policy(tiny_config(), ProblemKind::Tsp, 9);
  const VrpInstance inst = gen_uniform(10, 1, 77, ProblemKind::Tsp).instances[0];
  const std::vector<int> perm = {4, 7, 0, 9, 2, 5, 8, 1, 6, 3};  // old index -> new index
  VrpInstance shuffled = inst;
  for (int old = 0; old < 10; ++old)
    shuffled.coords[static_cast<size_t>(perm[static_cast<size_t>(old)])] =
        inst.coords[static_cast<size_t>(old)];

  const Mat emb = encode_instance(p, inst);
  const Mat emb_shuffled = encode_instance(p, shuffled);
  for (int old = 0; old < 10; ++old)
    for (int c = 0; c < emb.cols; ++c)
      CHECK(emb_shuffled(perm[static_cast<size_t>(old)], c) ==
            doctest::Approx(emb(old, c)).epsilon(1e-5));

  // hence the best multistart greedy cost is relabeling-invariant
  const RolloutResult a = rollout(p, {inst}, RolloutMode::Greedy, true);
  const RolloutResult b = rollout(p, {shuffled}, RolloutMode::Greedy, true);
  const auto best = [](const std::vector<double>& v) {
    double m = 1e300;
    for (double x : v) m = std::min(m, x);
    return m;
  };
  CHECK(best(a.costs[0]) == doctest::Approx(best(b.costs[0])).epsilon(1e-6));
}

TEST_CASE("equal multistart costs contribute a zero gradient") {
  // equilateral triangle: every tour is the same cycle
  VrpInstance tri;
  tri.kind = ProblemKind::Tsp;
  tri.coords = {{0.5, 0.9}, {0.5 - 0.4 * std::sqrt(3.0) / 2.0, 0.3},
                {0.5 + 0.4 * std::sqrt(3.0) / 2.0, 0.3}};
  tri.id = "triangle";
  const PolicySolver p = init_policy(tiny_config(16, 1), ProblemKind::Tsp, 4);
  const RolloutResult rr = rollout(p, {tri}, RolloutMode::Sample, true, 3);
  const std::vector<Mat> grads = reinforce_gradient(p, {tri}, rr);
  for (const Mat& g : grads)
    for (double x : g.a) CHECK(x == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
}

TEST_CASE("rollout/gradient version and mode guards") {
  const Dataset ds = gen_uniform(6, 2, 3, ProblemKind::Tsp);
  PolicySolver p = init_policy(tiny_config(16, 1), ProblemKind::Tsp, 4);
  const RolloutResult greedy = rollout(p, ds.instances, RolloutMode::Greedy, true);
  CHECK_THROWS_AS(reinforce_gradient(p, ds.instances, greedy), ArgumentError);

  RolloutResult sampled = rollout(p, ds.instances, RolloutMode::Sample, true, 1);
  AdamState opt;
  train_step(p, ds.instances, opt, {}, nullptr, 99);
  CHECK_THROWS_AS(reinforce_gradient(p, ds.instances, sampled), ArgumentError);
}

TEST_CASE("REINFORCE gradient matches finite differences of the surrogate") {
  const VrpInstance inst = gen_uniform(6, 1, 8, ProblemKind::Tsp).instances[0];
  const PolicySolver p = init_policy(tiny_config(16, 1), ProblemKind::Tsp, 12);
  const RolloutResult rr = rollout(p, {inst}, RolloutMode::Sample, true, 21);
  const std::vector<Mat> grads = reinforce_gradient(p, {inst}, rr);

  // frozen surrogate: sum_k w_k log p(tau_k), tours and advantages fixed
  const auto& costs = rr.costs[0];
  const int K = static_cast<int>(costs.size());
  double baseline = 0.0;
  for (double c : costs) baseline += c;
  baseline /= K;
  std::vector<std::vector<int>> seqs;
  for (const Tour& t : rr.tours[0]) seqs.push_back(t.sequence);
  std::vector<double> w(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) w[static_cast<size_t>(k)] = (costs[static_cast<size_t>(k)] - baseline) / K;

  std::vector<double> flat = p.parameters_flat();
  std::vector<double> flat_grad;
  for (const Mat& g : grads) flat_grad.insert(flat_grad.end(), g.a.begin(), g.a.end());

  Rng rng(5);
  const double eps = 1e-5;
  int checked = 0;
  while (checked < 20) {
    const size_t k = rng.next_u64() % flat.size();
    if (std::abs(flat_grad[k]) < 1e-7) continue;  // relative comparison needs signal
    PolicySolver probe = p;
    std::vector<double> fp = flat;
    fp[k] += eps;
    probe.set_parameters_flat(fp);
    const double up = weighted_logp(probe, inst, seqs, w, nullptr);
    fp[k] = flat[k] - eps;
    probe.set_parameters_flat(fp);
    const double down = weighted_logp(probe, inst, seqs, w, nullptr);
    const double fd = (up - down) / (2.0 * eps);
    CHECK(flat_grad[k] == doctest::Approx(fd).epsilon(1e-3));
    ++checked;
  }
}

TEST_CASE("train_step updates parameters; zero learning rate does not") {
  const Dataset ds = gen_uniform(8, 8, 13, ProblemKind::Tsp);
  PolicySolver p = init_policy(tiny_config(16, 1), ProblemKind::Tsp, 31);
  const std::vector<double> before = p.parameters_flat();

  PolicySolver frozen = p;
  AdamState opt_frozen;
  train_step(frozen, ds.instances, opt_frozen, {0.0, 0.0}, nullptr, 5);
  CHECK(frozen.parameters_flat() == before);
  CHECK(frozen.version == p.version + 1);

  PolicySolver decay_only = p;
  AdamState opt_decay;
  train_step(decay_only, ds.instances, opt_decay, {0.0, 1e-6}, nullptr, 5);
  const std::vector<double> after_decay = decay_only.parameters_flat();
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(after_decay[i] == doctest::Approx(before[i] * (1.0 - 1e-6)).epsilon(1e-12));

  AdamState opt;
  PolicySolver trained = p;
  train_step(trained, ds.instances, opt, {}, nullptr, 5);
  CHECK(trained.parameters_flat() != before);
}

TEST_CASE("training reduces cost on a small fixed dataset") {
  const Dataset ds = gen_uniform(8, 16, 71, ProblemKind::Tsp);
  PolicySolver p = init_policy(tiny_config(32, 1), ProblemKind::Tsp, 17);
  AdamState opt;

  auto mean_greedy = [&]() {
    const RolloutResult rr = rollout(p, ds.instances, RolloutMode::Greedy, true);
    double total = 0.0;
    for (const auto& cs : rr.costs) {
      double best = 1e300;
      for (double c : cs) best = std::min(best, c);
      total += best;
    }
    return total / static_cast<double>(ds.size());
  };

  const double before = mean_greedy();
  for (int step = 0; step < 120; ++step)
    train_step(p, ds.instances, opt, {3e-4, 1e-6}, nullptr, 1000 + static_cast<uint64_t>(step));
  const double after = mean_greedy();
  CHECK(after < before);
}

TEST_CASE("CVRP rollouts respect capacity and depot rules") {
  const Dataset ds = gen_uniform(8, 10, 55, ProblemKind::Cvrp);
  const PolicySolver p = init_policy(tiny_config(16, 1), ProblemKind::Cvrp, 6);
  const RolloutResult rr = rollout(p, ds.instances, RolloutMode::Sample, true, 8);
  for (size_t i = 0; i < ds.size(); ++i) {
    REQUIRE(rr.tours[i].size() == 8);  // one per first customer
    for (size_t k = 0; k < rr.tours[i].size(); ++k) {
      const auto& seq = rr.tours[i][k].sequence;
      CHECK(seq.front() == ds.instances[i].n());
      CHECK(seq.back() == ds.instances[i].n());
      CHECK(seq[1] == static_cast<int>(k));
      for (size_t j = 1; j < seq.size(); ++j) CHECK_FALSE((seq[j] == 8 && seq[j - 1] == 8));
    }
  }
}
