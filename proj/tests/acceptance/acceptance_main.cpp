// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Trained models, attack sets and evaluation results are cached
// under the work directory (CNF_ACCEPT_DIR, default ./acceptance_work), so
// re-runs only redo what is missing.
//
// Budget knobs (environment):
//   CNF_ACCEPT_DIR        work directory
//   CNF_ACCEPT_PRETRAIN   pretraining instance budget   (default 300000)
//   CNF_ACCEPT_BUDGET     per-method instance budget    (default 12000)
//   CNF_ACCEPT_EVAL       evaluation set size           (default 256)
//   CNF_ACCEPT_SEEDS      seeds per multi-seed criterion (default 3)

#include <cinttypes>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnf/errors.hpp"
#include "cnf/eval.hpp"
#include "cnf/trainer.hpp"
#include "../support/brute_force.hpp"

using namespace cnf;
namespace fs = std::filesystem;

namespace {

int64_t env_i64(const char* name, int64_t fallback) {
  const char* v = std::getenv(name);
  return v ? std::atoll(v) : fallback;
}

std::string work_dir() {
  const char* v = std::getenv("CNF_ACCEPT_DIR");
  return v ? v : "acceptance_work";
}

struct Summary {
  int failures = 0;
  void line(int criterion, bool pass, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

// ---- shared artifacts -------------------------------------------------------

PolicyConfig desk_policy() {
  PolicyConfig cfg;
  cfg.embed_dim = 64;
  cfg.encoder_layers = 3;
  cfg.heads = 8;
  cfg.multistart = true;
  return cfg;
}

TrainConfig base_config() {
  TrainConfig c;
  c.kind = ProblemKind::Tsp;
  c.n = 20;
  c.policy = desk_policy();
  c.router.embed_dim = 64;
  c.lr = 1e-4;
  c.weight_decay = 1e-6;
  return c;
}

// Run (or reuse) a training job; the checkpoint lands in <work>/<name>.
TrainerState get_or_train(const std::string& name, TrainMethod method,
                          const PolicySolver* warm, TrainConfig config) {
  const fs::path dir = fs::path(work_dir()) / name;
  const fs::path ck = dir / "final.ck";
  if (fs::exists(ck)) return checkpoint_load(ck.string());
  std::fprintf(stderr, "[acceptance] training %s (%" PRId64 " instances)...\n", name.c_str(),
               config.total_instances);
  config.out_dir = dir.string();
  TrainerState state = make_trainer_state(method, warm, config);
  run_training(state);
  return state;
}

struct GapPair {
  double clean = 0.0;
  double fixed_adv = 0.0;
};

// Cached collaborative evaluation (multistart greedy, x8 augmentation).
double cached_gap(const Ensemble& ensemble, const Dataset& dataset,
                  const ReferenceCosts& refs) {
  const fs::path dir = fs::path(work_dir()) / "evals";
  fs::create_directories(dir);
  const fs::path key =
      dir / (ensemble_param_hash(ensemble) + "_" + dataset_content_hash(dataset) + ".json");
  if (fs::exists(key)) {
    std::ifstream in(key);
    nlohmann::json j;
    in >> j;
    return j.at("mean_gap").get<double>();
  }
  const EvalReport report = eval_collaborative(ensemble, dataset, {true, true}, refs);
  std::ofstream out(key);
  out << nlohmann::json{{"mean_gap", report.mean_gap}, {"std_gap", report.std_gap}}.dump()
      << "\n";
  return report.mean_gap;
}

ReferenceCosts cached_references(const Dataset& dataset) {
  const fs::path dir = fs::path(work_dir()) / "refs";
  fs::create_directories(dir);
  const fs::path key = dir / (dataset_content_hash(dataset) + ".json");
  ReferenceCosts refs;
  refs.dataset_hash = dataset_content_hash(dataset);
  if (fs::exists(key)) {
    std::ifstream in(key);
    nlohmann::json j;
    in >> j;
    refs.solver_name = j.at("solver").get<std::string>();
    for (const auto& [id, cost] : j.at("costs").items()) refs.by_id[id] = cost.get<double>();
    return refs;
  }
  refs = compute_references(dataset);
  nlohmann::json j;
  j["solver"] = refs.solver_name;
  j["costs"] = nlohmann::json::object();
  for (const auto& [id, cost] : refs.by_id) j["costs"][id] = cost;
  std::ofstream out(key);
  out << j.dump() << "\n";
  return refs;
}

}  // namespace

int main() {
  const int64_t pretrain_budget = env_i64("CNF_ACCEPT_PRETRAIN", 300000);
  const int64_t method_budget = env_i64("CNF_ACCEPT_BUDGET", 12000);
  const int eval_count = static_cast<int>(env_i64("CNF_ACCEPT_EVAL", 256));
  const int seeds = static_cast<int>(env_i64("CNF_ACCEPT_SEEDS", 3));
  fs::create_directories(work_dir());
  Summary summary;

  // ---- shared artifacts: pretrained model, clean + fixed-adv eval sets ----
  // run names carry their budgets so cached checkpoints are never reused
  // across budget changes
  const std::string pre_tag = "_p" + std::to_string(pretrain_budget);
  const std::string budget_tag = "_b" + std::to_string(method_budget);
  TrainConfig pre_cfg = base_config();
  pre_cfg.total_instances = pretrain_budget;
  pre_cfg.batch_size = 64;
  pre_cfg.lr = 3e-4;  // the short pretraining budget needs a faster rate than
                      // the production default to reach a converged baseline
  pre_cfg.seed = 1;
  const TrainerState pre_state =
      get_or_train("pretrain" + pre_tag, TrainMethod::Pretrain, nullptr, pre_cfg);
  const PolicySolver& pretrained = pre_state.ensemble.models.front();
  Ensemble pretrained_ensemble;
  pretrained_ensemble.models = {pretrained};

  Dataset clean_set = gen_uniform(20, eval_count, 424242, ProblemKind::Tsp);
  const ReferenceCosts clean_refs = cached_references(clean_set);

  AttackConfig fixed_cfg;
  fixed_cfg.steps = 8;  // 8-step attack, alpha sampled uniformly from 1..100
  fixed_cfg.seed = 24;
  const fs::path fixed_path = fs::path(work_dir()) / ("fixed_adv" + pre_tag + ".jsonl");
  Dataset fixed_set;
  if (fs::exists(fixed_path)) {
    fixed_set = read_dataset(fixed_path.string());
  } else {
    const FixedAdvResult built = build_fixed_adv(clean_set, pretrained, fixed_cfg);
    fixed_set = built.dataset;
    write_dataset(fixed_path.string(), fixed_set);
    std::ofstream prov(fixed_path.string() + ".provenance.json");
    prov << built.provenance_json << "\n";
  }
  fixed_set.meta.distribution = "fixed-adv";
  const ReferenceCosts fixed_refs = cached_references(fixed_set);
  const std::string fixed_hash = dataset_content_hash(fixed_set);

  // ---- criterion 1: vulnerability of the pretrained model ----
  double pre_clean = 0.0, pre_fixed = 0.0;
  {
    pre_clean = cached_gap(pretrained_ensemble, clean_set, clean_refs);
    pre_fixed = cached_gap(pretrained_ensemble, fixed_set, fixed_refs);
    const bool pass = pre_fixed >= 3.0 * pre_clean;
    summary.line(1, pass,
                 fmt("pretrained clean gap %.3f%%, attacked gap %.3f%% (need >= 3x; ratio %.1f)",
                     pre_clean, pre_fixed, pre_fixed / std::max(pre_clean, 1e-9)));
  }

  // ---- multi-seed training runs (criteria 2, 3, 5, 9) ----
  auto method_config = [&](uint64_t seed, int models, RouteStrategy strategy,
                           TrainMethod method) {
    TrainConfig c = base_config();
    c.total_instances = method_budget;
    c.batch_size = 16;
    c.models = models;
    c.attack_steps = 1;
    c.strategy = strategy;
    c.seed = seed;
    (void)method;
    return c;
  };

  std::vector<GapPair> at1(static_cast<size_t>(seeds)), at3(static_cast<size_t>(seeds)),
      cnf3(static_cast<size_t>(seeds)), rnd3(static_cast<size_t>(seeds)),
      self3(static_cast<size_t>(seeds));
  std::vector<std::string> cnf_dirs;

  for (int s = 0; s < seeds; ++s) {
    const uint64_t seed = 11 + static_cast<uint64_t>(s);
    const std::string tag = pre_tag + budget_tag + "_s" + std::to_string(seed);

    const TrainerState a1 = get_or_train(
        "at1" + tag, TrainMethod::VanillaAT, &pretrained,
        method_config(seed, 1, RouteStrategy::MTopK, TrainMethod::VanillaAT));
    at1[static_cast<size_t>(s)] = {cached_gap(a1.ensemble, clean_set, clean_refs),
                                   cached_gap(a1.ensemble, fixed_set, fixed_refs)};

    const TrainerState a3 = get_or_train(
        "at3" + tag, TrainMethod::VanillaAT, &pretrained,
        method_config(seed, 3, RouteStrategy::MTopK, TrainMethod::VanillaAT));
    at3[static_cast<size_t>(s)] = {cached_gap(a3.ensemble, clean_set, clean_refs),
                                   cached_gap(a3.ensemble, fixed_set, fixed_refs)};

    const TrainerState c3 =
        get_or_train("cnf3" + tag, TrainMethod::CNF, &pretrained,
                     method_config(seed, 3, RouteStrategy::MTopK, TrainMethod::CNF));
    cnf3[static_cast<size_t>(s)] = {cached_gap(c3.ensemble, clean_set, clean_refs),
                                    cached_gap(c3.ensemble, fixed_set, fixed_refs)};
    cnf_dirs.push_back((fs::path(work_dir()) / ("cnf3" + tag)).string());

    const TrainerState r3 =
        get_or_train("cnfrandom" + tag, TrainMethod::CNF, &pretrained,
                     method_config(seed, 3, RouteStrategy::Random, TrainMethod::CNF));
    rnd3[static_cast<size_t>(s)] = {cached_gap(r3.ensemble, clean_set, clean_refs),
                                    cached_gap(r3.ensemble, fixed_set, fixed_refs)};

    const TrainerState t3 =
        get_or_train("cnfself" + tag, TrainMethod::CNF, &pretrained,
                     method_config(seed, 3, RouteStrategy::SelfTrain, TrainMethod::CNF));
    self3[static_cast<size_t>(s)] = {cached_gap(t3.ensemble, clean_set, clean_refs),
                                     cached_gap(t3.ensemble, fixed_set, fixed_refs)};
  }

  // ---- criterion 2: the vanilla-AT trade-off ----
  {
    int majority = 0;
    std::ostringstream detail;
    for (int s = 0; s < seeds; ++s) {
      const bool clean_worse = at1[static_cast<size_t>(s)].clean > pre_clean;
      const double ratio = pre_fixed / std::max(at1[static_cast<size_t>(s)].fixed_adv, 1e-9);
      const bool robust = ratio >= 5.0;
      if (clean_worse && robust) ++majority;
      detail << fmt("[seed %d: clean %.3f%% vs pre %.3f%%, fixed-adv %.3f%% ratio %.1fx] ",
                    11 + s, at1[static_cast<size_t>(s)].clean, pre_clean,
                    at1[static_cast<size_t>(s)].fixed_adv, ratio);
    }
    const bool pass = 2 * majority > seeds;
    summary.line(2, pass, fmt("AT(1) trade-off holds in %d/%d seeds %s", majority, seeds,
                              detail.str().c_str()));
  }

  // ---- criterion 3: collaborative training vs vanilla AT ----
  {
    int ok_both = 0, strict = 0;
    std::ostringstream detail;
    for (int s = 0; s < seeds; ++s) {
      const GapPair& c = cnf3[static_cast<size_t>(s)];
      const GapPair& a = at3[static_cast<size_t>(s)];
      const bool within = c.clean <= a.clean + 0.1 && c.fixed_adv <= a.fixed_adv + 0.1;
      const bool strictly_better = c.clean < a.clean || c.fixed_adv < a.fixed_adv;
      if (within) ++ok_both;
      if (within && strictly_better) ++strict;
      detail << fmt("[seed %d: cnf %.3f/%.3f vs at %.3f/%.3f] ", 11 + s, c.clean, c.fixed_adv,
                    a.clean, a.fixed_adv);
    }
    const bool pass = ok_both == seeds && strict >= (2 * seeds + 2) / 3;
    summary.line(3, pass,
                 fmt("CNF(3) within +0.1pp of AT(3) in %d/%d seeds, strictly better in %d %s",
                     ok_both, seeds, strict, detail.str().c_str()));
  }

  // ---- criterion 4: insertion soundness ----
  {
    int certified = 0, matches = 0, trials = 0;
    uint64_t attempt_seed = 7000;
    Rng size_rng(99);
    while (certified < 200 && trials < 2000) {
      ++trials;
      const int n = 5 + static_cast<int>(size_rng.next_u64() % 4);  // 5..8
      const VrpInstance inst =
          gen_uniform(n, 1, attempt_seed++, ProblemKind::Tsp).instances[0];
      const OracleResult exact = solve_exact_tsp(inst);
      const auto res = insertion_attack(nullptr, inst, exact.tour, 10, attempt_seed);
      if (!res) continue;
      ++certified;
      const Tour bf = testing::brute_force_tsp(res->instance);
      if (std::abs(res->tour.cost - bf.cost) <= 1e-9 * std::max(1.0, bf.cost)) ++matches;
    }
    const bool pass = certified == 200 && matches == 200;
    summary.line(4, pass, fmt("%d/%d certified insertions match the brute-force optimum "
                              "(%d instances tried)",
                              matches, certified, trials));
  }

  // ---- criterion 5: load balancing across the full CNF runs ----
  {
    int64_t rows = 0, violations = 0;
    for (const std::string& dir : cnf_dirs) {
      std::ifstream in(dir + "/metrics.csv");
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++rows;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        for (int j = 0; j < 3; ++j)
          if (cells.at(5 + static_cast<size_t>(j)) != "16") ++violations;
      }
    }
    const bool pass = rows > 0 && violations == 0;
    summary.line(5, pass,
                 fmt("%" PRId64 " outer steps audited across %zu runs, %" PRId64
                     " load-balancing violations",
                     rows, cnf_dirs.size(), violations));
  }

  // ---- criterion 6: gradient correctness ----
  {
    // (a) REINFORCE estimator vs exact enumeration on n = 4
    PolicyConfig small = desk_policy();
    small.embed_dim = 32;
    small.encoder_layers = 1;
    small.heads = 4;
    const PolicySolver policy = init_policy(small, ProblemKind::Tsp, 5);
    const VrpInstance inst = gen_uniform(4, 1, 31, ProblemKind::Tsp).instances[0];

    // exact expectation of the multistart estimator:
    // (1 - 1/n)/n * sum over starts and tours of p(tau) c(tau) dlogp(tau)
    std::vector<Mat> exact = zeros_like(policy.params);
    const int n = 4;
    for (int start = 0; start < n; ++start) {
      std::vector<int> rest;
      for (int v = 0; v < n; ++v)
        if (v != start) rest.push_back(v);
      std::sort(rest.begin(), rest.end());
      do {
        std::vector<int> seq{start};
        seq.insert(seq.end(), rest.begin(), rest.end());
        const double logp = weighted_logp(policy, inst, {seq}, {1.0}, nullptr);
        const double p = std::exp(logp);
        const double cost = tour_cost(inst, seq);
        std::vector<Mat> g = zeros_like(policy.params);
        weighted_logp(policy, inst, {seq}, {1.0}, &g);
        const double w = (1.0 - 1.0 / n) / n * p * cost;
        for (size_t t = 0; t < g.size(); ++t) axpy(w, g[t], exact[t]);
      } while (std::next_permutation(rest.begin(), rest.end()));
    }

    const int samples = 10000;
    std::vector<double> exact_flat;
    for (const Mat& g : exact) exact_flat.insert(exact_flat.end(), g.a.begin(), g.a.end());
    // accumulate mean and variance on 20 probe coordinates with signal
    std::vector<size_t> probes;
    {
      Rng pick(3);
      while (probes.size() < 20) {
        const size_t idx = pick.next_u64() % exact_flat.size();
        if (std::abs(exact_flat[idx]) > 1e-4) probes.push_back(idx);
      }
    }
    std::vector<double> mean(probes.size(), 0.0), m2(probes.size(), 0.0);
    for (int s = 0; s < samples; ++s) {
      const RolloutResult rr =
          rollout(policy, {inst}, RolloutMode::Sample, true, 100000 + static_cast<uint64_t>(s));
      const std::vector<Mat> g = reinforce_gradient(policy, {inst}, rr);
      std::vector<double> flat;
      for (const Mat& t : g) flat.insert(flat.end(), t.a.begin(), t.a.end());
      for (size_t p = 0; p < probes.size(); ++p) {
        const double x = flat[probes[p]];
        const double delta = x - mean[p];
        mean[p] += delta / (s + 1);
        m2[p] += delta * (x - mean[p]);
      }
    }
    int within = 0;
    double worst_z = 0.0;
    for (size_t p = 0; p < probes.size(); ++p) {
      const double se = std::sqrt(m2[p] / (samples - 1) / samples);
      const double z = std::abs(mean[p] - exact_flat[probes[p]]) / std::max(se, 1e-300);
      worst_z = std::max(worst_z, z);
      if (z <= 3.0) ++within;
    }
    const bool pass_a = within == static_cast<int>(probes.size());

    // (b) hardness input-gradient and router gradient vs finite differences
    const VrpInstance hinst = gen_uniform(10, 1, 77, ProblemKind::Tsp).instances[0];
    const HardnessEval he = hardness_eval(policy, hinst);
    Rng pick(9);
    int h_ok = 0;
    for (int probe = 0; probe < 20; ++probe) {
      const int i = static_cast<int>(pick.next_u64() % 10);
      const int axis = static_cast<int>(pick.next_u64() % 2);
      const double eps = 1e-6;
      VrpInstance up = hinst, down = hinst;
      (axis == 0 ? up.coords[static_cast<size_t>(i)].x
                 : up.coords[static_cast<size_t>(i)].y) += eps;
      (axis == 0 ? down.coords[static_cast<size_t>(i)].x
                 : down.coords[static_cast<size_t>(i)].y) -= eps;
      const double fd =
          (hardness_value_fixed(policy, up, he.greedy_sequence, he.baseline_sequences) -
           hardness_value_fixed(policy, down, he.greedy_sequence, he.baseline_sequences)) /
          (2.0 * eps);
      const double got = he.coord_grad(i, axis);
      if (std::abs(got - fd) <= 1e-3 * std::max({std::abs(got), std::abs(fd), 1e-6})) ++h_ok;
    }

    const int rn = 8, rm = 3;
    const Dataset rds = gen_uniform(10, rn, 3, ProblemKind::Tsp);
    NeuralRouter router = init_router({32, 10.0}, ProblemKind::Tsp, rm, 4);
    CostMatrix rcosts;
    rcosts.values = Mat(rn, rm);
    Rng crng(6);
    for (double& v : rcosts.values.a) v = crng.uniform(3.0, 6.0);
    const Mat logits = route_logits(router, rds.instances, rcosts);
    const Assignment asg = select(RouteStrategy::MTopK, logits, 4, 0);
    std::vector<double> rewards(rn);
    for (double& r : rewards) r = crng.uniform(-1.0, 1.0);
    const std::vector<Mat> rgrads =
        router_update_gradient(router, rds.instances, rcosts, asg, rewards);
    std::vector<double> rflat;
    for (const Mat& g : rgrads) rflat.insert(rflat.end(), g.a.begin(), g.a.end());
    const std::vector<double> base = router.params.flatten();
    auto surrogate = [&](const std::vector<double>& flat) {
      NeuralRouter probe_router = router;
      probe_router.params.unflatten(flat);
      const Mat l = route_logits(probe_router, rds.instances, rcosts);
      const Mat probs = instance_softmax(l);
      double total = 0.0;
      for (int j = 0; j < rm; ++j)
        for (int i : asg.per_model[static_cast<size_t>(j)])
          total += rewards[static_cast<size_t>(i)] * std::log(probs(i, j));
      return total;
    };
    int r_ok = 0;
    int checked = 0;
    Rng rpick(11);
    while (checked < 20) {
      const size_t idx = rpick.next_u64() % base.size();
      if (std::abs(rflat[idx]) < 1e-9) continue;
      ++checked;
      const double eps = 1e-6;
      std::vector<double> up = base, down = base;
      up[idx] += eps;
      down[idx] -= eps;
      const double fd = (surrogate(up) - surrogate(down)) / (2.0 * eps);
      if (std::abs(rflat[idx] - fd) <= 1e-3 * std::max({std::abs(rflat[idx]), std::abs(fd), 1e-6}))
        ++r_ok;
    }

    const bool pass = pass_a && h_ok == 20 && r_ok == 20;
    summary.line(6, pass,
                 fmt("REINFORCE estimator within 3 SE on %d/20 probes (worst z %.2f); "
                     "hardness FD %d/20; router FD %d/20",
                     within, worst_z, h_ok, r_ok));
  }

  // ---- criterion 7: projection / validity suite ----
  {
    int64_t failures = 0;
    Rng rng(2025);
    for (int trial = 0; trial < 10000; ++trial) {
      const int n = 2 + static_cast<int>(rng.next_u64() % 15);
      std::vector<Point> coords;
      for (int i = 0; i < n; ++i)
        coords.push_back({rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)});
      try {
        const auto once = project_coords(coords);
        for (const Point& p : once)
          if (p.x < 0.0 || p.x > 1.0 || p.y < 0.0 || p.y > 1.0) ++failures;
        if (!(project_coords(once) == once)) ++failures;
      } catch (const DegenerateInstanceError&) {
      }
      std::vector<double> raw;
      for (int i = 0; i < n; ++i) raw.push_back(rng.uniform(-40.0, 40.0));
      for (int d : project_demands(raw))
        if (d < 1 || d > 9) ++failures;
    }

    PolicyConfig small = desk_policy();
    small.embed_dim = 16;
    small.encoder_layers = 1;
    small.heads = 4;
    const PolicySolver pt = init_policy(small, ProblemKind::Tsp, 1);
    const PolicySolver pc = init_policy(small, ProblemKind::Cvrp, 2);

    // attack outputs remain valid instances
    AttackConfig acfg;
    acfg.steps = 2;
    acfg.perturb_demands = true;
    const Dataset at_t = gen_uniform(8, 500, 5, ProblemKind::Tsp);
    const Dataset at_c = gen_uniform(8, 500, 6, ProblemKind::Cvrp);
    for (size_t i = 0; i < at_t.size(); ++i) {
      acfg.seed = i;
      if (!local_attack(pt, at_t.instances[i], acfg).instance.is_valid()) ++failures;
      if (!local_attack(pc, at_c.instances[i], acfg).instance.is_valid()) ++failures;
    }

    // sampled rollouts always construct feasible tours
    int64_t rollouts_done = 0;
    for (int batch = 0; batch < 25 && failures == 0; ++batch) {
      const Dataset dt = gen_uniform(7, 200, 100 + batch, ProblemKind::Tsp);
      const Dataset dc = gen_uniform(7, 200, 200 + batch, ProblemKind::Cvrp);
      try {
        const RolloutResult rt =
            rollout(pt, dt.instances, RolloutMode::Sample, false, batch);
        const RolloutResult rc =
            rollout(pc, dc.instances, RolloutMode::Sample, false, batch);
        for (size_t i = 0; i < rt.tours.size(); ++i)
          for (const Tour& t : rt.tours[i]) {
            validate_tour(dt.instances[i], t.sequence);
            ++rollouts_done;
          }
        for (size_t i = 0; i < rc.tours.size(); ++i)
          for (const Tour& t : rc.tours[i]) {
            validate_tour(dc.instances[i], t.sequence);
            ++rollouts_done;
          }
      } catch (const FeasibilityError&) {
        ++failures;
      }
    }
    const bool pass = failures == 0 && rollouts_done == 10000;
    summary.line(7, pass,
                 fmt("projections, 1000 attacks and %" PRId64 " rollouts audited; %" PRId64
                     " failures",
                     rollouts_done, failures));
  }

  // ---- criterion 8: oracle agreement ----
  {
    int hk_bad = 0;
    for (int n = 5; n <= 9; ++n) {
      const Dataset ds = gen_uniform(n, 100, 5000 + static_cast<uint64_t>(n), ProblemKind::Tsp);
      for (const auto& inst : ds.instances) {
        const double hk = solve_exact_tsp(inst).tour.cost;
        const double bf = testing::brute_force_tsp(inst).cost;
        if (std::abs(hk - bf) > 1e-9) ++hk_bad;
      }
    }
    const Dataset ds10 = gen_uniform(10, 200, 6000, ProblemKind::Tsp);
    int hits = 0;
    for (const auto& inst : ds10.instances) {
      const double ref = solve_tsp_reference(inst).tour.cost;
      const double opt = solve_exact_tsp(inst).tour.cost;
      if (ref <= opt + 1e-9) ++hits;
    }
    const bool pass = hk_bad == 0 && hits >= 190;
    summary.line(8, pass,
                 fmt("exact solver matched enumeration on 500/500; multistart reference hit "
                     "the optimum on %d/200 (need >= 190)",
                     hits));
  }

  // ---- criterion 9: routing strategy ablation ----
  {
    int wins = 0;
    std::ostringstream detail;
    for (int s = 0; s < seeds; ++s) {
      const double mt = cnf3[static_cast<size_t>(s)].clean + cnf3[static_cast<size_t>(s)].fixed_adv;
      const double rd = rnd3[static_cast<size_t>(s)].clean + rnd3[static_cast<size_t>(s)].fixed_adv;
      const double st = self3[static_cast<size_t>(s)].clean + self3[static_cast<size_t>(s)].fixed_adv;
      if (mt <= rd && mt <= st) ++wins;
      detail << fmt("[seed %d: m-topk %.3f, random %.3f, selftrain %.3f] ", 11 + s, mt, rd, st);
    }
    const bool pass = wins >= (2 * seeds + 2) / 3;
    summary.line(9, pass, fmt("M-TopK no worse on combined gap in %d/%d seeds %s", wins, seeds,
                              detail.str().c_str()));
  }

  // ---- optional: out-of-distribution generalization pattern (info only) ----
  if (env_i64("CNF_ACCEPT_OOD", 0) != 0) {
    const int count = std::max(32, eval_count / 2);
    std::vector<Dataset> suites = {gen_rotation(20, count, 31415),
                                   gen_explosion(20, count, 27182),
                                   gen_uniform(30, count, 16180, ProblemKind::Tsp)};
    const char* names[] = {"rotation@20", "explosion@20", "uniform@30"};
    int seed_wins = 0;
    for (int s = 0; s < seeds; ++s) {
      const std::string tag = pre_tag + budget_tag + "_s" + std::to_string(11 + s);
      const Ensemble cnf_e =
          checkpoint_load((fs::path(work_dir()) / ("cnf3" + tag) / "final.ck").string())
              .ensemble;
      const Ensemble at_e =
          checkpoint_load((fs::path(work_dir()) / ("at3" + tag) / "final.ck").string())
              .ensemble;
      int suite_wins = 0;
      for (size_t q = 0; q < suites.size(); ++q) {
        const ReferenceCosts refs = cached_references(suites[q]);
        const double g_cnf = cached_gap(cnf_e, suites[q], refs);
        const double g_at = cached_gap(at_e, suites[q], refs);
        std::printf("INFO ood %s seed %d: cnf %.3f%% vs at %.3f%%\n", names[q], 11 + s, g_cnf,
                    g_at);
        if (g_cnf <= g_at) ++suite_wins;
      }
      if (suite_wins >= 2) ++seed_wins;
    }
    std::printf("INFO ood pattern (cnf <= at on >= 2 of 3 suites): %d/%d seeds\n", seed_wins,
                seeds);
  }

  std::printf("fixed-adv dataset hash: %s (shared across all methods)\n", fixed_hash.c_str());
  if (summary.failures > 0) {
    std::printf("acceptance: %d criteria FAILED\n", summary.failures);
    return 1;
  }
  std::printf("acceptance: all criteria passed\n");
  return 0;
}
