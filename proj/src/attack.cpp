#include "cnf/attack.hpp"

#include <algorithm>
#include <cmath>

#include "cnf/errors.hpp"
#include "cnf/oracles.hpp"
#include "cnf/tape.hpp"

namespace cnf {

namespace {

struct GreedyDecodes {
  std::vector<int> greedy_sequence;
  double greedy_cost = 0.0;
  std::vector<std::vector<int>> baseline_sequences;
  double baseline_mean = 0.0;
};

// The projection is applied only when the value left the valid domain,
// so an untouched instance passes through unchanged.
bool demands_in_domain(const std::vector<double>& shadow) {
  for (double v : shadow) {
    if (v < 1.0 || v > 9.0 || v != std::floor(v)) return false;
  }
  return true;
}

std::vector<int> emit_demands(const std::vector<double>& shadow) {
  if (!demands_in_domain(shadow)) return project_demands(shadow);
  std::vector<int> out(shadow.size());
  for (size_t i = 0; i < shadow.size(); ++i) out[i] = static_cast<int>(shadow[i]);
  return out;
}

// The attacked tour is the policy's actual output: the best tour across the
// greedy multistart rollouts (ties toward the lowest start index). The same
// rollouts provide the mean-cost baseline.
GreedyDecodes greedy_decodes(const PolicySolver& policy, const VrpInstance& instance) {
  GreedyDecodes g;
  const RolloutResult multi = rollout(policy, {instance}, RolloutMode::Greedy, true);
  double total = 0.0;
  size_t best = 0;
  for (size_t k = 0; k < multi.tours[0].size(); ++k) {
    g.baseline_sequences.push_back(multi.tours[0][k].sequence);
    total += multi.costs[0][k];
    if (multi.costs[0][k] < multi.costs[0][best]) best = k;
  }
  g.baseline_mean = total / static_cast<double>(multi.tours[0].size());
  g.greedy_sequence = multi.tours[0][best].sequence;
  g.greedy_cost = multi.costs[0][best];
  return g;
}

// (c / b) * logp on the given tape, everything a function of the coordinate
// (and demand) leaves.
Var hardness_on_tape(Tape& tape, const ForcedForward& f, const VrpInstance& instance,
                     const std::vector<int>& greedy_sequence,
                     const std::vector<std::vector<int>>& baseline_sequences) {
  const bool closed = instance.kind == ProblemKind::Tsp;
  Var c = tape.tour_length(f.coords, greedy_sequence, closed);
  Var b;
  for (const auto& seq : baseline_sequences) {
    Var len = tape.tour_length(f.coords, seq, closed);
    b = b.valid() ? tape.add(b, len) : len;
  }
  b = tape.scale(b, 1.0 / static_cast<double>(baseline_sequences.size()));
  return tape.sum_all(tape.hadamard(tape.hadamard(c, tape.reciprocal(b)), f.logp));
}

}  // namespace

double hardness_value_fixed(const PolicySolver& policy, const VrpInstance& instance,
                            const std::vector<int>& greedy_sequence,
                            const std::vector<std::vector<int>>& baseline_sequences,
                            const std::vector<double>* demand_override) {
  Tape tape(false);
  ForcedForward f = build_forced_forward(tape, policy, instance, {greedy_sequence}, false, false,
                                         demand_override);
  Var loss = hardness_on_tape(tape, f, instance, greedy_sequence, baseline_sequences);
  return tape.val(loss)(0, 0);
}

double hardness_loss(const PolicySolver& policy, const VrpInstance& instance) {
  const GreedyDecodes g = greedy_decodes(policy, instance);
  if (!(g.baseline_mean > 0.0)) throw NumericError("multistart baseline cost must be positive");
  return hardness_value_fixed(policy, instance, g.greedy_sequence, g.baseline_sequences);
}

HardnessEval hardness_eval(const PolicySolver& policy, const VrpInstance& instance) {
  const GreedyDecodes g = greedy_decodes(policy, instance);
  if (!(g.baseline_mean > 0.0)) throw NumericError("multistart baseline cost must be positive");
  Tape tape;
  ForcedForward f = build_forced_forward(tape, policy, instance, {g.greedy_sequence}, true,
                                         false);
  Var loss = hardness_on_tape(tape, f, instance, g.greedy_sequence, g.baseline_sequences);
  tape.backward(loss);

  HardnessEval out;
  out.loss = tape.val(loss)(0, 0);
  out.coord_grad = tape.grad_of(f.coords);
  if (instance.kind == ProblemKind::Cvrp) out.demand_grad = tape.grad_of(f.demands);
  out.greedy_sequence = g.greedy_sequence;
  out.baseline_sequences = g.baseline_sequences;
  out.greedy_cost = g.greedy_cost;
  out.baseline_mean = g.baseline_mean;
  return out;
}

AttackResult global_attack(const std::vector<const PolicySolver*>& ensemble,
                           const VrpInstance& instance, const AttackConfig& config) {
  if (ensemble.empty()) throw ArgumentError("global_attack requires at least one model");
  if (config.steps < 0) throw ArgumentError("attack steps must be >= 0");
  instance.validate();
  const bool cvrp = instance.kind == ProblemKind::Cvrp;
  const bool move_demands = cvrp && config.perturb_demands;

  AttackResult result;
  result.instance = instance;

  Rng rng(derive_seed(config.seed, {0xa77acULL}));
  const double alpha = config.alpha ? *config.alpha : static_cast<double>(rng.uniform_int(1, 100));
  result.alpha_used = alpha;

  // real-valued demand shadow carried across steps; rounded only on emission
  std::vector<double> shadow;
  if (move_demands)
    shadow.assign(instance.demands->begin(), instance.demands->end());

  for (int t = 0; t < config.steps; ++t) {
    // best-performing model on the current iterate (lowest greedy cost,
    // ties toward the lowest index)
    int best = 0;
    if (ensemble.size() > 1) {
      double best_cost = 0.0;
      for (size_t m = 0; m < ensemble.size(); ++m) {
        const RolloutResult rr =
            rollout(*ensemble[m], {result.instance}, RolloutMode::Greedy, false);
        if (m == 0 || rr.costs[0][0] < best_cost) {
          best_cost = rr.costs[0][0];
          best = static_cast<int>(m);
        }
      }
    }
    result.provenance.push_back(best);

    const HardnessEval he = hardness_eval(*ensemble[static_cast<size_t>(best)], result.instance);
    const bool coord_ok = he.coord_grad.finite();
    const bool demand_ok = !move_demands || he.demand_grad.finite();
    if (!coord_ok || !demand_ok) {
      result.truncated_nonfinite = true;
      result.provenance.pop_back();
      break;
    }

    if (config.perturb_coords) {
      std::vector<Point> coords = result.instance.coords;
      for (int i = 0; i < result.instance.n(); ++i) {
        coords[static_cast<size_t>(i)].x += alpha * he.coord_grad(i, 0);
        coords[static_cast<size_t>(i)].y += alpha * he.coord_grad(i, 1);
      }
      result.instance.coords = project_coords(coords);
    }
    if (move_demands) {
      for (int i = 0; i < result.instance.n(); ++i)
        shadow[static_cast<size_t>(i)] += alpha * he.demand_grad(i, 0);
      result.instance.demands = emit_demands(shadow);
    }
    ++result.steps_applied;
  }

  result.instance.validate();
  return result;
}

AttackResult local_attack(const PolicySolver& policy, const VrpInstance& instance,
                          const AttackConfig& config) {
  return global_attack({&policy}, instance, config);
}

void AdversarialBatch::validate() const {
  for (const auto& inst : clean) inst.validate();
  for (const auto& per_model : local) {
    if (per_model.size() != clean.size())
      throw ArgumentError("local adversarial count must be models x batch");
    for (const auto& inst : per_model) inst.validate();
  }
  if (!global_.empty() && global_.size() != clean.size())
    throw ArgumentError("global adversarial count must equal the clean batch size");
  for (const auto& inst : global_) inst.validate();
}

// ---- sound node insertion ---------------------------------------------------

namespace {

double w(const Point& a, const Point& b) { return dist(a, b); }

// Andrew monotone chain; returns indices of hull vertices.
std::vector<int> convex_hull(const std::vector<Point>& pts) {
  const int n = static_cast<int>(pts.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (pts[static_cast<size_t>(a)].x != pts[static_cast<size_t>(b)].x)
      return pts[static_cast<size_t>(a)].x < pts[static_cast<size_t>(b)].x;
    return pts[static_cast<size_t>(a)].y < pts[static_cast<size_t>(b)].y;
  });
  auto cross = [&](int o, int a, int b) {
    const Point &po = pts[static_cast<size_t>(o)], &pa = pts[static_cast<size_t>(a)],
                &pb = pts[static_cast<size_t>(b)];
    return (pa.x - po.x) * (pb.y - po.y) - (pa.y - po.y) * (pb.x - po.x);
  };
  std::vector<int> hull;
  for (int pass = 0; pass < 2; ++pass) {
    const size_t base = hull.size();
    for (int idx : order) {
      while (hull.size() >= base + 2 &&
             cross(hull[hull.size() - 2], hull[hull.size() - 1], idx) <= 0.0)
        hull.pop_back();
      hull.push_back(idx);
    }
    hull.pop_back();
    std::reverse(order.begin(), order.end());
  }
  return hull;
}

struct MarginDetail {
  double margin = 0.0;
  int arg_a = -1, arg_b = -1;  // minimizing pair
};

MarginDetail margin_detail(const VrpInstance& instance, const Point& z, int p, int q,
                           bool hull_filter) {
  const int n = instance.n();
  const auto& pts = instance.coords;
  for (const Point& pt : pts)
    if (pt.x == z.x && pt.y == z.y)
      throw ArgumentError("insertion point coincides with an existing node");

  std::vector<char> on_hull;
  std::vector<std::vector<char>> hull_segment;
  if (hull_filter) {
    on_hull.assign(static_cast<size_t>(n), 0);
    hull_segment.assign(static_cast<size_t>(n), std::vector<char>(static_cast<size_t>(n), 0));
    const std::vector<int> hull = convex_hull(pts);
    for (int idx : hull) on_hull[static_cast<size_t>(idx)] = 1;
    for (size_t i = 0; i < hull.size(); ++i) {
      const int a = hull[i], b = hull[(i + 1) % hull.size()];
      hull_segment[static_cast<size_t>(a)][static_cast<size_t>(b)] = 1;
      hull_segment[static_cast<size_t>(b)][static_cast<size_t>(a)] = 1;
    }
  }

  const double insert_pq = w(pts[static_cast<size_t>(p)], z) + w(pts[static_cast<size_t>(q)], z) -
                           w(pts[static_cast<size_t>(p)], pts[static_cast<size_t>(q)]);
  MarginDetail best;
  bool first = true;
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if ((a == p && b == q) || (a == q && b == p)) continue;
      if (hull_filter && on_hull[static_cast<size_t>(a)] && on_hull[static_cast<size_t>(b)] &&
          !hull_segment[static_cast<size_t>(a)][static_cast<size_t>(b)])
        continue;
      const double val = w(pts[static_cast<size_t>(a)], z) + w(pts[static_cast<size_t>(b)], z) -
                         w(pts[static_cast<size_t>(a)], pts[static_cast<size_t>(b)]);
      const double margin = val - insert_pq;
      if (first || margin < best.margin) {
        best.margin = margin;
        best.arg_a = a;
        best.arg_b = b;
        first = false;
      }
    }
  }
  if (first) throw ArgumentError("insertion margin undefined: no eligible pair");
  return best;
}

Point unit_from(const Point& from, const Point& to) {
  const double dx = to.x - from.x, dy = to.y - from.y;
  const double d = std::sqrt(dx * dx + dy * dy);
  if (d <= 1e-300) return {0.0, 0.0};
  return {dx / d, dy / d};
}

}  // namespace

double insertion_margin(const VrpInstance& instance, const Tour& opt_tour, const Point& z,
                        int p, int q, bool hull_filter) {
  if (instance.kind != ProblemKind::Tsp)
    throw ArgumentError("insertion_margin requires a TSP instance");
  const int n = instance.n();
  bool adjacent = false;
  for (int i = 0; i < n; ++i) {
    const int a = opt_tour.sequence[static_cast<size_t>(i)];
    const int b = opt_tour.sequence[static_cast<size_t>((i + 1) % n)];
    if ((a == p && b == q) || (a == q && b == p)) {
      adjacent = true;
      break;
    }
  }
  if (!adjacent) throw ArgumentError("(p, q) is not an edge of the given tour");
  return margin_detail(instance, z, p, q, hull_filter).margin;
}

std::optional<InsertionResult> insertion_attack(const PolicySolver* policy,
                                                const VrpInstance& instance,
                                                const Tour& opt_tour, int attempts,
                                                uint64_t seed, const InsertionConfig& config) {
  if (instance.kind != ProblemKind::Tsp)
    throw ArgumentError("insertion_attack requires a TSP instance");
  if (attempts < 1) throw ArgumentError("attempts must be >= 1");
  validate_tour(instance, opt_tour.sequence);
#ifndef NDEBUG
  if (instance.n() <= kExactTspLimit) {
    const OracleResult exact = solve_exact_tsp(instance);
    if (opt_tour.cost > exact.tour.cost + 1e-9)
      throw ArgumentError("opt_tour is not optimal for the instance");
  }
#endif

  const int n = instance.n();
  const auto& seq = opt_tour.sequence;
  std::vector<InsertionResult> successes;

  for (int attempt = 0; attempt < attempts; ++attempt) {
    Rng rng(derive_seed(seed, {0x15e7ULL, static_cast<uint64_t>(attempt)}));
    Point z = config.fixed_init ? *config.fixed_init : Point{rng.uniform(), rng.uniform()};

    for (int iter = 0; iter <= config.descent_iterations; ++iter) {
      // the most promising tour edge for the current z
      int best_p = -1, best_q = -1;
      MarginDetail best;
      bool first = true;
      bool degenerate = false;
      for (int i = 0; i < n; ++i) {
        const int p = seq[static_cast<size_t>(i)];
        const int q = seq[static_cast<size_t>((i + 1) % n)];
        MarginDetail d;
        try {
          d = margin_detail(instance, z, p, q, config.hull_filter);
        } catch (const ArgumentError&) {
          degenerate = true;  // z drifted onto a node; restart this attempt
          break;
        }
        if (first || d.margin > best.margin) {
          best = d;
          best_p = p;
          best_q = q;
          first = false;
        }
      }
      if (degenerate) break;

      if (best.margin > 0.0) {
        InsertionResult res;
        std::vector<Point> coords = instance.coords;
        coords.push_back(z);
        VrpInstance extended;
        extended.kind = ProblemKind::Tsp;
        extended.coords = project_coords(coords);  // similarity transform: keeps optimality
        extended.id = instance.id + "+ins";
        res.z = extended.coords.back();
        res.instance = std::move(extended);
        // splice the new node (index n) between best_p and best_q
        std::vector<int> spliced;
        spliced.reserve(static_cast<size_t>(n + 1));
        for (int i = 0; i < n; ++i) {
          spliced.push_back(seq[static_cast<size_t>(i)]);
          const int a = seq[static_cast<size_t>(i)];
          const int b = seq[static_cast<size_t>((i + 1) % n)];
          if ((a == best_p && b == best_q) || (a == best_q && b == best_p))
            spliced.push_back(n);
        }
        res.tour.sequence = spliced;
        res.tour.cost = tour_cost(res.instance, spliced);
        res.edge_p = best_p;
        res.edge_q = best_q;
        // re-certify on the projected geometry (original nodes only)
        VrpInstance scaled = instance;
        scaled.coords.assign(res.instance.coords.begin(), res.instance.coords.end() - 1);
        res.margin = margin_detail(scaled, res.z, best_p, best_q, config.hull_filter).margin;
        if (res.margin <= 0.0) break;  // projection degeneracy; treat as failed attempt
        successes.push_back(std::move(res));
        break;
      }

      if (iter == config.descent_iterations) break;
      // descend on the constraint violation for the best edge
      const Point& pp = instance.coords[static_cast<size_t>(best_p)];
      const Point& pq = instance.coords[static_cast<size_t>(best_q)];
      const Point& pa = instance.coords[static_cast<size_t>(best.arg_a)];
      const Point& pb = instance.coords[static_cast<size_t>(best.arg_b)];
      const Point up = unit_from(pp, z), uq = unit_from(pq, z);
      const Point ua = unit_from(pa, z), ub = unit_from(pb, z);
      z.x -= config.eta * (up.x + uq.x - ua.x - ub.x);
      z.y -= config.eta * (up.y + uq.y - ua.y - ub.y);
    }

    if (!successes.empty() && policy == nullptr) break;  // first success wins
  }

  if (successes.empty()) return std::nullopt;
  if (policy == nullptr) return successes.front();

  size_t best_idx = 0;
  double best_cost = -1.0;
  for (size_t i = 0; i < successes.size(); ++i) {
    const RolloutResult rr =
        rollout(*policy, {successes[i].instance}, RolloutMode::Greedy, false);
    if (rr.costs[0][0] > best_cost) {
      best_cost = rr.costs[0][0];
      best_idx = i;
    }
  }
  return successes[best_idx];
}

}  // namespace cnf
