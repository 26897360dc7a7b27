#ifndef CNF_ATTACK_HPP
#define CNF_ATTACK_HPP

#include <optional>
#include <vector>

#include "cnf/instance.hpp"
#include "cnf/policy.hpp"

namespace cnf {

struct AttackConfig {
  int steps = 1;                  // gradient-ascent iterations T
  std::optional<double> alpha;    // step size; sampled uniformly from {1..100} per attack when unset
  bool perturb_coords = true;
  bool perturb_demands = false;   // CVRP only
  uint64_t seed = 0;
};

// Hardness of an instance for a policy: (c(tau) / b(x)) * log p(tau | x)
// with tau the greedy rollout and b(x) the greedy multistart mean cost.
double hardness_loss(const PolicySolver& policy, const VrpInstance& instance);

struct HardnessEval {
  double loss = 0.0;
  Mat coord_grad;    // d loss / d coords, customers first (CVRP: depot row last)
  Mat demand_grad;   // d loss / d raw demands (CVRP), else empty
  std::vector<int> greedy_sequence;
  std::vector<std::vector<int>> baseline_sequences;
  double greedy_cost = 0.0;
  double baseline_mean = 0.0;
};

// Loss plus input gradients. The greedy tour and the baseline tours are held
// fixed (stop-gradient through the action choices); the gradient flows
// through log p, c(tau) and b(x) as functions of the coordinates (and raw
// demands for CVRP).
HardnessEval hardness_eval(const PolicySolver& policy, const VrpInstance& instance);

// Loss value at `instance` with the decoding fixed to the given tours; the
// finite-difference oracle for hardness_eval's gradients. demand_override
// evaluates at real-valued demands (the attack's shadow variables).
double hardness_value_fixed(const PolicySolver& policy, const VrpInstance& instance,
                            const std::vector<int>& greedy_sequence,
                            const std::vector<std::vector<int>>& baseline_sequences,
                            const std::vector<double>* demand_override = nullptr);

struct AttackResult {
  VrpInstance instance;
  std::vector<int> provenance;    // model chosen at each step
  int steps_applied = 0;
  bool truncated_nonfinite = false;  // stopped early on a non-finite gradient
  double alpha_used = 0.0;
};

// Iterated gradient-ascent perturbation against a single model: x is moved
// along the raw hardness gradient (no sign operator) and re-projected into
// the valid domain each step. Demands keep a real-valued shadow across steps
// and are rounded into {1..9} only on emission.
AttackResult local_attack(const PolicySolver& policy, const VrpInstance& instance,
                          const AttackConfig& config);

// Each step attacks the ensemble's current best-performing model on the
// iterate (ties broken toward the lowest model index). With one model this
// is exactly local_attack.
AttackResult global_attack(const std::vector<const PolicySolver*>& ensemble,
                           const VrpInstance& instance, const AttackConfig& config);

// Clean + per-model local + global adversarial instances for one training
// step, with per-instance generator provenance.
struct AdversarialBatch {
  std::vector<VrpInstance> clean;
  std::vector<std::vector<VrpInstance>> local;  // [model][instance]
  std::vector<VrpInstance> global_;
  std::vector<std::vector<int>> global_provenance;  // [instance][step] -> model

  void validate() const;  // domain validity of every instance
};

// ---- sound node insertion ---------------------------------------------------

// Margin of the insertion-optimality condition for placing z between the
// adjacent tour nodes p and q: min over eligible pairs (a, b) != (p, q) of
//   [w(a,z) + w(b,z) - w(a,b)] - [w(p,z) + w(q,z) - w(p,q)].
// Strictly positive margin certifies that splicing z between p and q yields
// the optimal tour of the extended instance. With hull_filter, pairs of
// convex-hull nodes that do not form a hull segment are excluded (metric
// refinement; the unfiltered condition is stricter and is the default).
double insertion_margin(const VrpInstance& instance, const Tour& opt_tour, const Point& z,
                        int p, int q, bool hull_filter = false);

struct InsertionConfig {
  int descent_iterations = 100;
  double eta = 0.01;
  bool hull_filter = false;
  std::optional<Point> fixed_init;  // overrides the random proposal (tests)
};

struct InsertionResult {
  VrpInstance instance;  // n+1 nodes, the new node appended at index n
  Tour tour;             // derived optimal tour of the extended instance
  Point z;               // position of the inserted node (after projection)
  int edge_p = -1, edge_q = -1;
  double margin = 0.0;
};

// Proposes insertion points and runs constraint descent on the violation
// until the margin turns positive for some tour edge. Returns the first
// certified insertion, or, when a policy is supplied, the certified
// candidate with the highest policy greedy cost. Empty on failure.
std::optional<InsertionResult> insertion_attack(const PolicySolver* policy,
                                                const VrpInstance& instance,
                                                const Tour& opt_tour, int attempts,
                                                uint64_t seed,
                                                const InsertionConfig& config = {});

}  // namespace cnf

#endif
