#ifndef CNF_POLICY_HPP
#define CNF_POLICY_HPP

#include <cstdint>
#include <vector>

#include "cnf/instance.hpp"
#include "cnf/optim.hpp"
#include "cnf/tape.hpp"

namespace cnf {

// Attention encoder / pointer decoder sizes. embed_dim must be divisible by
// heads; ff_dim of 0 means 4 * embed_dim.
struct PolicyConfig {
  int embed_dim = 128;
  int encoder_layers = 3;
  int heads = 8;
  int ff_dim = 0;
  double logit_clip = 10.0;
  bool multistart = true;

  int ff() const { return ff_dim > 0 ? ff_dim : 4 * embed_dim; }
  int head_dim() const { return embed_dim / heads; }
  void validate() const;

  friend bool operator==(const PolicyConfig& a, const PolicyConfig& b) {
    return a.embed_dim == b.embed_dim && a.encoder_layers == b.encoder_layers &&
           a.heads == b.heads && a.ff_dim == b.ff_dim && a.logit_clip == b.logit_clip &&
           a.multistart == b.multistart;
  }
};

// Index of every named tensor inside the parameter set.
struct PolicyParamIndex {
  int embed_w = -1, embed_b = -1;                              // TSP node embedding
  int cust_w = -1, cust_b = -1, depot_w = -1, depot_b = -1;    // CVRP embeddings
  struct Layer {
    int wq, wk, wv, wo;
    int n1g, n1b;
    int ffw1, ffb1, ffw2, ffb2;
    int n2g, n2b;
  };
  std::vector<Layer> layers;
  int dec_wc = -1, dec_wgk = -1, dec_wgv = -1, dec_wlk = -1;
};

// One constructive policy: configuration, parameters and a version counter
// bumped on every parameter update.
struct PolicySolver {
  PolicyConfig config;
  ProblemKind kind = ProblemKind::Tsp;
  ParamSet params;
  PolicyParamIndex index;
  uint64_t version = 0;

  std::vector<double> parameters_flat() const { return params.flatten(); }
  void set_parameters_flat(const std::vector<double>& flat) {
    params.unflatten(flat);
    ++version;
  }
};

PolicySolver init_policy(const PolicyConfig& config, ProblemKind kind, uint64_t seed);

enum class RolloutMode { Greedy, Sample };

struct RolloutResult {
  // [instance][start]
  std::vector<std::vector<Tour>> tours;
  std::vector<std::vector<double>> log_probs;
  std::vector<std::vector<double>> costs;
  std::vector<std::vector<int>> starts;
  uint64_t policy_version = 0;
  bool sampled = false;
  bool multistart = false;
};

// Constructs tours step by step with feasibility masking. Greedy mode is a
// deterministic function of (parameters, instance); sample mode is
// deterministic given the seed. Multistart decodes one tour per start node
// (TSP: every node, CVRP: every first customer); single start forces node 0.
RolloutResult rollout(const PolicySolver& policy, const std::vector<VrpInstance>& instances,
                      RolloutMode mode, bool multistart, uint64_t seed = 0);

// REINFORCE gradient of the surrogate loss
//   mean over instances and starts of (cost - baseline) * log p(tour),
// with the multistart mean cost as the shared baseline. Single-start
// rollouts fall back to the EMA baseline (batch mean on first use).
// The rollout must come from this policy version with mode == Sample.
// instance_weights, when given, replace the uniform 1/batch weighting
// (they should sum to 1).
std::vector<Mat> reinforce_gradient(const PolicySolver& policy,
                                    const std::vector<VrpInstance>& instances,
                                    const RolloutResult& rollout_result,
                                    EmaBaseline* ema = nullptr,
                                    const std::vector<double>* instance_weights = nullptr);

struct StepOptions {
  double lr = 1e-4;
  double weight_decay = 1e-6;
};

// Checks the gradient, applies one Adam update and bumps the version.
// Throws NumericError (leaving parameters untouched) on a non-finite
// gradient.
void apply_gradient_update(PolicySolver& policy, const std::vector<Mat>& grads,
                           AdamState& optimizer, const StepOptions& options);

// Sampled multistart rollout + REINFORCE + one Adam update.
void train_step(PolicySolver& policy, const std::vector<VrpInstance>& instances,
                AdamState& optimizer, const StepOptions& options, EmaBaseline* ema,
                uint64_t seed);

// ---- lower-level surface (attack engine, diversity penalty, tests) --------

struct ForcedForward {
  Var coords;               // (n [+1 for CVRP depot row]) x 2 leaf
  Var demands;              // n x 1 leaf (CVRP only)
  Var logp;                 // K x 1: log-probability of each given sequence
  std::vector<Var> param_vars;  // filled iff params_require_grad
};

// Re-runs the decoder with the given action sequences forced, building the
// computation on `tape`. Sequences use rollout conventions (TSP: permutation
// starting at the start node; CVRP: depot-bracketed with depot index n).
// demand_override evaluates the forward at real-valued demands in place of
// the instance's integers (the attack's shadow values).
ForcedForward build_forced_forward(Tape& tape, const PolicySolver& policy,
                                   const VrpInstance& instance,
                                   const std::vector<std::vector<int>>& sequences,
                                   bool inputs_require_grad, bool params_require_grad,
                                   const std::vector<double>* demand_override = nullptr);

// Value (and optionally the parameter gradient, accumulated into *grads) of
// sum_k weights[k] * log p(sequences[k] | instance).
double weighted_logp(const PolicySolver& policy, const VrpInstance& instance,
                     const std::vector<std::vector<int>>& sequences,
                     const std::vector<double>& weights, std::vector<Mat>* grads);

// Encoder output (rows = nodes, CVRP depot last), without gradients.
Mat encode_instance(const PolicySolver& policy, const VrpInstance& instance);

}  // namespace cnf

#endif
