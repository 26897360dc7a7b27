#ifndef CNF_TRAINER_HPP
#define CNF_TRAINER_HPP

#include <optional>
#include <string>
#include <vector>

#include "cnf/attack.hpp"
#include "cnf/policy.hpp"
#include "cnf/router.hpp"

namespace cnf {

struct TrainConfig {
  ProblemKind kind = ProblemKind::Tsp;
  int n = 20;
  int64_t total_instances = 160000;  // clean instances drawn over the run
  int batch_size = 32;
  int models = 3;
  int attack_steps = 1;
  double lr = 1e-4;
  double weight_decay = 1e-6;
  double lr_decay_factor = 0.1;
  double lr_decay_frac = 0.4;  // learning rate decays for this final fraction
  uint64_t seed = 0;
  int64_t checkpoint_interval = 0;  // instances between checkpoints (0 = none)
  int64_t eval_interval = 0;        // instances between attention dumps (0 = none)
  PolicyConfig policy;
  RouterConfig router;
  RouteStrategy strategy = RouteStrategy::MTopK;
  int topk = 0;  // K for model-choice routing; 0 means batch_size
  bool use_global_attack = true;
  bool perturb_demands = true;  // CVRP attacks also move demands
  std::optional<double> attack_alpha;
  bool at_include_clean = false;  // vanilla-AT variant: mix the clean batch in
  double divtrain_lambda = 0.5;
  std::string out_dir;  // metrics and checkpoints land here when nonempty

  int k() const { return topk > 0 ? topk : batch_size; }
  int64_t steps_total() const {
    return (total_instances + batch_size - 1) / batch_size;
  }
  // Exact schedule: full rate while consumed < (1 - decay_frac) * total.
  double lr_at(int64_t consumed) const;
  void validate() const;
};

// Flat key=value file (one per line, # comments). Unknown keys are errors.
TrainConfig parse_train_config(const std::string& path);
void apply_config_line(TrainConfig& config, const std::string& key, const std::string& value);

struct Ensemble {
  std::vector<PolicySolver> models;

  int size() const { return static_cast<int>(models.size()); }
  ProblemKind kind() const { return models.at(0).kind; }
};

enum class TrainMethod { Pretrain, VanillaAT, HAC, DivTrain, CNF };
std::string to_string(TrainMethod m);
TrainMethod train_method_from_string(const std::string& s);

// Complete mutable training state; checkpoints round-trip it exactly.
struct TrainerState {
  TrainMethod method = TrainMethod::Pretrain;
  TrainConfig config;
  Ensemble ensemble;
  std::optional<NeuralRouter> router;
  std::vector<AdamState> model_opt;
  AdamState router_opt;
  std::vector<EmaBaseline> emas;
  int64_t step = 0;
  int64_t instances_consumed = 0;
};

void checkpoint_save(const TrainerState& state, const std::string& path);
TrainerState checkpoint_load(const std::string& path);
// Loads the first model of a checkpoint, enforcing the problem kind.
PolicySolver load_policy_for(ProblemKind kind, const std::string& path);

// Initializes the state for a method; pretrained is required for everything
// except Pretrain.
TrainerState make_trainer_state(TrainMethod method, const PolicySolver* pretrained,
                                const TrainConfig& config);

// Runs the state's method until its instance budget is exhausted; resumable
// from any checkpoint. Writes metrics.csv / checkpoints / attention dumps to
// config.out_dir when set.
void run_training(TrainerState& state);

// Convenience wrappers.
PolicySolver pretrain(const TrainConfig& config);
Ensemble train_vanilla_at(const PolicySolver& pretrained, const TrainConfig& config);
Ensemble train_hac(const PolicySolver& pretrained, const TrainConfig& config);
Ensemble train_divtrain(const PolicySolver& pretrained, const TrainConfig& config);
struct CnfResult {
  Ensemble ensemble;
  NeuralRouter router;
};
CnfResult train_cnf(const PolicySolver& pretrained, const TrainConfig& config);

// HAC instance weights: softmax of tanh(hardness) / temperature.
std::vector<double> hac_weights(const std::vector<double>& hardness, double temperature);
// HAC temperature at a training progress in [0, 1]: linear from 20 down to 1.
double hac_temperature(double progress);

// Diversity penalty lambda * log(sum over pairs a<b of exp(cos(g_a, g_b)))
// over flattened input-gradient vectors; all-zero vectors contribute
// cosine 0.
double gradient_similarity_penalty(const std::vector<std::vector<double>>& grads,
                                   double lambda);

}  // namespace cnf

#endif
