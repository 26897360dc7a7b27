#ifndef CNF_ROUTER_HPP
#define CNF_ROUTER_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cnf/instance.hpp"
#include "cnf/optim.hpp"

namespace cnf {

// Greedy costs of N instances under each of M models; the router's second
// input and its reward source.
struct CostMatrix {
  Mat values;  // N x M

  int instances() const { return values.rows; }
  int models() const { return values.cols; }
  void validate() const;  // finite and nonnegative
};

struct RouterConfig {
  int embed_dim = 128;
  double logit_clip = 10.0;
};

// Single-head attention router: instance features (mean-pooled coordinate
// embedding, plus depot and demand summary features for CVRP) and cost-row
// features form the query; a learnable model-embedding table forms the keys.
struct NeuralRouter {
  RouterConfig config;
  ProblemKind kind = ProblemKind::Tsp;
  int models = 0;
  ParamSet params;
  struct Index {
    int w1 = -1, b1 = -1;  // instance feature projection
    int w2 = -1, b2 = -1;  // cost feature projection
    int wq = -1;           // query projection over concatenated features
    int emb = -1;          // model embedding table (M x h)
    int wk = -1;           // key projection
  } index;
  uint64_t version = 0;
};

NeuralRouter init_router(const RouterConfig& config, ProblemKind kind, int models,
                         uint64_t seed);

// Logit matrix P (N x M); every entry lies strictly inside (-C, C).
Mat route_logits(const NeuralRouter& router, const std::vector<VrpInstance>& instances,
                 const CostMatrix& costs);

enum class RouteStrategy { MTopK, MSample, ITopK, ISample, Random, SelfTrain };
std::string to_string(RouteStrategy s);
RouteStrategy route_strategy_from_string(const std::string& s);

// Which generator produced each instance in the training set X:
// kClean for clean instances, kGlobal for global adversarial ones, and the
// owning model index for local adversarial ones.
struct BatchProvenance {
  static constexpr int kClean = -1;
  static constexpr int kGlobal = -2;
  std::vector<int> owner;
};

struct Assignment {
  std::vector<std::vector<int>> per_model;  // instance indices, ascending
  RouteStrategy strategy = RouteStrategy::MTopK;
};

// Distributes instances to models. Model-choice strategies (M-TopK,
// M-Sample, Random, SelfTrain) assign a fixed number per model (load
// balancing); instance-choice strategies let each instance pick one model.
// Top-K ties break toward the lowest instance index; sampling strategies are
// deterministic given the seed. SelfTrain requires provenance.
Assignment select(RouteStrategy strategy, const Mat& logits, int k, uint64_t seed,
                  const BatchProvenance* provenance = nullptr);

// Per-instance collaborative improvement: min_j R_ij - min_j R'_ij.
std::vector<double> router_reward(const CostMatrix& before, const CostMatrix& after);

// Gradient (ascent direction) of the masked surrogate
//   sum over selected (i, j) of reward_i * log softmax(P)_ij,
// with the softmax over the instance dimension for model-choice strategies
// and over the model dimension for instance-choice ones. Random/SelfTrain
// assignments are not functions of P and are rejected.
std::vector<Mat> router_update_gradient(const NeuralRouter& router,
                                        const std::vector<VrpInstance>& instances,
                                        const CostMatrix& costs, const Assignment& assignment,
                                        const std::vector<double>& rewards);

// One REINFORCE ascent step on the masked surrogate. Skips the step (with a
// warning) on a non-finite gradient.
void router_update(NeuralRouter& router, const std::vector<VrpInstance>& instances,
                   const CostMatrix& costs, const Assignment& assignment,
                   const std::vector<double>& rewards, AdamState& optimizer, double lr,
                   double weight_decay);

// Column softmax of P over the instance dimension (model-choice
// probabilities); rows then sum to 1 per model column.
Mat instance_softmax(const Mat& logits);
// Row softmax of P over the model dimension (instance-choice probabilities).
Mat model_softmax(const Mat& logits);

}  // namespace cnf

#endif
