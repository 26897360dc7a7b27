#ifndef CNF_OPTIM_HPP
#define CNF_OPTIM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cnf/mat.hpp"
#include "cnf/rng.hpp"

namespace cnf {

// Named collection of parameter tensors. Exposed to callers as one flat
// vector; modules address tensors by the indices returned from add().
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Mat> tensors;

  int add(const std::string& name, int rows, int cols) {
    names.push_back(name);
    tensors.emplace_back(rows, cols);
    return static_cast<int>(tensors.size()) - 1;
  }

  size_t total_size() const {
    size_t s = 0;
    for (const Mat& t : tensors) s += t.size();
    return s;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const Mat& t : tensors) out.insert(out.end(), t.a.begin(), t.a.end());
    return out;
  }

  void unflatten(const std::vector<double>& flat);

  bool finite() const {
    for (const Mat& t : tensors)
      if (!t.finite()) return false;
    return true;
  }
};

std::vector<Mat> zeros_like(const ParamSet& params);
void accumulate(std::vector<Mat>& into, const std::vector<Mat>& grads);
bool all_finite(const std::vector<Mat>& grads);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases; *.g
// tensors (normalization gains) start at 1, *.b normalization shifts at 0.
void init_params(ParamSet& params, uint64_t seed);

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  int64_t t = 0;

  void init_like(const ParamSet& params) {
    m = zeros_like(params);
    v = zeros_like(params);
    t = 0;
  }
  bool initialized() const { return !m.empty(); }
};

// Adam with decoupled weight decay (p *= 1 - wd before the update, not
// scaled by the learning rate). lr = 0 with wd = 0 leaves parameters
// bit-identical.
void adam_step(ParamSet& params, const std::vector<Mat>& grads, AdamState& state, double lr,
               double weight_decay, bool maximize = false);

// Exponential-moving-average cost baseline for single-start REINFORCE.
struct EmaBaseline {
  double value = 0.0;
  bool ready = false;
  double decay = 0.9;

  double update(double batch_mean) {
    value = ready ? decay * value + (1.0 - decay) * batch_mean : batch_mean;
    ready = true;
    return value;
  }
};

}  // namespace cnf

#endif
