#include "cnf/optim.hpp"

#include <cmath>

#include "cnf/errors.hpp"

namespace cnf {

void ParamSet::unflatten(const std::vector<double>& flat) {
  if (flat.size() != total_size())
    throw ArgumentError("flat parameter vector has size " + std::to_string(flat.size()) +
                        ", expected " + std::to_string(total_size()));
  size_t off = 0;
  for (Mat& t : tensors) {
    std::copy(flat.begin() + static_cast<long>(off),
              flat.begin() + static_cast<long>(off + t.size()), t.a.begin());
    off += t.size();
  }
}

std::vector<Mat> zeros_like(const ParamSet& params) {
  std::vector<Mat> out;
  out.reserve(params.tensors.size());
  for (const Mat& t : params.tensors) out.emplace_back(t.rows, t.cols);
  return out;
}

void accumulate(std::vector<Mat>& into, const std::vector<Mat>& grads) {
  if (into.size() != grads.size()) throw ArgumentError("gradient tensor count mismatch");
  for (size_t i = 0; i < into.size(); ++i) axpy(1.0, grads[i], into[i]);
}

bool all_finite(const std::vector<Mat>& grads) {
  for (const Mat& g : grads)
    if (!g.finite()) return false;
  return true;
}

void init_params(ParamSet& params, uint64_t seed) {
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    Mat& t = params.tensors[i];
    const std::string& name = params.names[i];
    const bool is_norm_gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool is_norm_shift = name.find("norm") != std::string::npos &&
                               name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (is_norm_gain) {
      t.fill(1.0);
      continue;
    }
    if (is_norm_shift) {
      t.fill(0.0);
      continue;
    }
    Rng rng(derive_seed(seed, {0x1417ULL, static_cast<uint64_t>(i)}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows));
    for (double& x : t.a) x = rng.uniform(-bound, bound);
  }
}

void adam_step(ParamSet& params, const std::vector<Mat>& grads, AdamState& state, double lr,
               double weight_decay, bool maximize) {
  if (!state.initialized()) state.init_like(params);
  if (grads.size() != params.tensors.size())
    throw ArgumentError("gradient tensor count does not match parameter set");
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  const double sign = maximize ? -1.0 : 1.0;
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    Mat& p = params.tensors[i];
    Mat& m = state.m[i];
    Mat& v = state.v[i];
    const Mat& g = grads[i];
    if (weight_decay != 0.0)
      for (double& x : p.a) x *= 1.0 - weight_decay;
    for (size_t k = 0; k < p.size(); ++k) {
      const double gk = sign * g.a[k];
      m.a[k] = beta1 * m.a[k] + (1.0 - beta1) * gk;
      v.a[k] = beta2 * v.a[k] + (1.0 - beta2) * gk * gk;
      const double mhat = m.a[k] / bc1;
      const double vhat = v.a[k] / bc2;
      p.a[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace cnf
