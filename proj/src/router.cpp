#include "cnf/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cnf/errors.hpp"
#include "cnf/tape.hpp"

namespace cnf {

void CostMatrix::validate() const {
  for (double v : values.a)
    if (!std::isfinite(v) || v < 0.0) throw NumericError("cost matrix must be finite and nonnegative");
}

std::string to_string(RouteStrategy s) {
  switch (s) {
    case RouteStrategy::MTopK: return "m-topk";
    case RouteStrategy::MSample: return "m-sample";
    case RouteStrategy::ITopK: return "i-topk";
    case RouteStrategy::ISample: return "i-sample";
    case RouteStrategy::Random: return "random";
    case RouteStrategy::SelfTrain: return "selftrain";
  }
  return "m-topk";
}

RouteStrategy route_strategy_from_string(const std::string& s) {
  if (s == "m-topk") return RouteStrategy::MTopK;
  if (s == "m-sample") return RouteStrategy::MSample;
  if (s == "i-topk") return RouteStrategy::ITopK;
  if (s == "i-sample") return RouteStrategy::ISample;
  if (s == "random") return RouteStrategy::Random;
  if (s == "selftrain") return RouteStrategy::SelfTrain;
  throw ArgumentError("unknown routing strategy: " + s);
}

NeuralRouter init_router(const RouterConfig& config, ProblemKind kind, int models,
                         uint64_t seed) {
  if (models < 1) throw ArgumentError("router needs at least one model");
  if (config.embed_dim < 1 || !(config.logit_clip > 0.0))
    throw ArgumentError("invalid router configuration");
  NeuralRouter r;
  r.config = config;
  r.kind = kind;
  r.models = models;
  const int h = config.embed_dim;
  // query input: [instance features | cost features] plus, for CVRP, the
  // depot embedding and (mean, max) normalized demand
  const int qin = kind == ProblemKind::Tsp ? 2 * h : 3 * h + 2;
  r.index.w1 = r.params.add("inst.w", 2, h);
  r.index.b1 = r.params.add("inst.b", 1, h);
  r.index.w2 = r.params.add("cost.w", models, h);
  r.index.b2 = r.params.add("cost.b", 1, h);
  r.index.wq = r.params.add("query.w", qin, h);
  r.index.emb = r.params.add("model.emb", models, h);
  r.index.wk = r.params.add("key.w", h, h);
  init_params(r.params, seed);
  return r;
}

namespace {

// Mean coordinates per instance; mean-pooling commutes with the linear
// embedding, so F_I = mean(X) W1 + b1.
Mat mean_coord_features(const std::vector<VrpInstance>& instances) {
  Mat m(static_cast<int>(instances.size()), 2);
  for (size_t i = 0; i < instances.size(); ++i) {
    double sx = 0.0, sy = 0.0;
    for (const Point& p : instances[i].coords) {
      sx += p.x;
      sy += p.y;
    }
    m(static_cast<int>(i), 0) = sx / instances[i].n();
    m(static_cast<int>(i), 1) = sy / instances[i].n();
  }
  return m;
}

Mat depot_features(const std::vector<VrpInstance>& instances) {
  Mat m(static_cast<int>(instances.size()), 2);
  for (size_t i = 0; i < instances.size(); ++i) {
    m(static_cast<int>(i), 0) = instances[i].depot->x;
    m(static_cast<int>(i), 1) = instances[i].depot->y;
  }
  return m;
}

Mat demand_summary(const std::vector<VrpInstance>& instances) {
  Mat m(static_cast<int>(instances.size()), 2);
  for (size_t i = 0; i < instances.size(); ++i) {
    const auto& d = *instances[i].demands;
    const double q = *instances[i].capacity;
    double mean = 0.0, mx = 0.0;
    for (int v : d) {
      mean += v;
      mx = std::max(mx, static_cast<double>(v));
    }
    m(static_cast<int>(i), 0) = mean / (static_cast<double>(d.size()) * q);
    m(static_cast<int>(i), 1) = mx / q;
  }
  return m;
}

void check_inputs(const NeuralRouter& router, const std::vector<VrpInstance>& instances,
                  const CostMatrix& costs) {
  if (static_cast<int>(instances.size()) != costs.instances())
    throw ArgumentError("instance count does not match the cost matrix");
  if (costs.models() != router.models)
    throw ArgumentError("cost matrix model count does not match the router");
  for (const auto& inst : instances)
    if (inst.kind != router.kind) throw ArgumentError("instance kind does not match the router");
}

// Tape forward producing the transposed logit matrix (M x N). Shared by the
// eager path (values only) and the update path (gradients).
Var logits_transposed(Tape& t, const NeuralRouter& router,
                      const std::vector<VrpInstance>& instances, const CostMatrix& costs,
                      std::vector<Var>* param_vars) {
  const auto& ix = router.index;
  std::vector<Var> pv;
  pv.reserve(router.params.tensors.size());
  for (const Mat& m : router.params.tensors)
    pv.push_back(t.leaf(m, param_vars != nullptr));
  if (param_vars) *param_vars = pv;

  Var fi = t.linear(t.constant(mean_coord_features(instances)), pv[ix.w1], pv[ix.b1]);
  Var fr = t.linear(t.constant(costs.values), pv[ix.w2], pv[ix.b2]);
  Var qin = t.concat_cols(fi, fr);
  if (router.kind == ProblemKind::Cvrp) {
    Var fdep = t.linear(t.constant(depot_features(instances)), pv[ix.w1], pv[ix.b1]);
    qin = t.concat_cols(t.concat_cols(qin, fdep), t.constant(demand_summary(instances)));
  }
  Var q = t.matmul(qin, pv[ix.wq]);                      // N x h
  Var k = t.matmul(pv[ix.emb], pv[ix.wk]);               // M x h
  const double scl = 1.0 / std::sqrt(static_cast<double>(router.config.embed_dim));
  return t.scale(t.tanh(t.scale(t.matmul_nt(k, q), scl)), router.config.logit_clip);  // M x N
}

}  // namespace

Mat route_logits(const NeuralRouter& router, const std::vector<VrpInstance>& instances,
                 const CostMatrix& costs) {
  check_inputs(router, instances, costs);
  costs.validate();
  Tape t(false);
  Var pt = logits_transposed(t, router, instances, costs, nullptr);
  const Mat& m = t.val(pt);
  Mat out(m.cols, m.rows);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(c, r) = m(r, c);
  return out;
}

Mat instance_softmax(const Mat& logits) {
  Mat out(logits.rows, logits.cols);
  for (int j = 0; j < logits.cols; ++j) {
    double mx = -1e300;
    for (int i = 0; i < logits.rows; ++i) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (int i = 0; i < logits.rows; ++i) sum += std::exp(logits(i, j) - mx);
    for (int i = 0; i < logits.rows; ++i) out(i, j) = std::exp(logits(i, j) - mx) / sum;
  }
  return out;
}

Mat model_softmax(const Mat& logits) {
  Mat out(logits.rows, logits.cols);
  for (int i = 0; i < logits.rows; ++i) {
    double mx = -1e300;
    for (int j = 0; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (int j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx);
    for (int j = 0; j < logits.cols; ++j) out(i, j) = std::exp(logits(i, j) - mx) / sum;
  }
  return out;
}

namespace {

// Top-k columns of one probability column, ties toward the lowest index.
std::vector<int> top_k_indices(const Mat& probs, int column, int k) {
  std::vector<int> order(static_cast<size_t>(probs.rows));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return probs(a, column) > probs(b, column);
  });
  order.resize(static_cast<size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

// Weighted sampling of k distinct indices from one probability column.
std::vector<int> sample_k_indices(const Mat& probs, int column, int k, Rng& rng) {
  std::vector<int> pool(static_cast<size_t>(probs.rows));
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<double> w(static_cast<size_t>(probs.rows));
  for (int i = 0; i < probs.rows; ++i) w[static_cast<size_t>(i)] = probs(i, column);
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(k));
  for (int draw = 0; draw < k; ++draw) {
    double total = 0.0;
    for (int idx : pool) total += w[static_cast<size_t>(idx)];
    double u = rng.uniform() * total;
    size_t at = 0;
    for (size_t t = 0; t < pool.size(); ++t) {
      u -= w[static_cast<size_t>(pool[t])];
      at = t;
      if (u < 0.0) break;
    }
    picked.push_back(pool[at]);
    pool.erase(pool.begin() + static_cast<long>(at));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

Assignment select(RouteStrategy strategy, const Mat& logits, int k, uint64_t seed,
                  const BatchProvenance* provenance) {
  const int n = logits.rows, m = logits.cols;
  Assignment out;
  out.strategy = strategy;
  out.per_model.assign(static_cast<size_t>(m), {});

  switch (strategy) {
    case RouteStrategy::MTopK:
    case RouteStrategy::MSample: {
      if (k < 1 || k > n) throw ArgumentError("k must lie in [1, N] for model-choice strategies");
      const Mat probs = instance_softmax(logits);
      for (int j = 0; j < m; ++j) {
        if (strategy == RouteStrategy::MTopK) {
          out.per_model[static_cast<size_t>(j)] = top_k_indices(probs, j, k);
        } else {
          Rng rng(derive_seed(seed, {0x5e1ULL, static_cast<uint64_t>(j)}));
          out.per_model[static_cast<size_t>(j)] = sample_k_indices(probs, j, k, rng);
        }
      }
      break;
    }
    case RouteStrategy::ITopK:
    case RouteStrategy::ISample: {
      const Mat probs = model_softmax(logits);
      Rng rng(derive_seed(seed, {0x15aULL}));
      for (int i = 0; i < n; ++i) {
        int pick = 0;
        if (strategy == RouteStrategy::ITopK) {
          for (int j = 1; j < m; ++j)
            if (probs(i, j) > probs(i, pick)) pick = j;
        } else {
          const double u = rng.uniform();
          double cum = 0.0;
          pick = m - 1;
          for (int j = 0; j < m; ++j) {
            cum += probs(i, j);
            if (u < cum) {
              pick = j;
              break;
            }
          }
        }
        out.per_model[static_cast<size_t>(pick)].push_back(i);
      }
      break;
    }
    case RouteStrategy::Random: {
      if (k < 1 || k > n) throw ArgumentError("k must lie in [1, N] for random routing");
      for (int j = 0; j < m; ++j) {
        Rng rng(derive_seed(seed, {0x7a2ULL, static_cast<uint64_t>(j)}));
        std::vector<int> pool(static_cast<size_t>(n));
        std::iota(pool.begin(), pool.end(), 0);
        // partial Fisher-Yates
        for (int t = 0; t < k; ++t) {
          const int swap = t + static_cast<int>(rng.next_u64() %
                                                static_cast<uint64_t>(n - t));
          std::swap(pool[static_cast<size_t>(t)], pool[static_cast<size_t>(swap)]);
        }
        pool.resize(static_cast<size_t>(k));
        std::sort(pool.begin(), pool.end());
        out.per_model[static_cast<size_t>(j)] = pool;
      }
      break;
    }
    case RouteStrategy::SelfTrain: {
      if (!provenance) throw ArgumentError("selftrain routing requires batch provenance");
      if (static_cast<int>(provenance->owner.size()) != n)
        throw ArgumentError("provenance size does not match the batch");
      for (int i = 0; i < n; ++i) {
        const int owner = provenance->owner[static_cast<size_t>(i)];
        if (owner == BatchProvenance::kClean || owner == BatchProvenance::kGlobal) {
          for (int j = 0; j < m; ++j) out.per_model[static_cast<size_t>(j)].push_back(i);
        } else {
          if (owner < 0 || owner >= m) throw ArgumentError("provenance owner outside [0, M)");
          out.per_model[static_cast<size_t>(owner)].push_back(i);
        }
      }
      break;
    }
  }
  return out;
}

std::vector<double> router_reward(const CostMatrix& before, const CostMatrix& after) {
  if (!before.values.same_shape(after.values))
    throw ArgumentError("cost matrices must have the same shape");
  std::vector<double> rewards(static_cast<size_t>(before.instances()));
  for (int i = 0; i < before.instances(); ++i) {
    double a = before.values(i, 0), b = after.values(i, 0);
    for (int j = 1; j < before.models(); ++j) {
      a = std::min(a, before.values(i, j));
      b = std::min(b, after.values(i, j));
    }
    rewards[static_cast<size_t>(i)] = a - b;
  }
  return rewards;
}

std::vector<Mat> router_update_gradient(const NeuralRouter& router,
                                        const std::vector<VrpInstance>& instances,
                                        const CostMatrix& costs, const Assignment& assignment,
                                        const std::vector<double>& rewards) {
  check_inputs(router, instances, costs);
  const int n = costs.instances(), m = costs.models();
  if (static_cast<int>(rewards.size()) != n)
    throw ArgumentError("reward count does not match the batch");
  const bool model_choice = assignment.strategy == RouteStrategy::MTopK ||
                            assignment.strategy == RouteStrategy::MSample;
  const bool instance_choice = assignment.strategy == RouteStrategy::ITopK ||
                               assignment.strategy == RouteStrategy::ISample;
  if (!model_choice && !instance_choice)
    throw ArgumentError("router_update requires an assignment produced from the logits");
  if (static_cast<int>(assignment.per_model.size()) != m)
    throw ArgumentError("assignment model count mismatch");

  // reward weights on selected (i, j) entries; model choice works on the
  // transposed (M x N) layout whose row softmax runs over instances
  Mat weights = model_choice ? Mat(m, n) : Mat(n, m);
  for (int j = 0; j < m; ++j)
    for (int i : assignment.per_model[static_cast<size_t>(j)]) {
      if (i < 0 || i >= n) throw ArgumentError("assignment index outside the batch");
      if (model_choice)
        weights(j, i) = rewards[static_cast<size_t>(i)];
      else
        weights(i, j) = rewards[static_cast<size_t>(i)];
    }

  Tape t;
  std::vector<Var> pv;
  Var pt = logits_transposed(t, router, instances, costs, &pv);  // M x N
  Var logprob = model_choice ? t.log(t.softmax_rows(pt))
                             : t.log(t.softmax_rows(t.transpose(pt)));
  Var loss = t.sum_all(t.hadamard(logprob, t.constant(std::move(weights))));
  t.backward(loss);

  std::vector<Mat> grads;
  grads.reserve(pv.size());
  for (Var v : pv) grads.push_back(t.grad_of(v));
  return grads;
}

void router_update(NeuralRouter& router, const std::vector<VrpInstance>& instances,
                   const CostMatrix& costs, const Assignment& assignment,
                   const std::vector<double>& rewards, AdamState& optimizer, double lr,
                   double weight_decay) {
  const std::vector<Mat> grads =
      router_update_gradient(router, instances, costs, assignment, rewards);
  if (!all_finite(grads)) {
    std::fprintf(stderr, "router_update: non-finite gradient, step skipped\n");
    return;
  }
  adam_step(router.params, grads, optimizer, lr, weight_decay, /*maximize=*/true);
  ++router.version;
}

}  // namespace cnf
