#include "cnf/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cnf/errors.hpp"
#include "cnf/parallel.hpp"

namespace cnf {

void PolicyConfig::validate() const {
  if (embed_dim < 1 || encoder_layers < 1 || heads < 1 || ff() < 1)
    throw ArgumentError("policy dimensions must be positive");
  if (embed_dim % heads != 0) throw ArgumentError("embed_dim must be divisible by heads");
  if (!(logit_clip > 0.0)) throw ArgumentError("logit clip must be positive");
}

namespace {

ParamSet build_params(const PolicyConfig& cfg, ProblemKind kind, PolicyParamIndex& index) {
  ParamSet p;
  const int h = cfg.embed_dim;
  const int f = cfg.ff();
  if (kind == ProblemKind::Tsp) {
    index.embed_w = p.add("embed.w", 2, h);
    index.embed_b = p.add("embed.b", 1, h);
  } else {
    index.cust_w = p.add("embed.customer.w", 3, h);
    index.cust_b = p.add("embed.customer.b", 1, h);
    index.depot_w = p.add("embed.depot.w", 2, h);
    index.depot_b = p.add("embed.depot.b", 1, h);
  }
  index.layers.clear();
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    PolicyParamIndex::Layer lay{};
    lay.wq = p.add(pre + "wq", h, h);
    lay.wk = p.add(pre + "wk", h, h);
    lay.wv = p.add(pre + "wv", h, h);
    lay.wo = p.add(pre + "wo", h, h);
    lay.n1g = p.add(pre + "norm1.g", 1, h);
    lay.n1b = p.add(pre + "norm1.b", 1, h);
    lay.ffw1 = p.add(pre + "ff.w1", h, f);
    lay.ffb1 = p.add(pre + "ff.b1", 1, f);
    lay.ffw2 = p.add(pre + "ff.w2", f, h);
    lay.ffb2 = p.add(pre + "ff.b2", 1, h);
    lay.n2g = p.add(pre + "norm2.g", 1, h);
    lay.n2b = p.add(pre + "norm2.b", 1, h);
    index.layers.push_back(lay);
  }
  const int ctx = kind == ProblemKind::Tsp ? 3 * h : 3 * h + 1;
  index.dec_wc = p.add("dec.wc", ctx, h);
  index.dec_wgk = p.add("dec.wgk", h, h);
  index.dec_wgv = p.add("dec.wgv", h, h);
  index.dec_wlk = p.add("dec.wlk", h, h);
  return p;
}

}  // namespace

PolicySolver init_policy(const PolicyConfig& config, ProblemKind kind, uint64_t seed) {
  config.validate();
  PolicySolver solver;
  solver.config = config;
  solver.kind = kind;
  solver.params = build_params(config, kind, solver.index);
  init_params(solver.params, seed);
  return solver;
}

// ---- forward ----------------------------------------------------------------

namespace {

// Taped parameters: leaves for every tensor, in parameter-set order.
std::vector<Var> param_leaves(Tape& tape, const PolicySolver& p, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(p.params.tensors.size());
  for (const Mat& t : p.params.tensors) vars.push_back(tape.leaf(t, requires_grad));
  return vars;
}

Var encode_nodes(Tape& t, const PolicySolver& p, const std::vector<Var>& pv, Var coords,
                 Var demands, int capacity) {
  const PolicyParamIndex& ix = p.index;
  Var x;
  if (p.kind == ProblemKind::Tsp) {
    x = t.linear(coords, pv[ix.embed_w], pv[ix.embed_b]);
  } else {
    const int n = t.val(coords).rows - 1;
    Var cust_xy = t.slice_rows(coords, 0, n);
    Var depot_xy = t.slice_rows(coords, n, n + 1);
    Var feat = t.concat_cols(cust_xy, t.scale(demands, 1.0 / capacity));
    Var emb_c = t.linear(feat, pv[ix.cust_w], pv[ix.cust_b]);
    Var emb_d = t.linear(depot_xy, pv[ix.depot_w], pv[ix.depot_b]);
    x = t.concat_rows(emb_c, emb_d);
  }
  const int hd = p.config.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (const auto& lay : ix.layers) {
    Var q = t.matmul(x, pv[lay.wq]);
    Var k = t.matmul(x, pv[lay.wk]);
    Var v = t.matmul(x, pv[lay.wv]);
    Var mix;
    for (int head = 0; head < p.config.heads; ++head) {
      const int c0 = head * hd, c1 = (head + 1) * hd;
      Var qh = t.slice_cols(q, c0, c1);
      Var kh = t.slice_cols(k, c0, c1);
      Var vh = t.slice_cols(v, c0, c1);
      Var attn = t.softmax_rows(t.scale(t.matmul_nt(qh, kh), att_scale));
      Var mh = t.matmul(attn, vh);
      mix = head == 0 ? mh : t.concat_cols(mix, mh);
    }
    Var att_out = t.matmul(mix, pv[lay.wo]);
    x = t.norm_cols(t.add(x, att_out), pv[lay.n1g], pv[lay.n1b]);
    Var ff = t.linear(t.relu(t.linear(x, pv[lay.ffw1], pv[lay.ffb1])), pv[lay.ffw2], pv[lay.ffb2]);
    x = t.norm_cols(t.add(x, ff), pv[lay.n2g], pv[lay.n2b]);
  }
  return x;
}

struct DecodeRow {
  std::vector<int> seq;
  std::vector<char> visited;  // customers
  int visited_count = 0;
  int first = -1;
  int last = -1;
  int route_load = 0;
  std::vector<char> in_route;  // customers in the current (open) route
  bool done = false;
};

struct DecodeOutcome {
  std::vector<std::vector<int>> seqs;
  Var logp;
};

// Lockstep decode over all start rows. `forced` replays the given sequences
// (teacher forcing); greedy breaks ties toward the lowest node index.
DecodeOutcome decode_with_params(Tape& t, const PolicySolver& p, const std::vector<Var>& pv,
                                 const VrpInstance& instance, Var emb, Var demands,
                                 const std::vector<int>& starts, RolloutMode mode, Rng* rng,
                                 const std::vector<std::vector<int>>* forced) {
  const PolicyParamIndex& ix = p.index;
  const int n = instance.n();
  const bool cvrp = instance.kind == ProblemKind::Cvrp;
  const int tokens = t.val(emb).rows;
  const int K = static_cast<int>(starts.size());
  const int h = p.config.embed_dim;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));
  const int capacity = cvrp ? *instance.capacity : 0;
  const auto* dem = cvrp ? &*instance.demands : nullptr;

  std::vector<DecodeRow> rows(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    DecodeRow& r = rows[static_cast<size_t>(k)];
    r.visited.assign(static_cast<size_t>(n), 0);
    r.in_route.assign(static_cast<size_t>(n), 0);
    const int start = starts[static_cast<size_t>(k)];
    if (start < 0 || start >= n) throw ArgumentError("start node outside customer range");
    if (cvrp) r.seq.push_back(n);
    r.seq.push_back(start);
    r.visited[static_cast<size_t>(start)] = 1;
    r.visited_count = 1;
    r.first = start;
    r.last = start;
    if (cvrp) {
      r.route_load = (*dem)[static_cast<size_t>(start)];
      r.in_route[static_cast<size_t>(start)] = 1;
    }
    if (forced) {
      const auto& f = (*forced)[static_cast<size_t>(k)];
      const int expect = cvrp ? f.at(1) : f.at(0);
      if (expect != start) throw ArgumentError("forced sequence does not begin at its start node");
    }
  }
  std::vector<size_t> fpos(static_cast<size_t>(K), cvrp ? 2 : 1);

  // per-instance projections shared across steps
  Var keys_g = t.matmul(emb, pv[ix.dec_wgk]);
  Var vals_g = t.matmul(emb, pv[ix.dec_wgv]);
  Var keys_l = t.matmul(emb, pv[ix.dec_wlk]);
  Var graph_mean = t.mean_rows(emb);
  const std::vector<int> zero_idx(static_cast<size_t>(K), 0);

  Var logp = t.constant(Mat(K, 1));
  auto all_done = [&]() {
    for (const auto& r : rows)
      if (!r.done) return false;
    return true;
  };

  const int max_steps = cvrp ? 3 * n + 2 : n;
  int step = 0;
  while (!all_done()) {
    if (++step > max_steps) throw FeasibilityError("construction deadlock: no feasible action");

    // context: [graph mean | first | last (| remaining capacity / Q)]
    std::vector<int> first_ids(static_cast<size_t>(K)), last_ids(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
      first_ids[static_cast<size_t>(k)] = rows[static_cast<size_t>(k)].first;
      last_ids[static_cast<size_t>(k)] = rows[static_cast<size_t>(k)].last;
    }
    Var ctx = t.concat_cols(t.concat_cols(t.gather_rows(graph_mean, zero_idx),
                                          t.gather_rows(emb, first_ids)),
                            t.gather_rows(emb, last_ids));
    if (cvrp) {
      // remaining capacity of the open route, as a function of the demand
      // leaf so demand perturbations see this input too
      Mat served(K, n);
      for (int k = 0; k < K; ++k)
        for (int c = 0; c < n; ++c)
          served(k, c) = rows[static_cast<size_t>(k)].in_route[static_cast<size_t>(c)] ? 1.0 : 0.0;
      Var route_demand = t.matmul(t.constant(std::move(served)), demands);
      Var remaining = t.scale(t.sub(t.constant(Mat(K, 1, static_cast<double>(capacity))),
                                    route_demand),
                              1.0 / capacity);
      ctx = t.concat_cols(ctx, remaining);
    }
    Var query = t.matmul(ctx, pv[ix.dec_wc]);

    // feasibility mask
    Mat mask(K, tokens);
    for (int k = 0; k < K; ++k) {
      const DecodeRow& r = rows[static_cast<size_t>(k)];
      if (r.done) {
        mask(k, tokens - 1) = 1.0;  // pinned to the depot, probability one
        continue;
      }
      bool any_customer = false;
      for (int c = 0; c < n; ++c) {
        if (r.visited[static_cast<size_t>(c)]) continue;
        if (cvrp && r.route_load + (*dem)[static_cast<size_t>(c)] > capacity) continue;
        mask(k, c) = 1.0;
        any_customer = true;
      }
      if (cvrp && r.last != n) mask(k, n) = 1.0;  // depot, unless just visited
      if (!cvrp && !any_customer)
        throw FeasibilityError("construction deadlock: no feasible action");
    }

    Var glimpse = t.matmul(t.softmax_rows_masked(t.scale(t.matmul_nt(query, keys_g), inv_sqrt_h),
                                                 mask),
                           vals_g);
    Var logits = t.scale(t.tanh(t.scale(t.matmul_nt(glimpse, keys_l), inv_sqrt_h)),
                         p.config.logit_clip);
    Var probs = t.softmax_rows_masked(logits, mask);
    const Mat& pm = t.val(probs);

    // choose actions
    std::vector<int> actions(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
      const DecodeRow& r = rows[static_cast<size_t>(k)];
      double u = mode == RolloutMode::Sample && rng ? rng->uniform() : 0.0;
      if (r.done) {
        actions[static_cast<size_t>(k)] = tokens - 1;
        continue;
      }
      if (forced) {
        const auto& f = (*forced)[static_cast<size_t>(k)];
        if (fpos[static_cast<size_t>(k)] >= f.size())
          throw ArgumentError("forced sequence shorter than the decode");
        actions[static_cast<size_t>(k)] = f[fpos[static_cast<size_t>(k)]++];
        continue;
      }
      if (mode == RolloutMode::Greedy) {
        int best = -1;
        for (int c = 0; c < tokens; ++c)
          if (mask(k, c) != 0.0 && (best < 0 || pm(k, c) > pm(k, best))) best = c;
        actions[static_cast<size_t>(k)] = best;
      } else {
        double cum = 0.0;
        int pick = -1;
        for (int c = 0; c < tokens; ++c) {
          if (mask(k, c) == 0.0) continue;
          cum += pm(k, c);
          pick = c;
          if (u < cum) break;
        }
        actions[static_cast<size_t>(k)] = pick;
      }
    }

    logp = t.add(logp, t.log(t.pick_per_row(probs, actions)));

    // state update
    for (int k = 0; k < K; ++k) {
      DecodeRow& r = rows[static_cast<size_t>(k)];
      if (r.done) continue;
      const int a = actions[static_cast<size_t>(k)];
      if (mask(k, a) == 0.0) throw FeasibilityError("infeasible action selected");
      r.seq.push_back(a);
      if (cvrp && a == n) {
        r.route_load = 0;
        std::fill(r.in_route.begin(), r.in_route.end(), 0);
        r.last = n;
        if (r.visited_count == n) r.done = true;
        continue;
      }
      r.visited[static_cast<size_t>(a)] = 1;
      ++r.visited_count;
      r.last = a;
      if (cvrp) {
        r.route_load += (*dem)[static_cast<size_t>(a)];
        r.in_route[static_cast<size_t>(a)] = 1;
      } else if (r.visited_count == n) {
        r.done = true;
      }
    }
  }

  DecodeOutcome out;
  out.seqs.reserve(static_cast<size_t>(K));
  for (auto& r : rows) out.seqs.push_back(std::move(r.seq));
  out.logp = logp;
  return out;
}

std::vector<int> default_starts(const VrpInstance& instance, bool multistart) {
  if (!multistart) return {0};
  std::vector<int> starts(static_cast<size_t>(instance.n()));
  std::iota(starts.begin(), starts.end(), 0);
  return starts;
}

struct BuiltForward {
  Var coords;
  Var demands;
  Var emb;
  std::vector<Var> pv;
};

BuiltForward build_encoder(Tape& tape, const PolicySolver& policy, const VrpInstance& instance,
                           bool inputs_require_grad, bool params_require_grad,
                           const std::vector<double>* demand_override = nullptr) {
  const bool cvrp = instance.kind == ProblemKind::Cvrp;
  const int n = instance.n();
  Mat coord_mat(cvrp ? n + 1 : n, 2);
  for (int i = 0; i < n; ++i) {
    coord_mat(i, 0) = instance.coords[static_cast<size_t>(i)].x;
    coord_mat(i, 1) = instance.coords[static_cast<size_t>(i)].y;
  }
  if (cvrp) {
    coord_mat(n, 0) = instance.depot->x;
    coord_mat(n, 1) = instance.depot->y;
  }
  BuiltForward b;
  b.pv = param_leaves(tape, policy, params_require_grad);
  b.coords = tape.leaf(std::move(coord_mat), inputs_require_grad);
  if (cvrp) {
    Mat d(n, 1);
    for (int i = 0; i < n; ++i)
      d(i, 0) = demand_override ? (*demand_override)[static_cast<size_t>(i)]
                                : (*instance.demands)[static_cast<size_t>(i)];
    b.demands = tape.leaf(std::move(d), inputs_require_grad);
  }
  b.emb = encode_nodes(tape, policy, b.pv, b.coords, b.demands,
                       cvrp ? *instance.capacity : 0);
  return b;
}

}  // namespace

// ---- public operations -------------------------------------------------------

RolloutResult rollout(const PolicySolver& policy, const std::vector<VrpInstance>& instances,
                      RolloutMode mode, bool multistart, uint64_t seed) {
  RolloutResult out;
  out.policy_version = policy.version;
  out.sampled = mode == RolloutMode::Sample;
  out.multistart = multistart;
  const int count = static_cast<int>(instances.size());
  out.tours.resize(static_cast<size_t>(count));
  out.log_probs.resize(static_cast<size_t>(count));
  out.costs.resize(static_cast<size_t>(count));
  out.starts.resize(static_cast<size_t>(count));

  parallel_for(count, [&](int i) {
    const VrpInstance& inst = instances[static_cast<size_t>(i)];
    if (inst.kind != policy.kind)
      throw ArgumentError("instance kind does not match the policy");
    Tape tape(false);
    BuiltForward b = build_encoder(tape, policy, inst, false, false);
    const std::vector<int> starts = default_starts(inst, multistart);
    Rng rng(derive_seed(seed, {0x2011ULL, static_cast<uint64_t>(i)}));
    DecodeOutcome dec = decode_with_params(tape, policy, b.pv, inst, b.emb, b.demands, starts,
                                           mode, &rng, nullptr);
    auto& tours = out.tours[static_cast<size_t>(i)];
    auto& lps = out.log_probs[static_cast<size_t>(i)];
    auto& costs = out.costs[static_cast<size_t>(i)];
    const Mat& lp = tape.val(dec.logp);
    for (size_t k = 0; k < dec.seqs.size(); ++k) {
      Tour tour;
      tour.sequence = dec.seqs[k];
      tour.cost = tour_cost(inst, tour.sequence);
      tours.push_back(std::move(tour));
      lps.push_back(lp(static_cast<int>(k), 0));
      costs.push_back(tours.back().cost);
    }
    out.starts[static_cast<size_t>(i)] = starts;
  });
  return out;
}

ForcedForward build_forced_forward(Tape& tape, const PolicySolver& policy,
                                   const VrpInstance& instance,
                                   const std::vector<std::vector<int>>& sequences,
                                   bool inputs_require_grad, bool params_require_grad,
                                   const std::vector<double>* demand_override) {
  const bool cvrp = instance.kind == ProblemKind::Cvrp;
  BuiltForward b = build_encoder(tape, policy, instance, inputs_require_grad,
                                 params_require_grad, demand_override);
  std::vector<int> starts;
  starts.reserve(sequences.size());
  for (const auto& s : sequences) starts.push_back(cvrp ? s.at(1) : s.at(0));
  DecodeOutcome dec = decode_with_params(tape, policy, b.pv, instance, b.emb, b.demands, starts,
                                         RolloutMode::Greedy, nullptr, &sequences);
  ForcedForward f;
  f.coords = b.coords;
  f.demands = b.demands;
  f.logp = dec.logp;
  if (params_require_grad) f.param_vars = b.pv;
  return f;
}

double weighted_logp(const PolicySolver& policy, const VrpInstance& instance,
                     const std::vector<std::vector<int>>& sequences,
                     const std::vector<double>& weights, std::vector<Mat>* grads) {
  if (weights.size() != sequences.size())
    throw ArgumentError("weight count does not match sequence count");
  Tape tape(grads != nullptr);
  ForcedForward f = build_forced_forward(tape, policy, instance, sequences, false,
                                         grads != nullptr);
  Mat w(static_cast<int>(weights.size()), 1);
  for (size_t k = 0; k < weights.size(); ++k) w(static_cast<int>(k), 0) = weights[k];
  Var loss = tape.sum_all(tape.hadamard(f.logp, tape.constant(std::move(w))));
  const double value = tape.val(loss)(0, 0);
  if (grads) {
    tape.backward(loss);
    for (size_t i = 0; i < f.param_vars.size(); ++i)
      axpy(1.0, tape.grad_of(f.param_vars[i]), (*grads)[i]);
  }
  return value;
}

Mat encode_instance(const PolicySolver& policy, const VrpInstance& instance) {
  Tape tape(false);
  BuiltForward b = build_encoder(tape, policy, instance, false, false);
  return tape.val(b.emb);
}

std::vector<Mat> reinforce_gradient(const PolicySolver& policy,
                                    const std::vector<VrpInstance>& instances,
                                    const RolloutResult& rr, EmaBaseline* ema,
                                    const std::vector<double>* instance_weights) {
  if (!rr.sampled) throw ArgumentError("reinforce_gradient requires a sampled rollout");
  if (rr.policy_version != policy.version)
    throw ArgumentError("rollout was produced by a different policy version");
  if (rr.tours.size() != instances.size())
    throw ArgumentError("rollout does not cover the instance batch");
  const int count = static_cast<int>(instances.size());
  if (count == 0) throw ArgumentError("empty batch");
  if (instance_weights && static_cast<int>(instance_weights->size()) != count)
    throw ArgumentError("instance weight count does not match the batch");

  // single-start fallback baseline: EMA of the batch mean cost
  double ema_baseline = 0.0;
  bool use_ema = !rr.multistart;
  if (use_ema) {
    double batch_mean = 0.0;
    int m = 0;
    for (const auto& cs : rr.costs)
      for (double c : cs) {
        batch_mean += c;
        ++m;
      }
    batch_mean /= m;
    if (ema) {
      ema_baseline = ema->ready ? ema->value : batch_mean;
      ema->update(batch_mean);
    } else {
      ema_baseline = batch_mean;
    }
  }

  std::vector<Mat> total = zeros_like(policy.params);
  parallel_chunks<std::vector<Mat>>(
      count, [&] { return zeros_like(policy.params); },
      [&](std::vector<Mat>& acc, int i) {
        const auto& costs = rr.costs[static_cast<size_t>(i)];
        const auto& tours = rr.tours[static_cast<size_t>(i)];
        const int K = static_cast<int>(costs.size());
        double baseline = ema_baseline;
        if (!use_ema) {
          baseline = std::accumulate(costs.begin(), costs.end(), 0.0) / K;
        }
        std::vector<std::vector<int>> seqs;
        seqs.reserve(static_cast<size_t>(K));
        for (const Tour& tr : tours) seqs.push_back(tr.sequence);
        const double iw = instance_weights
                              ? (*instance_weights)[static_cast<size_t>(i)]
                              : 1.0 / static_cast<double>(count);
        std::vector<double> w(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k)
          w[static_cast<size_t>(k)] = iw * (costs[static_cast<size_t>(k)] - baseline) / K;
        weighted_logp(policy, instances[static_cast<size_t>(i)], seqs, w, &acc);
      },
      [&](std::vector<Mat>& acc) { accumulate(total, acc); });
  return total;
}

void apply_gradient_update(PolicySolver& policy, const std::vector<Mat>& grads,
                           AdamState& optimizer, const StepOptions& options) {
  if (!all_finite(grads)) throw NumericError("non-finite REINFORCE gradient; step aborted");
  adam_step(policy.params, grads, optimizer, options.lr, options.weight_decay);
  if (!policy.params.finite()) throw NumericError("non-finite parameters after update");
  ++policy.version;
}

void train_step(PolicySolver& policy, const std::vector<VrpInstance>& instances,
                AdamState& optimizer, const StepOptions& options, EmaBaseline* ema,
                uint64_t seed) {
  if (instances.empty()) throw ArgumentError("train_step on an empty batch");
  RolloutResult rr = rollout(policy, instances, RolloutMode::Sample, policy.config.multistart,
                             seed);
  std::vector<Mat> grads = reinforce_gradient(policy, instances, rr, ema);
  apply_gradient_update(policy, grads, optimizer, options);
}

}  // namespace cnf
