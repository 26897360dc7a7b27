#include "cnf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cnf/errors.hpp"
#include "cnf/parallel.hpp"
#include "cnf/tape.hpp"

namespace cnf {

namespace {

constexpr uint64_t kDataTag = 0xda7a;
constexpr uint64_t kAttackTag = 0xa77c;
constexpr uint64_t kGlobalTag = 0x91a7;
constexpr uint64_t kTrainTag = 0x7217;
constexpr uint64_t kSelectTag = 0x5e1e;

}  // namespace

double TrainConfig::lr_at(int64_t consumed) const {
  const double boundary = (1.0 - lr_decay_frac) * static_cast<double>(total_instances);
  return static_cast<double>(consumed) < boundary ? lr : lr * lr_decay_factor;
}

void TrainConfig::validate() const {
  if (n < 2) throw ArgumentError("instance size must be >= 2");
  if (total_instances < 1) throw ArgumentError("total_instances must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (models < 1) throw ArgumentError("models must be >= 1");
  if (attack_steps < 0) throw ArgumentError("attack_steps must be >= 0");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ArgumentError("negative optimizer rates");
  if (lr_decay_frac < 0.0 || lr_decay_frac > 1.0)
    throw ArgumentError("lr_decay_frac must lie in [0, 1]");
  if (topk < 0 || topk > (models + 2) * batch_size)
    throw ArgumentError("topk outside the collected batch");
  policy.validate();
}

void apply_config_line(TrainConfig& config, const std::string& key, const std::string& value) {
  auto as_i64 = [&]() { return static_cast<int64_t>(std::stoll(value)); };
  auto as_int = [&]() { return std::stoi(value); };
  auto as_f64 = [&]() { return std::stod(value); };
  auto as_bool = [&]() {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ArgumentError("boolean key expects 0/1/true/false: " + key);
  };
  if (key == "kind") config.kind = problem_kind_from_string(value);
  else if (key == "n") config.n = as_int();
  else if (key == "total_instances") config.total_instances = as_i64();
  else if (key == "batch_size") config.batch_size = as_int();
  else if (key == "models") config.models = as_int();
  else if (key == "attack_steps") config.attack_steps = as_int();
  else if (key == "lr") config.lr = as_f64();
  else if (key == "weight_decay") config.weight_decay = as_f64();
  else if (key == "lr_decay_factor") config.lr_decay_factor = as_f64();
  else if (key == "lr_decay_frac") config.lr_decay_frac = as_f64();
  else if (key == "seed") config.seed = static_cast<uint64_t>(std::stoull(value));
  else if (key == "checkpoint_interval") config.checkpoint_interval = as_i64();
  else if (key == "eval_interval") config.eval_interval = as_i64();
  else if (key == "embed_dim") config.policy.embed_dim = as_int();
  else if (key == "encoder_layers") config.policy.encoder_layers = as_int();
  else if (key == "heads") config.policy.heads = as_int();
  else if (key == "ff_dim") config.policy.ff_dim = as_int();
  else if (key == "logit_clip") config.policy.logit_clip = as_f64();
  else if (key == "multistart") config.policy.multistart = as_bool();
  else if (key == "router_embed_dim") config.router.embed_dim = as_int();
  else if (key == "strategy") config.strategy = route_strategy_from_string(value);
  else if (key == "topk") config.topk = as_int();
  else if (key == "use_global_attack") config.use_global_attack = as_bool();
  else if (key == "perturb_demands") config.perturb_demands = as_bool();
  else if (key == "attack_alpha") config.attack_alpha = as_f64();
  else if (key == "at_include_clean") config.at_include_clean = as_bool();
  else if (key == "divtrain_lambda") config.divtrain_lambda = as_f64();
  else if (key == "out_dir") config.out_dir = value;
  else throw ArgumentError("unknown training config key: " + key);
}

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open training config: " + path);
  TrainConfig config;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw ParseError("expected key=value", line_number);
      continue;
    }
    auto trim = [](std::string s) {
      const size_t b = s.find_first_not_of(" \t\r");
      const size_t e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    try {
      apply_config_line(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ArgumentError& e) {
      throw ParseError(e.what(), line_number);
    }
  }
  return config;
}

std::string to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::Pretrain: return "pretrain";
    case TrainMethod::VanillaAT: return "at";
    case TrainMethod::HAC: return "hac";
    case TrainMethod::DivTrain: return "divtrain";
    case TrainMethod::CNF: return "cnf";
  }
  return "pretrain";
}

TrainMethod train_method_from_string(const std::string& s) {
  if (s == "pretrain") return TrainMethod::Pretrain;
  if (s == "at") return TrainMethod::VanillaAT;
  if (s == "hac") return TrainMethod::HAC;
  if (s == "divtrain") return TrainMethod::DivTrain;
  if (s == "cnf") return TrainMethod::CNF;
  throw ArgumentError("unknown training method: " + s);
}

// ---- binary checkpoint serialization ----------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'N', 'F', 'C', 'K', '0', '0', '1'};

void put_raw(std::ostream& out, const void* p, size_t bytes) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
}
template <class T>
void put(std::ostream& out, T v) {
  put_raw(out, &v, sizeof(T));
}
void put_string(std::ostream& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  put_raw(out, s.data(), s.size());
}
void put_mat(std::ostream& out, const Mat& m) {
  put<uint32_t>(out, static_cast<uint32_t>(m.rows));
  put<uint32_t>(out, static_cast<uint32_t>(m.cols));
  put_raw(out, m.a.data(), m.size() * sizeof(double));
}

void get_raw(std::istream& in, void* p, size_t bytes) {
  if (!in.read(static_cast<char*>(p), static_cast<std::streamsize>(bytes)))
    throw IncompatibleCheckpointError("checkpoint truncated");
}
template <class T>
T get(std::istream& in) {
  T v;
  get_raw(in, &v, sizeof(T));
  return v;
}
std::string get_string(std::istream& in) {
  const uint32_t len = get<uint32_t>(in);
  std::string s(len, '\0');
  get_raw(in, s.data(), len);
  return s;
}
Mat get_mat(std::istream& in) {
  const uint32_t rows = get<uint32_t>(in);
  const uint32_t cols = get<uint32_t>(in);
  Mat m(static_cast<int>(rows), static_cast<int>(cols));
  get_raw(in, m.a.data(), m.size() * sizeof(double));
  return m;
}

void put_params(std::ostream& out, const ParamSet& p) {
  put<uint32_t>(out, static_cast<uint32_t>(p.tensors.size()));
  for (size_t i = 0; i < p.tensors.size(); ++i) {
    put_string(out, p.names[i]);
    put_mat(out, p.tensors[i]);
  }
}

void get_params_into(std::istream& in, ParamSet& p) {
  const uint32_t count = get<uint32_t>(in);
  if (count != p.tensors.size())
    throw IncompatibleCheckpointError("parameter tensor count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in);
    Mat m = get_mat(in);
    if (name != p.names[i] || !m.same_shape(p.tensors[i]))
      throw IncompatibleCheckpointError("parameter tensor layout mismatch: " + name);
    p.tensors[i] = std::move(m);
  }
}

void put_adam(std::ostream& out, const AdamState& a) {
  put<int64_t>(out, a.t);
  put<uint32_t>(out, static_cast<uint32_t>(a.m.size()));
  for (size_t i = 0; i < a.m.size(); ++i) {
    put_mat(out, a.m[i]);
    put_mat(out, a.v[i]);
  }
}

AdamState get_adam(std::istream& in) {
  AdamState a;
  a.t = get<int64_t>(in);
  const uint32_t count = get<uint32_t>(in);
  a.m.reserve(count);
  a.v.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    a.m.push_back(get_mat(in));
    a.v.push_back(get_mat(in));
  }
  return a;
}

void put_policy_config(std::ostream& out, const PolicyConfig& c) {
  put<int32_t>(out, c.embed_dim);
  put<int32_t>(out, c.encoder_layers);
  put<int32_t>(out, c.heads);
  put<int32_t>(out, c.ff_dim);
  put<double>(out, c.logit_clip);
  put<uint8_t>(out, c.multistart ? 1 : 0);
}

PolicyConfig get_policy_config(std::istream& in) {
  PolicyConfig c;
  c.embed_dim = get<int32_t>(in);
  c.encoder_layers = get<int32_t>(in);
  c.heads = get<int32_t>(in);
  c.ff_dim = get<int32_t>(in);
  c.logit_clip = get<double>(in);
  c.multistart = get<uint8_t>(in) != 0;
  return c;
}

void put_policy(std::ostream& out, const PolicySolver& p) {
  put<uint8_t>(out, p.kind == ProblemKind::Tsp ? 0 : 1);
  put_policy_config(out, p.config);
  put<uint64_t>(out, p.version);
  put_params(out, p.params);
}

PolicySolver get_policy(std::istream& in) {
  const ProblemKind kind = get<uint8_t>(in) == 0 ? ProblemKind::Tsp : ProblemKind::Cvrp;
  const PolicyConfig config = get_policy_config(in);
  const uint64_t version = get<uint64_t>(in);
  PolicySolver p = init_policy(config, kind, 0);
  get_params_into(in, p.params);
  p.version = version;
  return p;
}

void put_config(std::ostream& out, const TrainConfig& c) {
  put<uint8_t>(out, c.kind == ProblemKind::Tsp ? 0 : 1);
  put<int32_t>(out, c.n);
  put<int64_t>(out, c.total_instances);
  put<int32_t>(out, c.batch_size);
  put<int32_t>(out, c.models);
  put<int32_t>(out, c.attack_steps);
  put<double>(out, c.lr);
  put<double>(out, c.weight_decay);
  put<double>(out, c.lr_decay_factor);
  put<double>(out, c.lr_decay_frac);
  put<uint64_t>(out, c.seed);
  put<int64_t>(out, c.checkpoint_interval);
  put<int64_t>(out, c.eval_interval);
  put_policy_config(out, c.policy);
  put<int32_t>(out, c.router.embed_dim);
  put<double>(out, c.router.logit_clip);
  put<uint8_t>(out, static_cast<uint8_t>(c.strategy));
  put<int32_t>(out, c.topk);
  put<uint8_t>(out, c.use_global_attack ? 1 : 0);
  put<uint8_t>(out, c.perturb_demands ? 1 : 0);
  put<uint8_t>(out, c.attack_alpha ? 1 : 0);
  put<double>(out, c.attack_alpha.value_or(0.0));
  put<uint8_t>(out, c.at_include_clean ? 1 : 0);
  put<double>(out, c.divtrain_lambda);
  put_string(out, c.out_dir);
}

TrainConfig get_config(std::istream& in) {
  TrainConfig c;
  c.kind = get<uint8_t>(in) == 0 ? ProblemKind::Tsp : ProblemKind::Cvrp;
  c.n = get<int32_t>(in);
  c.total_instances = get<int64_t>(in);
  c.batch_size = get<int32_t>(in);
  c.models = get<int32_t>(in);
  c.attack_steps = get<int32_t>(in);
  c.lr = get<double>(in);
  c.weight_decay = get<double>(in);
  c.lr_decay_factor = get<double>(in);
  c.lr_decay_frac = get<double>(in);
  c.seed = get<uint64_t>(in);
  c.checkpoint_interval = get<int64_t>(in);
  c.eval_interval = get<int64_t>(in);
  c.policy = get_policy_config(in);
  c.router.embed_dim = get<int32_t>(in);
  c.router.logit_clip = get<double>(in);
  c.strategy = static_cast<RouteStrategy>(get<uint8_t>(in));
  c.topk = get<int32_t>(in);
  c.use_global_attack = get<uint8_t>(in) != 0;
  c.perturb_demands = get<uint8_t>(in) != 0;
  const bool has_alpha = get<uint8_t>(in) != 0;
  const double alpha = get<double>(in);
  if (has_alpha) c.attack_alpha = alpha;
  c.at_include_clean = get<uint8_t>(in) != 0;
  c.divtrain_lambda = get<double>(in);
  c.out_dir = get_string(in);
  return c;
}

}  // namespace

void checkpoint_save(const TrainerState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingInputError("cannot open checkpoint for writing: " + path);
  put_raw(out, kMagic, sizeof(kMagic));
  put<uint8_t>(out, static_cast<uint8_t>(state.method));
  put_config(out, state.config);
  put<uint32_t>(out, static_cast<uint32_t>(state.ensemble.models.size()));
  for (const auto& m : state.ensemble.models) put_policy(out, m);
  put<uint8_t>(out, state.router ? 1 : 0);
  if (state.router) {
    put<int32_t>(out, state.router->config.embed_dim);
    put<double>(out, state.router->config.logit_clip);
    put<uint8_t>(out, state.router->kind == ProblemKind::Tsp ? 0 : 1);
    put<int32_t>(out, state.router->models);
    put<uint64_t>(out, state.router->version);
    put_params(out, state.router->params);
  }
  put<uint32_t>(out, static_cast<uint32_t>(state.model_opt.size()));
  for (const auto& a : state.model_opt) put_adam(out, a);
  put_adam(out, state.router_opt);
  put<uint32_t>(out, static_cast<uint32_t>(state.emas.size()));
  for (const auto& e : state.emas) {
    put<double>(out, e.value);
    put<uint8_t>(out, e.ready ? 1 : 0);
    put<double>(out, e.decay);
  }
  put<int64_t>(out, state.step);
  put<int64_t>(out, state.instances_consumed);
  if (!out) throw MissingInputError("checkpoint write failed: " + path);
}

TrainerState checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open checkpoint: " + path);
  char magic[8];
  get_raw(in, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IncompatibleCheckpointError("not a trainer checkpoint (or unsupported version): " + path);
  TrainerState state;
  state.method = static_cast<TrainMethod>(get<uint8_t>(in));
  state.config = get_config(in);
  const uint32_t model_count = get<uint32_t>(in);
  state.ensemble.models.reserve(model_count);
  for (uint32_t i = 0; i < model_count; ++i) state.ensemble.models.push_back(get_policy(in));
  if (get<uint8_t>(in) != 0) {
    RouterConfig rc;
    rc.embed_dim = get<int32_t>(in);
    rc.logit_clip = get<double>(in);
    const ProblemKind kind = get<uint8_t>(in) == 0 ? ProblemKind::Tsp : ProblemKind::Cvrp;
    const int models = get<int32_t>(in);
    const uint64_t version = get<uint64_t>(in);
    NeuralRouter router = init_router(rc, kind, models, 0);
    get_params_into(in, router.params);
    router.version = version;
    state.router = std::move(router);
  }
  const uint32_t opt_count = get<uint32_t>(in);
  state.model_opt.reserve(opt_count);
  for (uint32_t i = 0; i < opt_count; ++i) state.model_opt.push_back(get_adam(in));
  state.router_opt = get_adam(in);
  const uint32_t ema_count = get<uint32_t>(in);
  state.emas.resize(ema_count);
  for (auto& e : state.emas) {
    e.value = get<double>(in);
    e.ready = get<uint8_t>(in) != 0;
    e.decay = get<double>(in);
  }
  state.step = get<int64_t>(in);
  state.instances_consumed = get<int64_t>(in);
  return state;
}

PolicySolver load_policy_for(ProblemKind kind, const std::string& path) {
  TrainerState state = checkpoint_load(path);
  if (state.ensemble.models.empty())
    throw IncompatibleCheckpointError("checkpoint holds no models: " + path);
  PolicySolver p = std::move(state.ensemble.models.front());
  if (p.kind != kind)
    throw IncompatibleCheckpointError("checkpoint is for " + to_string(p.kind) +
                                      ", requested " + to_string(kind));
  return p;
}

// ---- shared step machinery ----------------------------------------------------

namespace {

Dataset sample_clean(const TrainConfig& c, int64_t step) {
  return gen_uniform(c.n, c.batch_size, derive_seed(c.seed, {kDataTag, static_cast<uint64_t>(step)}),
                     c.kind);
}

AttackConfig attack_config(const TrainConfig& c, uint64_t tag, int64_t step, int model,
                           int instance) {
  AttackConfig a;
  a.steps = c.attack_steps;
  a.alpha = c.attack_alpha;
  a.perturb_coords = true;
  a.perturb_demands = c.kind == ProblemKind::Cvrp && c.perturb_demands;
  a.seed = derive_seed(c.seed, {tag, static_cast<uint64_t>(step),
                                static_cast<uint64_t>(model), static_cast<uint64_t>(instance)});
  return a;
}

uint64_t train_seed(const TrainConfig& c, int64_t step, int model) {
  return derive_seed(c.seed, {kTrainTag, static_cast<uint64_t>(step),
                              static_cast<uint64_t>(model)});
}

// Per-model local adversarial batches, parallel over (model, instance).
std::vector<std::vector<VrpInstance>> make_local_batches(const Ensemble& ensemble,
                                                         const std::vector<VrpInstance>& clean,
                                                         const TrainConfig& c, int64_t step) {
  const int m = ensemble.size();
  const int b = static_cast<int>(clean.size());
  std::vector<std::vector<VrpInstance>> local(static_cast<size_t>(m));
  for (auto& l : local) l.resize(static_cast<size_t>(b));
  parallel_for(m * b, [&](int t) {
    const int j = t / b;
    const int i = t % b;
    local[static_cast<size_t>(j)][static_cast<size_t>(i)] =
        local_attack(ensemble.models[static_cast<size_t>(j)], clean[static_cast<size_t>(i)],
                     attack_config(c, kAttackTag, step, j, i))
            .instance;
  });
  return local;
}

// Sampled rollout + REINFORCE + Adam; returns the batch's mean best-start
// sampled cost (the step metric).
double sampled_train_update(PolicySolver& policy, const std::vector<VrpInstance>& batch,
                            AdamState& opt, const StepOptions& options, EmaBaseline* ema,
                            uint64_t seed, const std::vector<double>* weights = nullptr) {
  const RolloutResult rr =
      rollout(policy, batch, RolloutMode::Sample, policy.config.multistart, seed);
  const std::vector<Mat> grads = reinforce_gradient(policy, batch, rr, ema, weights);
  apply_gradient_update(policy, grads, opt, options);
  double total = 0.0;
  for (const auto& cs : rr.costs) {
    double best = cs[0];
    for (double v : cs) best = std::min(best, v);
    total += best;
  }
  return total / static_cast<double>(batch.size());
}

CostMatrix eval_cost_matrix(const Ensemble& ensemble, const std::vector<VrpInstance>& x) {
  CostMatrix cm;
  cm.values = Mat(static_cast<int>(x.size()), ensemble.size());
  for (int j = 0; j < ensemble.size(); ++j) {
    const RolloutResult rr =
        rollout(ensemble.models[static_cast<size_t>(j)], x, RolloutMode::Greedy, false);
    for (size_t i = 0; i < x.size(); ++i)
      cm.values(static_cast<int>(i), j) = rr.costs[i][0];
  }
  return cm;
}

struct StepOutcome {
  double clean_cost = std::nan("");
  double adv_cost = std::nan("");
  std::vector<int64_t> selections;
  double router_reward = std::nan("");
  double extra = std::nan("");
  Mat routing_probs;  // instance-softmax of P (CNF only)
  std::vector<int> owners;
};

// one CSV row per training step
class MetricsLog {
public:
  MetricsLog(const std::string& dir, int models) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/metrics.csv";
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (fresh) {
      out_ << "step,consumed,lr,clean_cost,adv_cost";
      for (int j = 0; j < models; ++j) out_ << ",sel_" << j;
      out_ << ",router_reward,extra\n";
    }
  }

  void row(int64_t step, int64_t consumed, double lr, const StepOutcome& o, int models) {
    if (!out_.is_open()) return;
    out_ << step << ',' << consumed << ',' << lr << ',' << o.clean_cost << ',' << o.adv_cost;
    for (int j = 0; j < models; ++j)
      out_ << ',' << (j < static_cast<int>(o.selections.size()) ? o.selections[static_cast<size_t>(j)] : 0);
    out_ << ',' << o.router_reward << ',' << o.extra << '\n';
    out_.flush();
  }

private:
  std::ofstream out_;
};

void dump_attention(const std::string& dir, int64_t step, const StepOutcome& o) {
  if (dir.empty() || o.routing_probs.rows == 0) return;
  std::ofstream out(dir + "/attention_" + std::to_string(step) + ".csv");
  out << "instance,owner";
  for (int j = 0; j < o.routing_probs.cols; ++j) out << ",p_" << j;
  out << '\n';
  for (int i = 0; i < o.routing_probs.rows; ++i) {
    out << i << ',' << o.owners[static_cast<size_t>(i)];
    for (int j = 0; j < o.routing_probs.cols; ++j) out << ',' << o.routing_probs(i, j);
    out << '\n';
  }
}

// ---- per-method steps ---------------------------------------------------------

StepOutcome pretrain_step(TrainerState& s) {
  const TrainConfig& c = s.config;
  const Dataset batch = sample_clean(c, s.step);
  StepOutcome o;
  o.clean_cost = sampled_train_update(s.ensemble.models[0], batch.instances, s.model_opt[0],
                                      {c.lr_at(s.instances_consumed), c.weight_decay},
                                      &s.emas[0], train_seed(c, s.step, 0));
  return o;
}

StepOutcome vanilla_at_step(TrainerState& s) {
  const TrainConfig& c = s.config;
  const Dataset clean = sample_clean(c, s.step);
  const auto local = make_local_batches(s.ensemble, clean.instances, c, s.step);
  const double lr = c.lr_at(s.instances_consumed);
  StepOutcome o;
  double adv_total = 0.0;
  for (int j = 0; j < s.ensemble.size(); ++j) {
    std::vector<VrpInstance> batch;
    if (c.at_include_clean)
      batch.insert(batch.end(), clean.instances.begin(), clean.instances.end());
    batch.insert(batch.end(), local[static_cast<size_t>(j)].begin(),
                 local[static_cast<size_t>(j)].end());
    adv_total += sampled_train_update(s.ensemble.models[static_cast<size_t>(j)], batch,
                                      s.model_opt[static_cast<size_t>(j)],
                                      {lr, c.weight_decay}, &s.emas[static_cast<size_t>(j)],
                                      train_seed(c, s.step, j));
  }
  o.adv_cost = adv_total / s.ensemble.size();
  return o;
}

StepOutcome hac_step(TrainerState& s) {
  const TrainConfig& c = s.config;
  const Dataset clean = sample_clean(c, s.step);
  const auto local = make_local_batches(s.ensemble, clean.instances, c, s.step);
  // mixed pool: clean then every model's local batch (1 : M)
  std::vector<VrpInstance> pool = clean.instances;
  for (const auto& l : local) pool.insert(pool.end(), l.begin(), l.end());

  const double progress =
      static_cast<double>(s.instances_consumed) / static_cast<double>(c.total_instances);
  const double temp = hac_temperature(progress);
  const double lr = c.lr_at(s.instances_consumed);

  StepOutcome o;
  o.extra = temp;
  double adv_total = 0.0;
  for (int j = 0; j < s.ensemble.size(); ++j) {
    std::vector<double> hardness(pool.size());
    parallel_for(static_cast<int>(pool.size()), [&](int i) {
      hardness[static_cast<size_t>(i)] =
          hardness_loss(s.ensemble.models[static_cast<size_t>(j)], pool[static_cast<size_t>(i)]);
    });
    const std::vector<double> weights = hac_weights(hardness, temp);
    adv_total += sampled_train_update(s.ensemble.models[static_cast<size_t>(j)], pool,
                                      s.model_opt[static_cast<size_t>(j)],
                                      {lr, c.weight_decay}, &s.emas[static_cast<size_t>(j)],
                                      train_seed(c, s.step, j), &weights);
  }
  o.adv_cost = adv_total / s.ensemble.size();
  return o;
}

// Input gradient of model's REINFORCE surrogate on one instance with the
// advantage detached: (c - b) * d log p(tau) / d coords, flattened.
struct ProbeGrad {
  std::vector<double> flat;
  std::vector<int> sequence;
  double advantage = 0.0;
};

ProbeGrad probe_input_grad(const PolicySolver& policy, const VrpInstance& instance) {
  ProbeGrad out;
  const RolloutResult single = rollout(policy, {instance}, RolloutMode::Greedy, false);
  const RolloutResult multi = rollout(policy, {instance}, RolloutMode::Greedy, true);
  double baseline = 0.0;
  for (double v : multi.costs[0]) baseline += v;
  baseline /= static_cast<double>(multi.costs[0].size());
  out.sequence = single.tours[0][0].sequence;
  out.advantage = single.costs[0][0] - baseline;

  Tape tape;
  ForcedForward f = build_forced_forward(tape, policy, instance, {out.sequence}, true, false);
  tape.backward(tape.sum_all(f.logp));
  const Mat g = tape.grad_of(f.coords);
  out.flat.resize(g.size());
  for (size_t i = 0; i < g.size(); ++i) out.flat[i] = out.advantage * g.a[i];
  return out;
}

StepOutcome divtrain_step(TrainerState& s) {
  const TrainConfig& c = s.config;
  const int m = s.ensemble.size();
  const int b = c.batch_size;
  const Dataset clean = sample_clean(c, s.step);
  const auto local = make_local_batches(s.ensemble, clean.instances, c, s.step);
  const double lr = c.lr_at(s.instances_consumed);

  // base REINFORCE gradients on each model's own adversarial batch
  std::vector<std::vector<Mat>> grads(static_cast<size_t>(m));
  double adv_total = 0.0;
  for (int j = 0; j < m; ++j) {
    const RolloutResult rr = rollout(s.ensemble.models[static_cast<size_t>(j)],
                                     local[static_cast<size_t>(j)], RolloutMode::Sample,
                                     c.policy.multistart, train_seed(c, s.step, j));
    grads[static_cast<size_t>(j)] =
        reinforce_gradient(s.ensemble.models[static_cast<size_t>(j)],
                           local[static_cast<size_t>(j)], rr, &s.emas[static_cast<size_t>(j)]);
    double best_total = 0.0;
    for (const auto& cs : rr.costs) {
      double best = cs[0];
      for (double v : cs) best = std::min(best, v);
      best_total += best;
    }
    adv_total += best_total / static_cast<double>(rr.costs.size());
  }

  // pass 1: probe input-gradients on the shared clean batch
  std::vector<std::vector<ProbeGrad>> probes(static_cast<size_t>(m));
  for (auto& p : probes) p.resize(static_cast<size_t>(b));
  parallel_for(m * b, [&](int t) {
    const int j = t / b;
    const int i = t % b;
    probes[static_cast<size_t>(j)][static_cast<size_t>(i)] = probe_input_grad(
        s.ensemble.models[static_cast<size_t>(j)], clean.instances[static_cast<size_t>(i)]);
  });
  std::vector<std::vector<double>> flat(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j)
    for (const auto& p : probes[static_cast<size_t>(j)])
      flat[static_cast<size_t>(j)].insert(flat[static_cast<size_t>(j)].end(), p.flat.begin(),
                                          p.flat.end());

  const double penalty = gradient_similarity_penalty(flat, c.divtrain_lambda);

  // d penalty / d g_a: lambda * softmax over pairs of exp(cos) routed
  // through the cosine, with the other model's gradient held fixed
  std::vector<double> norms(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j) {
    double sq = 0.0;
    for (double v : flat[static_cast<size_t>(j)]) sq += v * v;
    norms[static_cast<size_t>(j)] = std::sqrt(sq);
  }
  auto cosine = [&](int a2, int b2) {
    if (norms[static_cast<size_t>(a2)] == 0.0 || norms[static_cast<size_t>(b2)] == 0.0)
      return 0.0;
    double dot = 0.0;
    for (size_t i = 0; i < flat[static_cast<size_t>(a2)].size(); ++i)
      dot += flat[static_cast<size_t>(a2)][i] * flat[static_cast<size_t>(b2)][i];
    return dot / (norms[static_cast<size_t>(a2)] * norms[static_cast<size_t>(b2)]);
  };
  double exp_sum = 0.0;
  for (int a2 = 0; a2 < m; ++a2)
    for (int b2 = a2 + 1; b2 < m; ++b2) exp_sum += std::exp(cosine(a2, b2));

  std::vector<std::vector<double>> u(static_cast<size_t>(m));
  for (int a2 = 0; a2 < m; ++a2)
    u[static_cast<size_t>(a2)].assign(flat[static_cast<size_t>(a2)].size(), 0.0);
  for (int a2 = 0; a2 < m; ++a2) {
    if (norms[static_cast<size_t>(a2)] == 0.0) continue;
    for (int b2 = 0; b2 < m; ++b2) {
      if (b2 == a2 || norms[static_cast<size_t>(b2)] == 0.0) continue;
      const int lo = std::min(a2, b2), hi = std::max(a2, b2);
      const double cos_ab = cosine(lo, hi);
      const double w = c.divtrain_lambda * std::exp(cos_ab) / exp_sum;
      const double na = norms[static_cast<size_t>(a2)], nb = norms[static_cast<size_t>(b2)];
      for (size_t i = 0; i < u[static_cast<size_t>(a2)].size(); ++i)
        u[static_cast<size_t>(a2)][i] +=
            w * (flat[static_cast<size_t>(b2)][i] / (na * nb) -
                 cos_ab * flat[static_cast<size_t>(a2)][i] / (na * na));
    }
  }

  // pass 2: route d penalty / d g_a through the network into the parameters
  const size_t per_instance = probes[0][0].flat.size();
  for (int j = 0; j < m; ++j) {
    if (norms[static_cast<size_t>(j)] == 0.0) continue;
    parallel_chunks<std::vector<Mat>>(
        b, [&] { return zeros_like(s.ensemble.models[static_cast<size_t>(j)].params); },
        [&](std::vector<Mat>& acc, int i) {
          const ProbeGrad& p = probes[static_cast<size_t>(j)][static_cast<size_t>(i)];
          Tape tape;
          ForcedForward f =
              build_forced_forward(tape, s.ensemble.models[static_cast<size_t>(j)],
                                   clean.instances[static_cast<size_t>(i)], {p.sequence}, true,
                                   true);
          const std::vector<Var> sym = tape.symbolic_grad(tape.sum_all(f.logp), {f.coords});
          if (!sym[0].valid()) return;
          Mat uw(tape.val(f.coords).rows, 2);
          for (size_t k2 = 0; k2 < per_instance; ++k2)
            uw.a[k2] = p.advantage * u[static_cast<size_t>(j)][static_cast<size_t>(i) * per_instance + k2];
          Var sdot = tape.sum_all(tape.hadamard(sym[0], tape.constant(std::move(uw))));
          tape.backward(sdot);
          for (size_t t2 = 0; t2 < f.param_vars.size(); ++t2)
            axpy(1.0, tape.grad_of(f.param_vars[t2]), acc[t2]);
        },
        [&](std::vector<Mat>& acc) { accumulate(grads[static_cast<size_t>(j)], acc); });
  }

  for (int j = 0; j < m; ++j)
    apply_gradient_update(s.ensemble.models[static_cast<size_t>(j)],
                          grads[static_cast<size_t>(j)], s.model_opt[static_cast<size_t>(j)],
                          {lr, c.weight_decay});

  StepOutcome o;
  o.adv_cost = adv_total / m;
  o.extra = penalty;
  return o;
}

StepOutcome cnf_step(TrainerState& s) {
  const TrainConfig& c = s.config;
  const int m = s.ensemble.size();
  const int b = c.batch_size;
  const double lr = c.lr_at(s.instances_consumed);

  // inner maximization
  AdversarialBatch adv;
  adv.clean = sample_clean(c, s.step).instances;
  adv.local = make_local_batches(s.ensemble, adv.clean, c, s.step);
  if (c.use_global_attack) {
    adv.global_.resize(static_cast<size_t>(b));
    adv.global_provenance.resize(static_cast<size_t>(b));
    std::vector<const PolicySolver*> models;
    for (const auto& model : s.ensemble.models) models.push_back(&model);
    parallel_for(b, [&](int i) {
      const AttackResult r = global_attack(
          models, adv.clean[static_cast<size_t>(i)],
          attack_config(c, kGlobalTag, s.step, /*model=*/0, i));
      adv.global_[static_cast<size_t>(i)] = r.instance;
      adv.global_provenance[static_cast<size_t>(i)] = r.provenance;
    });
  }
  adv.validate();

  // collected set X and its provenance
  std::vector<VrpInstance> x = adv.clean;
  BatchProvenance prov;
  prov.owner.assign(adv.clean.size(), BatchProvenance::kClean);
  for (int j = 0; j < m; ++j) {
    x.insert(x.end(), adv.local[static_cast<size_t>(j)].begin(),
             adv.local[static_cast<size_t>(j)].end());
    prov.owner.insert(prov.owner.end(), adv.local[static_cast<size_t>(j)].size(), j);
  }
  x.insert(x.end(), adv.global_.begin(), adv.global_.end());
  prov.owner.insert(prov.owner.end(), adv.global_.size(), BatchProvenance::kGlobal);
  const int expected = (c.use_global_attack ? m + 2 : m + 1) * b;
  if (static_cast<int>(x.size()) != expected)
    throw NumericError("collected batch has wrong size");

  // outer minimization
  const CostMatrix before = eval_cost_matrix(s.ensemble, x);
  const Mat logits = route_logits(*s.router, x, before);
  const Assignment asg =
      select(c.strategy, logits, c.k(), derive_seed(c.seed, {kSelectTag, static_cast<uint64_t>(s.step)}),
             &prov);

  // load balancing audit (model-choice strategies assign exactly k;
  // selftrain assigns clean + own local + global)
  if (c.strategy == RouteStrategy::MTopK || c.strategy == RouteStrategy::MSample ||
      c.strategy == RouteStrategy::Random) {
    for (const auto& list : asg.per_model)
      if (static_cast<int>(list.size()) != c.k())
        throw NumericError("load balancing violated: model received " +
                           std::to_string(list.size()) + " instances, expected " +
                           std::to_string(c.k()));
  } else if (c.strategy == RouteStrategy::SelfTrain) {
    const size_t expect_self = adv.clean.size() + adv.local[0].size() + adv.global_.size();
    for (const auto& list : asg.per_model)
      if (list.size() != expect_self)
        throw NumericError("selftrain assignment size violated");
  }

  for (int j = 0; j < m; ++j) {
    std::vector<VrpInstance> batch;
    batch.reserve(asg.per_model[static_cast<size_t>(j)].size());
    for (int idx : asg.per_model[static_cast<size_t>(j)])
      batch.push_back(x[static_cast<size_t>(idx)]);
    if (batch.empty()) continue;  // instance-choice strategies may starve a model
    sampled_train_update(s.ensemble.models[static_cast<size_t>(j)], batch,
                         s.model_opt[static_cast<size_t>(j)], {lr, c.weight_decay},
                         &s.emas[static_cast<size_t>(j)], train_seed(c, s.step, j));
  }

  StepOutcome o;
  o.selections.reserve(asg.per_model.size());
  for (const auto& list : asg.per_model)
    o.selections.push_back(static_cast<int64_t>(list.size()));

  const bool router_driven =
      c.strategy == RouteStrategy::MTopK || c.strategy == RouteStrategy::MSample ||
      c.strategy == RouteStrategy::ITopK || c.strategy == RouteStrategy::ISample;
  if (router_driven) {
    const CostMatrix after = eval_cost_matrix(s.ensemble, x);
    const std::vector<double> rewards = router_reward(before, after);
    router_update(*s.router, x, before, asg, rewards, s.router_opt, lr, c.weight_decay);
    double total = 0.0;
    for (double r : rewards) total += r;
    o.router_reward = total / static_cast<double>(rewards.size());
  }

  // step metrics from the cost matrix: collaborative minimum per row
  double clean_total = 0.0, adv_total = 0.0;
  int adv_count = 0;
  for (int i = 0; i < before.instances(); ++i) {
    double best = before.values(i, 0);
    for (int j = 1; j < m; ++j) best = std::min(best, before.values(i, j));
    if (prov.owner[static_cast<size_t>(i)] == BatchProvenance::kClean) {
      clean_total += best;
    } else {
      adv_total += best;
      ++adv_count;
    }
  }
  o.clean_cost = clean_total / static_cast<double>(adv.clean.size());
  if (adv_count > 0) o.adv_cost = adv_total / adv_count;
  o.routing_probs = instance_softmax(logits);
  o.owners = prov.owner;
  return o;
}

}  // namespace

// ---- public entry points -------------------------------------------------------

std::vector<double> hac_weights(const std::vector<double>& hardness, double temperature) {
  if (hardness.empty()) throw ArgumentError("empty hardness vector");
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
  std::vector<double> w(hardness.size());
  double mx = -1e300;
  for (size_t i = 0; i < hardness.size(); ++i) {
    w[i] = std::tanh(hardness[i]) / temperature;
    mx = std::max(mx, w[i]);
  }
  double sum = 0.0;
  for (double& v : w) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

double hac_temperature(double progress) {
  const double clamped = std::clamp(progress, 0.0, 1.0);
  return 20.0 - 19.0 * clamped;
}

double gradient_similarity_penalty(const std::vector<std::vector<double>>& grads,
                                   double lambda) {
  const int m = static_cast<int>(grads.size());
  if (m < 2) throw ArgumentError("the penalty needs at least two gradient vectors");
  std::vector<double> norms(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j) {
    double sq = 0.0;
    for (double v : grads[static_cast<size_t>(j)]) sq += v * v;
    norms[static_cast<size_t>(j)] = std::sqrt(sq);
  }
  double exp_sum = 0.0;
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) {
      double cos_ab = 0.0;
      if (norms[static_cast<size_t>(a)] > 0.0 && norms[static_cast<size_t>(b)] > 0.0) {
        double dot = 0.0;
        for (size_t i = 0; i < grads[static_cast<size_t>(a)].size(); ++i)
          dot += grads[static_cast<size_t>(a)][i] * grads[static_cast<size_t>(b)][i];
        cos_ab = dot / (norms[static_cast<size_t>(a)] * norms[static_cast<size_t>(b)]);
      }
      exp_sum += std::exp(cos_ab);
    }
  }
  return lambda * std::log(exp_sum);
}

TrainerState make_trainer_state(TrainMethod method, const PolicySolver* pretrained,
                                const TrainConfig& config) {
  config.validate();
  if (method != TrainMethod::Pretrain) {
    if (!pretrained) throw ArgumentError("a pretrained model is required for " + to_string(method));
    if (pretrained->kind != config.kind)
      throw IncompatibleCheckpointError("pretrained model is for " + to_string(pretrained->kind) +
                                        ", run wants " + to_string(config.kind));
  }
  if (method == TrainMethod::DivTrain && config.models < 2)
    throw ArgumentError("diversity training needs at least two models");

  TrainerState s;
  s.method = method;
  s.config = config;
  const int m = method == TrainMethod::Pretrain ? 1 : config.models;
  s.ensemble.models.reserve(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j) {
    if (method == TrainMethod::Pretrain) {
      s.ensemble.models.push_back(
          init_policy(config.policy, config.kind, derive_seed(config.seed, {0x1417ULL})));
    } else {
      s.ensemble.models.push_back(*pretrained);  // all copies start from the warm start
    }
  }
  s.model_opt.resize(static_cast<size_t>(m));
  s.emas.resize(static_cast<size_t>(m));
  if (method == TrainMethod::CNF)
    s.router = init_router(config.router, config.kind, config.models,
                           derive_seed(config.seed, {0x40977ULL}));
  return s;
}

void run_training(TrainerState& s) {
  const TrainConfig& c = s.config;
  c.validate();
  if (!c.out_dir.empty()) std::filesystem::create_directories(c.out_dir);
  MetricsLog metrics(c.out_dir, s.ensemble.size());

  while (s.instances_consumed < c.total_instances) {
    const double lr = c.lr_at(s.instances_consumed);
    StepOutcome outcome;
    try {
      switch (s.method) {
        case TrainMethod::Pretrain: outcome = pretrain_step(s); break;
        case TrainMethod::VanillaAT: outcome = vanilla_at_step(s); break;
        case TrainMethod::HAC: outcome = hac_step(s); break;
        case TrainMethod::DivTrain: outcome = divtrain_step(s); break;
        case TrainMethod::CNF: outcome = cnf_step(s); break;
      }
    } catch (const NumericError&) {
      if (!c.out_dir.empty()) checkpoint_save(s, c.out_dir + "/abort.ck");
      throw;
    }

    const int64_t before = s.instances_consumed;
    s.step += 1;
    s.instances_consumed += c.batch_size;
    metrics.row(s.step, s.instances_consumed, lr, outcome, s.ensemble.size());

    auto crossed = [&](int64_t interval) {
      return interval > 0 && before / interval != s.instances_consumed / interval;
    };
    if (crossed(c.eval_interval) && s.method == TrainMethod::CNF && !c.out_dir.empty())
      dump_attention(c.out_dir, s.step, outcome);
    if (crossed(c.checkpoint_interval) && !c.out_dir.empty())
      checkpoint_save(s, c.out_dir + "/ck_" + std::to_string(s.instances_consumed) + ".ck");
  }
  if (!c.out_dir.empty()) checkpoint_save(s, c.out_dir + "/final.ck");
}

PolicySolver pretrain(const TrainConfig& config) {
  TrainerState s = make_trainer_state(TrainMethod::Pretrain, nullptr, config);
  run_training(s);
  return std::move(s.ensemble.models.front());
}

Ensemble train_vanilla_at(const PolicySolver& pretrained, const TrainConfig& config) {
  TrainerState s = make_trainer_state(TrainMethod::VanillaAT, &pretrained, config);
  run_training(s);
  return std::move(s.ensemble);
}

Ensemble train_hac(const PolicySolver& pretrained, const TrainConfig& config) {
  TrainerState s = make_trainer_state(TrainMethod::HAC, &pretrained, config);
  run_training(s);
  return std::move(s.ensemble);
}

Ensemble train_divtrain(const PolicySolver& pretrained, const TrainConfig& config) {
  TrainerState s = make_trainer_state(TrainMethod::DivTrain, &pretrained, config);
  run_training(s);
  return std::move(s.ensemble);
}

CnfResult train_cnf(const PolicySolver& pretrained, const TrainConfig& config) {
  TrainerState s = make_trainer_state(TrainMethod::CNF, &pretrained, config);
  run_training(s);
  return {std::move(s.ensemble), std::move(*s.router)};
}

}  // namespace cnf
