// Command-line front end: data generation, training, robustness evaluation
// and report plotting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cnf/errors.hpp"
#include "cnf/eval.hpp"
#include "cnf/trainer.hpp"

namespace {

using namespace cnf;

constexpr int kExitOk = 0;
constexpr int kExitArgument = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMissing = 4;

struct TrainCli {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<int> models;
  std::optional<int> attack_steps;
  std::optional<int> n;
  std::optional<int64_t> total_instances;
  std::optional<int> batch_size;
  std::optional<std::string> strategy;
  std::string out_dir;
};

TrainConfig resolve_config(const TrainCli& cli, ProblemKind default_kind) {
  TrainConfig cfg;
  cfg.kind = default_kind;
  if (!cli.config_path.empty()) cfg = parse_train_config(cli.config_path);
  if (cli.seed) cfg.seed = *cli.seed;
  if (cli.models) cfg.models = *cli.models;
  if (cli.attack_steps) cfg.attack_steps = *cli.attack_steps;
  if (cli.n) cfg.n = *cli.n;
  if (cli.total_instances) cfg.total_instances = *cli.total_instances;
  if (cli.batch_size) cfg.batch_size = *cli.batch_size;
  if (cli.strategy) cfg.strategy = route_strategy_from_string(*cli.strategy);
  if (!cli.out_dir.empty()) cfg.out_dir = cli.out_dir;
  return cfg;
}

void add_train_flags(CLI::App* app, TrainCli& cli) {
  app->add_option("--config", cli.config_path, "training config file (key = value lines)");
  app->add_option("--seed", cli.seed, "run seed");
  app->add_option("--models", cli.models, "ensemble size M");
  app->add_option("--attack-steps", cli.attack_steps, "inner maximization steps T");
  app->add_option("--n", cli.n, "instance size");
  app->add_option("--total-instances", cli.total_instances, "training instance budget");
  app->add_option("--batch-size", cli.batch_size, "batch size B");
  app->add_option("--out", cli.out_dir, "output directory");
}

Ensemble load_ensemble(const std::string& path) {
  TrainerState state = checkpoint_load(path);
  if (state.ensemble.models.empty())
    throw IncompatibleCheckpointError("checkpoint holds no models: " + path);
  return std::move(state.ensemble);
}

int run(int argc, char** argv) {
  CLI::App app{"Collaborative adversarial training for neural routing solvers"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  std::string gen_kind = "tsp", gen_dist = "uniform", gen_out;
  int gen_n = 20, gen_count = 1000;
  uint64_t gen_seed = 0;
  gen->add_option("--kind", gen_kind, "tsp | cvrp")->capture_default_str();
  gen->add_option("--dist", gen_dist, "uniform | rotation | explosion")->capture_default_str();
  gen->add_option("--n", gen_n, "instance size")->capture_default_str();
  gen->add_option("--count", gen_count, "instance count")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output dataset (JSON lines)")->required();

  // ---- pretrain ----
  auto* pre = app.add_subcommand("pretrain", "train one policy on clean instances");
  TrainCli pre_cli;
  std::string pre_kind = "tsp";
  add_train_flags(pre, pre_cli);
  pre->add_option("--kind", pre_kind, "tsp | cvrp")->capture_default_str();

  // ---- build-fixed-adv ----
  auto* fav = app.add_subcommand("build-fixed-adv",
                                 "attack a dataset against a frozen pretrained model");
  std::string fav_ck, fav_data, fav_out;
  int fav_steps = 8;
  uint64_t fav_seed = 0;
  std::optional<double> fav_alpha;
  fav->add_option("--checkpoint", fav_ck, "pretrained checkpoint")->required();
  fav->add_option("--data", fav_data, "clean dataset file")->required();
  fav->add_option("--attack-steps", fav_steps, "attack iterations T")->capture_default_str();
  fav->add_option("--alpha", fav_alpha, "fixed step size (default: sampled from 1..100)");
  fav->add_option("--seed", fav_seed, "attack seed")->capture_default_str();
  fav->add_option("--out", fav_out, "output dataset file")->required();

  // ---- train ----
  auto* train = app.add_subcommand("train", "adversarially train an ensemble");
  TrainCli train_cli;
  std::string train_method = "cnf", train_ck, train_strategy;
  add_train_flags(train, train_cli);
  train->add_option("--method", train_method, "at | hac | divtrain | cnf")->required();
  train->add_option("--checkpoint", train_ck, "pretrained warm-start checkpoint")->required();
  train->add_option("--strategy", train_strategy,
                    "routing strategy: m-topk | m-sample | i-topk | i-sample | random | selftrain");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate robustness metrics");
  std::string eval_ck, eval_data, eval_fixed, eval_out;
  bool eval_adv = false, eval_no_aug = false, eval_no_multistart = false;
  int eval_adv_sample = 0;
  uint64_t eval_seed = 0;
  int eval_attack_steps = 8;
  eval->add_option("--ensemble", eval_ck, "trainer checkpoint with the models")->required();
  eval->add_option("--data", eval_data, "clean dataset (the Uniform metric)")->required();
  eval->add_option("--fixed-adv", eval_fixed, "fixed adversarial dataset file");
  eval->add_flag("--adv", eval_adv, "also attack the current models (white-box metric)");
  eval->add_option("--adv-sample", eval_adv_sample,
                   "white-box sample size (default: dataset size)");
  eval->add_option("--attack-steps", eval_attack_steps, "white-box attack iterations")
      ->capture_default_str();
  eval->add_option("--seed", eval_seed, "white-box sampling seed")->capture_default_str();
  eval->add_flag("--no-aug-x8", eval_no_aug, "disable the x8 augmentation");
  eval->add_flag("--no-multistart", eval_no_multistart, "single-start greedy decoding");
  eval->add_option("--out", eval_out, "report JSON path");

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "run a benchmark suite file");
  std::string bench_ck, bench_suite, bench_out;
  int bench_trained_n = 20;
  bool bench_no_aug = false;
  bench->add_option("--ensemble", bench_ck, "trainer checkpoint")->required();
  bench->add_option("--suite", bench_suite, "suite JSON file")->required();
  bench->add_option("--trained-n", bench_trained_n, "training size for OOD tagging")
      ->capture_default_str();
  bench->add_flag("--no-aug-x8", bench_no_aug, "disable the x8 augmentation");
  bench->add_option("--out", bench_out, "output directory");

  // ---- plot ----
  auto* plot = app.add_subcommand("plot", "render static SVG artifacts");
  std::string plot_report, plot_attention, plot_out;
  plot->add_option("--report", plot_report, "report JSON to plot as gap bars");
  plot->add_option("--attention", plot_attention, "router attention CSV to plot as a heatmap");
  plot->add_option("--out", plot_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    const ProblemKind kind = problem_kind_from_string(gen_kind);
    Dataset ds;
    if (gen_dist == "uniform") ds = gen_uniform(gen_n, gen_count, gen_seed, kind);
    else if (gen_dist == "rotation") ds = gen_rotation(gen_n, gen_count, gen_seed);
    else if (gen_dist == "explosion") ds = gen_explosion(gen_n, gen_count, gen_seed);
    else throw ArgumentError("unknown distribution: " + gen_dist);
    if (kind == ProblemKind::Cvrp && gen_dist != "uniform")
      throw ArgumentError("rotation/explosion generators are TSP-only");
    write_dataset(gen_out, ds);
    std::cout << "wrote " << ds.size() << " instances to " << gen_out << "\n";
    return kExitOk;
  }

  if (pre->parsed()) {
    TrainConfig cfg = resolve_config(pre_cli, problem_kind_from_string(pre_kind));
    if (cfg.out_dir.empty()) throw ArgumentError("pretrain needs --out (or out_dir in the config)");
    TrainerState state = make_trainer_state(TrainMethod::Pretrain, nullptr, cfg);
    run_training(state);
    std::cout << "pretrained checkpoint: " << cfg.out_dir << "/final.ck\n";
    return kExitOk;
  }

  if (fav->parsed()) {
    const Dataset ds = read_dataset(fav_data);
    const PolicySolver pretrained =
        load_policy_for(ds.instances.front().kind, fav_ck);
    AttackConfig cfg;
    cfg.steps = fav_steps;
    cfg.alpha = fav_alpha;
    cfg.perturb_demands = ds.instances.front().kind == ProblemKind::Cvrp;
    cfg.seed = fav_seed;
    const FixedAdvResult result = build_fixed_adv(ds, pretrained, cfg);
    write_dataset(fav_out, result.dataset);
    std::ofstream prov(fav_out + ".provenance.json");
    prov << result.provenance_json << '\n';
    std::cout << "wrote " << result.dataset.size() << " attacked instances to " << fav_out
              << " (hash " << dataset_content_hash(result.dataset) << ")\n";
    return kExitOk;
  }

  if (train->parsed()) {
    TrainCli cli = train_cli;
    if (!train_strategy.empty()) cli.strategy = train_strategy;
    TrainConfig cfg = resolve_config(cli, ProblemKind::Tsp);
    const TrainMethod method = train_method_from_string(train_method);
    // the warm start fixes the problem kind
    TrainerState probe = checkpoint_load(train_ck);
    cfg.kind = probe.ensemble.models.at(0).kind;
    cfg.policy = probe.ensemble.models.at(0).config;
    if (cfg.out_dir.empty()) throw ArgumentError("train needs --out (or out_dir in the config)");
    const PolicySolver pretrained = load_policy_for(cfg.kind, train_ck);
    TrainerState state = make_trainer_state(method, &pretrained, cfg);
    run_training(state);
    std::cout << to_string(method) << " ensemble checkpoint: " << cfg.out_dir << "/final.ck\n";
    return kExitOk;
  }

  if (eval->parsed()) {
    const Ensemble ensemble = load_ensemble(eval_ck);
    const EvalOptions options{!eval_no_aug, !eval_no_multistart};
    std::vector<EvalReport> reports;

    Dataset clean = read_dataset(eval_data);
    clean.meta.distribution = "uniform";
    {
      const ReferenceCosts refs = compute_references(clean);
      EvalReport r = eval_collaborative(ensemble, clean, options, refs);
      r.suite = "uniform";
      reports.push_back(std::move(r));
    }
    if (!eval_fixed.empty()) {
      Dataset fixed = read_dataset(eval_fixed);
      fixed.meta.distribution = "fixed-adv";
      const ReferenceCosts refs = compute_references(fixed);
      EvalReport r = eval_collaborative(ensemble, fixed, options, refs);
      r.suite = "fixed-adv";
      reports.push_back(std::move(r));
    }
    if (eval_adv) {
      AttackConfig acfg;
      acfg.steps = eval_attack_steps;
      acfg.perturb_demands = clean.instances.front().kind == ProblemKind::Cvrp;
      acfg.seed = eval_seed;
      const int sample = eval_adv_sample > 0 ? eval_adv_sample
                                             : static_cast<int>(clean.size());
      Dataset adv = build_adv_current(ensemble, clean, acfg, sample, eval_seed);
      const ReferenceCosts refs = compute_references(adv);
      EvalReport r = eval_collaborative(ensemble, adv, options, refs);
      r.suite = "adv";
      reports.push_back(std::move(r));
    }

    std::cout << format_report_table(reports);
    if (!eval_out.empty()) {
      write_reports(eval_out, reports);
      std::cout << "report written to " << eval_out << "\n";
    }
    return kExitOk;
  }

  if (bench->parsed()) {
    const Ensemble ensemble = load_ensemble(bench_ck);
    const auto reports =
        run_benchmark(ensemble, bench_suite, bench_trained_n, {!bench_no_aug, true});
    std::cout << format_report_table(reports);
    if (!bench_out.empty()) {
      std::filesystem::create_directories(bench_out);
      write_reports(bench_out + "/reports.json", reports);
      std::ofstream svg(bench_out + "/gap_bars.svg");
      svg << render_gap_bars_svg(reports);
      std::cout << "reports and plot written to " << bench_out << "\n";
    }
    return kExitOk;
  }

  if (plot->parsed()) {
    if (plot_report.empty() && plot_attention.empty())
      throw ArgumentError("plot needs --report and/or --attention");
    std::filesystem::create_directories(plot_out);
    if (!plot_report.empty()) {
      const auto reports = read_reports(plot_report);
      std::ofstream svg(plot_out + "/gap_bars.svg");
      svg << render_gap_bars_svg(reports);
      std::cout << "wrote " << plot_out << "/gap_bars.svg\n";
    }
    if (!plot_attention.empty()) {
      std::ofstream svg(plot_out + "/attention.svg");
      svg << render_attention_svg(plot_attention);
      std::cout << "wrote " << plot_out << "/attention.svg\n";
    }
    return kExitOk;
  }

  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const MissingInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IncompatibleCheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitArgument;
  }
}
