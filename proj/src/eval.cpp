#include "cnf/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cnf/errors.hpp"
#include "cnf/parallel.hpp"

namespace cnf {

namespace {

uint64_t fnv1a64(const void* data, size_t bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string dataset_content_hash(const Dataset& dataset) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& inst : dataset.instances) {
    const std::string line = instance_to_json(inst);
    h = fnv1a64(line.data(), line.size(), h);
  }
  return hex64(h);
}

std::string ensemble_param_hash(const Ensemble& ensemble) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& model : ensemble.models) {
    const std::vector<double> flat = model.parameters_flat();
    h = fnv1a64(flat.data(), flat.size() * sizeof(double), h);
  }
  return hex64(h);
}

ReferenceCosts compute_references(const Dataset& dataset) {
  if (dataset.empty()) throw ArgumentError("cannot compute references for an empty dataset");
  ReferenceCosts refs;
  refs.dataset_hash = dataset_content_hash(dataset);
  const bool tsp = dataset.instances.front().kind == ProblemKind::Tsp;
  const bool exact = tsp && dataset.instances.front().n() <= kExactTspLimit;
  refs.solver_name = tsp ? (exact ? "held-karp" : "multistart-nn-2opt") : "sweep+local-search";

  std::vector<double> costs(dataset.size());
  parallel_for(static_cast<int>(dataset.size()), [&](int i) {
    const VrpInstance& inst = dataset.instances[static_cast<size_t>(i)];
    OracleResult res;
    if (!tsp)
      res = solve_cvrp_reference(inst);
    else
      res = exact ? solve_exact_tsp(inst) : solve_tsp_reference(inst);
    costs[static_cast<size_t>(i)] = res.tour.cost;
  });
  for (size_t i = 0; i < dataset.size(); ++i) {
    const std::string& id = dataset.instances[i].id;
    if (refs.by_id.count(id)) throw ArgumentError("duplicate instance id in dataset: " + id);
    refs.by_id.emplace(id, costs[i]);
  }
  return refs;
}

EvalReport eval_collaborative(const Ensemble& ensemble, const Dataset& dataset,
                              const EvalOptions& options, const ReferenceCosts& refs) {
  if (ensemble.size() < 1) throw ArgumentError("empty ensemble");
  if (dataset.empty()) throw ArgumentError("empty dataset");
  if (refs.dataset_hash != dataset_content_hash(dataset))
    throw MissingInputError(
        "reference costs were computed for different data; run compute_references on this "
        "dataset first");
  const auto start = std::chrono::steady_clock::now();

  EvalReport report;
  report.suite = dataset.meta.distribution + "@" + std::to_string(dataset.meta.n);
  report.ensemble_id = ensemble_param_hash(ensemble);
  report.reference_solver = refs.solver_name;
  report.dataset_hash = refs.dataset_hash;
  report.instance_count = static_cast<int>(dataset.size());
  report.per_instance_gaps.resize(dataset.size());

  parallel_for(static_cast<int>(dataset.size()), [&](int i) {
    const VrpInstance& inst = dataset.instances[static_cast<size_t>(i)];
    const auto it = refs.by_id.find(inst.id);
    if (it == refs.by_id.end())
      throw MissingInputError("no reference cost for instance " + inst.id +
                              "; run compute_references first");
    std::vector<VrpInstance> views;
    if (options.use_aug_x8) {
      const auto augs = augment_x8(inst);
      views.assign(augs.begin(), augs.end());
    } else {
      views.push_back(inst);
    }
    double best = std::numeric_limits<double>::infinity();
    for (const auto& model : ensemble.models) {
      const RolloutResult rr = rollout(model, views, RolloutMode::Greedy, options.multistart);
      for (size_t v = 0; v < rr.tours.size(); ++v)
        for (const Tour& tour : rr.tours[v])
          best = std::min(best, tour_cost(inst, tour.sequence));  // cost on original coords
    }
    report.per_instance_gaps[static_cast<size_t>(i)] = opt_gap(best, it->second);
  });

  double mean = 0.0;
  for (double g : report.per_instance_gaps) mean += g;
  mean /= static_cast<double>(report.per_instance_gaps.size());
  double var = 0.0;
  for (double g : report.per_instance_gaps) var += (g - mean) * (g - mean);
  var /= static_cast<double>(report.per_instance_gaps.size());
  report.mean_gap = mean;
  report.std_gap = std::sqrt(var);
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

FixedAdvResult build_fixed_adv(const Dataset& dataset, const PolicySolver& pretrained,
                               const AttackConfig& config) {
  if (dataset.empty()) throw ArgumentError("empty dataset");
  FixedAdvResult out;
  out.dataset.meta = dataset.meta;
  out.dataset.meta.generator = "fixed-adv(" + dataset.meta.generator + ")";
  out.dataset.meta.distribution = "fixed-adv";
  out.dataset.instances.resize(dataset.size());

  std::vector<AttackResult> results(dataset.size());
  parallel_for(static_cast<int>(dataset.size()), [&](int i) {
    AttackConfig per = config;
    per.seed = derive_seed(config.seed, {0xf17edULL, static_cast<uint64_t>(i)});
    results[static_cast<size_t>(i)] =
        local_attack(pretrained, dataset.instances[static_cast<size_t>(i)], per);
  });

  nlohmann::json prov = nlohmann::json::array();
  for (size_t i = 0; i < dataset.size(); ++i) {
    out.dataset.instances[i] = std::move(results[i].instance);
    nlohmann::json entry;
    entry["source_id"] = dataset.instances[i].id;
    entry["steps"] = results[i].steps_applied;
    entry["alpha"] = results[i].alpha_used;
    entry["models"] = results[i].provenance;
    prov.push_back(std::move(entry));
  }
  out.provenance_json = prov.dump(2);
  return out;
}

Dataset build_adv_current(const Ensemble& ensemble, const Dataset& dataset,
                          const AttackConfig& config, int sample_size, uint64_t seed) {
  const int m = ensemble.size();
  const int count = static_cast<int>(dataset.size());
  const int64_t candidates = static_cast<int64_t>(m) * count;
  if (sample_size < 1 || sample_size > candidates)
    throw ArgumentError("sample_size must lie in [1, models x dataset size]");

  // sample candidate slots without generating the unsampled attacks
  std::vector<int64_t> pool(static_cast<size_t>(candidates));
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(derive_seed(seed, {0xadcULL}));
  for (int t = 0; t < sample_size; ++t) {
    const int64_t swap =
        t + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(candidates - t));
    std::swap(pool[static_cast<size_t>(t)], pool[static_cast<size_t>(swap)]);
  }
  pool.resize(static_cast<size_t>(sample_size));
  std::sort(pool.begin(), pool.end());

  Dataset out;
  out.meta = dataset.meta;
  out.meta.generator = "adv-current(" + dataset.meta.generator + ")";
  out.meta.distribution = "adv";
  out.instances.resize(static_cast<size_t>(sample_size));
  parallel_for(sample_size, [&](int t) {
    const int64_t slot = pool[static_cast<size_t>(t)];
    const int j = static_cast<int>(slot / count);
    const int i = static_cast<int>(slot % count);
    AttackConfig per = config;
    per.seed = derive_seed(config.seed, {0xadc2ULL, static_cast<uint64_t>(j),
                                         static_cast<uint64_t>(i)});
    VrpInstance attacked = local_attack(ensemble.models[static_cast<size_t>(j)],
                                        dataset.instances[static_cast<size_t>(i)], per)
                               .instance;
    // one source instance may be sampled under several attacking models;
    // ids must stay unique within the emitted dataset
    attacked.id += "/m" + std::to_string(j);
    out.instances[static_cast<size_t>(t)] = std::move(attacked);
  });
  return out;
}

std::vector<EvalReport> run_benchmark(const Ensemble& ensemble, const std::string& suite_path,
                                      int trained_n, const EvalOptions& options) {
  std::ifstream in(suite_path);
  if (!in) throw MissingInputError("cannot open suite file: " + suite_path);
  nlohmann::json spec;
  try {
    in >> spec;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid suite JSON: ") + e.what());
  }
  if (!spec.is_array()) throw ParseError("suite file must hold a JSON array");

  std::vector<EvalReport> reports;
  for (const auto& entry : spec) {
    EvalReport report;
    report.suite = entry.value("name", "unnamed");
    try {
      Dataset ds;
      std::string distribution = "file";
      if (entry.contains("generator")) {
        const std::string gen = entry.at("generator").get<std::string>();
        const int n = entry.at("n").get<int>();
        const int count = entry.at("count").get<int>();
        const uint64_t seed = entry.value("seed", 0);
        const ProblemKind kind = problem_kind_from_string(entry.value("kind", "tsp"));
        if (gen == "uniform") ds = gen_uniform(n, count, seed, kind);
        else if (gen == "rotation") ds = gen_rotation(n, count, seed);
        else if (gen == "explosion") ds = gen_explosion(n, count, seed);
        else throw ArgumentError("unknown generator: " + gen);
        distribution = gen;
      } else if (entry.contains("path")) {
        ds = read_dataset(entry.at("path").get<std::string>());
        distribution = ds.meta.distribution;
      } else if (entry.contains("tsplib")) {
        VrpInstance inst = read_tsplib(entry.at("tsplib").get<std::string>());
        ds.meta = {"tsplib", 0, inst.n(), "tsplib"};
        ds.instances.push_back(std::move(inst));
        distribution = "tsplib";
      } else {
        throw ArgumentError("suite entry needs generator, path or tsplib");
      }
      if (ds.empty()) throw ArgumentError("suite entry produced no instances");
      for (const auto& inst : ds.instances)
        if (inst.kind != ensemble.kind())
          throw ArgumentError("suite problem kind does not match the ensemble");

      const ReferenceCosts refs = compute_references(ds);
      EvalReport r = eval_collaborative(ensemble, ds, options, refs);
      r.suite = report.suite;
      r.ood = entry.value("ood", distribution != "uniform" || ds.meta.n != trained_n);
      reports.push_back(std::move(r));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "suite entry '%s' skipped: %s\n", report.suite.c_str(), e.what());
      report.error = e.what();
      reports.push_back(std::move(report));
    }
  }
  return reports;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["suite"] = r.suite;
  j["ensemble_id"] = r.ensemble_id;
  j["reference_solver"] = r.reference_solver;
  j["dataset_hash"] = r.dataset_hash;
  j["ood"] = r.ood;
  j["instance_count"] = r.instance_count;
  j["mean_gap"] = r.mean_gap;
  j["std_gap"] = r.std_gap;
  j["wall_time_seconds"] = r.wall_time_seconds;
  j["per_instance_gaps"] = r.per_instance_gaps;
  if (!r.error.empty()) j["error"] = r.error;
  return j.dump(2);
}

void write_reports(const std::string& path, const std::vector<EvalReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(nlohmann::json::parse(report_to_json(r)));
  std::ofstream out(path);
  if (!out) throw MissingInputError("cannot write report: " + path);
  out << arr.dump(2) << '\n';
}

std::vector<EvalReport> read_reports(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open report: " + path);
  nlohmann::json arr;
  try {
    in >> arr;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid report JSON: ") + e.what());
  }
  std::vector<EvalReport> reports;
  for (const auto& j : arr) {
    EvalReport r;
    r.suite = j.value("suite", "");
    r.ensemble_id = j.value("ensemble_id", "");
    r.reference_solver = j.value("reference_solver", "");
    r.dataset_hash = j.value("dataset_hash", "");
    r.ood = j.value("ood", false);
    r.instance_count = j.value("instance_count", 0);
    r.mean_gap = j.value("mean_gap", 0.0);
    r.std_gap = j.value("std_gap", 0.0);
    r.wall_time_seconds = j.value("wall_time_seconds", 0.0);
    if (j.contains("per_instance_gaps"))
      r.per_instance_gaps = j["per_instance_gaps"].get<std::vector<double>>();
    r.error = j.value("error", "");
    reports.push_back(std::move(r));
  }
  return reports;
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << std::left;
  os.width(24);
  os << "suite";
  os << "  mean gap%   std%     time s  n     ref                  ood\n";
  for (const auto& r : reports) {
    std::ostringstream row;
    row << std::left;
    row.width(24);
    row << r.suite.substr(0, 23);
    if (!r.error.empty()) {
      row << "  skipped: " << r.error;
    } else {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "  %8.3f  %7.3f  %8.2f  %-4d  %-19s  %s", r.mean_gap,
                    r.std_gap, r.wall_time_seconds, r.instance_count,
                    r.reference_solver.c_str(), r.ood ? "yes" : "no");
      row << buf;
    }
    os << row.str() << '\n';
  }
  return os.str();
}

// ---- static plots -------------------------------------------------------------

std::string render_gap_bars_svg(const std::vector<EvalReport>& reports) {
  std::vector<const EvalReport*> ok;
  for (const auto& r : reports)
    if (r.error.empty()) ok.push_back(&r);
  const int bar_w = 56, gap_w = 24, left = 60, top = 20, height = 220, bottom = 60;
  const int width = left + static_cast<int>(ok.size()) * (bar_w + gap_w) + 20;
  double max_gap = 1e-9;
  for (const auto* r : ok) max_gap = std::max(max_gap, r->mean_gap);

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
     << top + height + bottom << "'>\n";
  os << "<line x1='" << left << "' y1='" << top + height << "' x2='" << width - 10 << "' y2='"
     << top + height << "' stroke='black'/>\n";
  os << "<line x1='" << left << "' y1='" << top << "' x2='" << left << "' y2='" << top + height
     << "' stroke='black'/>\n";
  os << "<text x='8' y='" << top + 10 << "' font-size='11'>" << max_gap << "%</text>\n";
  int x = left + gap_w / 2;
  for (const auto* r : ok) {
    const double frac = std::max(0.0, r->mean_gap) / max_gap;
    const int h = static_cast<int>(frac * height);
    os << "<rect x='" << x << "' y='" << top + height - h << "' width='" << bar_w
       << "' height='" << h << "' fill='" << (r->ood ? "#cc7722" : "#3366aa") << "'/>\n";
    os << "<text x='" << x << "' y='" << top + height + 14 << "' font-size='10'>"
       << r->suite.substr(0, 10) << "</text>\n";
    char label[32];
    std::snprintf(label, sizeof(label), "%.2f%%", r->mean_gap);
    os << "<text x='" << x << "' y='" << top + height - h - 4 << "' font-size='10'>" << label
       << "</text>\n";
    x += bar_w + gap_w;
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_attention_svg(const std::string& attention_csv_path) {
  std::ifstream in(attention_csv_path);
  if (!in) throw MissingInputError("cannot open attention dump: " + attention_csv_path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty attention dump");
  std::vector<std::vector<double>> rows;
  int line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
    if (cells.size() < 3) throw ParseError("attention row too short", line_number);
    rows.push_back(std::vector<double>(cells.begin() + 2, cells.end()));
  }
  if (rows.empty()) throw ParseError("attention dump has no rows");
  const int n = static_cast<int>(rows.size());
  const int m = static_cast<int>(rows[0].size());
  const int cell_h = std::max(2, 240 / n), cell_w = 48;
  double mx = 1e-12;
  for (const auto& r : rows)
    for (double v : r) mx = std::max(mx, v);

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 60 + m * cell_w << "' height='"
     << 20 + n * cell_h << "'>\n";
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      const int shade = 255 - static_cast<int>(std::clamp(rows[static_cast<size_t>(i)][static_cast<size_t>(j)] / mx, 0.0, 1.0) * 255);
      os << "<rect x='" << 50 + j * cell_w << "' y='" << 10 + i * cell_h << "' width='"
         << cell_w << "' height='" << cell_h << "' fill='rgb(" << shade << "," << shade
         << ",255)'/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace cnf
