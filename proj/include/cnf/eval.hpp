#ifndef CNF_EVAL_HPP
#define CNF_EVAL_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "cnf/attack.hpp"
#include "cnf/oracles.hpp"
#include "cnf/trainer.hpp"

namespace cnf {

// Reference costs for one dataset, keyed by instance id and pinned to the
// dataset's content hash. TSP uses the exact solver up to its size limit and
// the multistart surrogate beyond; CVRP uses the sweep + local search
// reference.
struct ReferenceCosts {
  std::unordered_map<std::string, double> by_id;
  std::string solver_name;
  std::string dataset_hash;
};

ReferenceCosts compute_references(const Dataset& dataset);

struct EvalOptions {
  bool use_aug_x8 = true;
  bool multistart = true;
};

struct EvalReport {
  std::string suite;
  std::string ensemble_id;
  std::string reference_solver;
  std::string dataset_hash;
  bool ood = false;
  int instance_count = 0;
  double mean_gap = 0.0;  // percent
  double std_gap = 0.0;
  double wall_time_seconds = 0.0;
  std::vector<double> per_instance_gaps;
  std::string error;  // nonempty when a benchmark entry was skipped
};

// Greedy decode per model (optionally multistart and min over the eight
// dihedral augmentations); the best cost across models is scored against the
// reference. Throws MissingInputError when a reference is missing or was
// computed for different data.
EvalReport eval_collaborative(const Ensemble& ensemble, const Dataset& dataset,
                              const EvalOptions& options, const ReferenceCosts& refs);

// The black-box robustness set: every instance attacked against the frozen
// pretrained model. Deterministic in (dataset, checkpoint, config).
struct FixedAdvResult {
  Dataset dataset;
  std::string provenance_json;
};
FixedAdvResult build_fixed_adv(const Dataset& dataset, const PolicySolver& pretrained,
                               const AttackConfig& config);

// The white-box robustness set: each model attacks every instance
// (models x |dataset| candidates), then a uniform subsample of sample_size.
Dataset build_adv_current(const Ensemble& ensemble, const Dataset& dataset,
                          const AttackConfig& config, int sample_size, uint64_t seed);

// Benchmark suites from a JSON file: an array of entries, each either
//   {"name":.., "generator":"uniform|rotation|explosion", "kind":"tsp|cvrp",
//    "n":.., "count":.., "seed":..}
// or {"name":.., "path": "dataset.jsonl"} or {"name":.., "tsplib": "x.tsp"}.
// Entries off the training distribution (or size) are tagged OOD; unreadable
// entries are skipped with a warning and recorded in the report list.
std::vector<EvalReport> run_benchmark(const Ensemble& ensemble, const std::string& suite_path,
                                      int trained_n, const EvalOptions& options);

std::string report_to_json(const EvalReport& report);
void write_reports(const std::string& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_reports(const std::string& path);
std::string format_report_table(const std::vector<EvalReport>& reports);

// Static SVG artifacts.
std::string render_gap_bars_svg(const std::vector<EvalReport>& reports);
std::string render_attention_svg(const std::string& attention_csv_path);

// Content hashes (FNV-1a over canonical serializations).
std::string dataset_content_hash(const Dataset& dataset);
std::string ensemble_param_hash(const Ensemble& ensemble);

}  // namespace cnf

#endif
