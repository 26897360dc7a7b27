#include "cnf/instance.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cnf/errors.hpp"

namespace cnf {

std::string to_string(ProblemKind k) { return k == ProblemKind::Tsp ? "tsp" : "cvrp"; }

ProblemKind problem_kind_from_string(const std::string& s) {
  if (s == "tsp") return ProblemKind::Tsp;
  if (s == "cvrp") return ProblemKind::Cvrp;
  throw ArgumentError("unknown problem kind: " + s);
}

Point VrpInstance::position(int idx) const {
  if (idx == n()) {
    if (!depot) throw ArgumentError("depot index used on an instance without a depot");
    return *depot;
  }
  return coords.at(static_cast<size_t>(idx));
}

void VrpInstance::validate() const {
  // n >= 2 nodes in total; the CVRP depot counts as one
  const int min_customers = kind == ProblemKind::Cvrp ? 1 : 2;
  if (n() < min_customers) throw ArgumentError("instance must have at least 2 nodes");
  for (const Point& p : coords)
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0) || !std::isfinite(p.x) ||
        !std::isfinite(p.y))
      throw ArgumentError("coordinate outside the unit square");
  if (kind == ProblemKind::Tsp) {
    if (depot || demands || capacity)
      throw ArgumentError("TSP instance must not carry depot/demands/capacity");
    return;
  }
  if (!depot || !demands || !capacity)
    throw ArgumentError("CVRP instance requires depot, demands and capacity together");
  if (!(depot->x >= 0.0 && depot->x <= 1.0 && depot->y >= 0.0 && depot->y <= 1.0))
    throw ArgumentError("depot outside the unit square");
  if (static_cast<int>(demands->size()) != n())
    throw ArgumentError("demand count does not match node count");
  for (int d : *demands)
    if (d < 1 || d > 9) throw ArgumentError("demand outside {1..9}");
  if (*capacity < 1) throw ArgumentError("capacity must be positive");
}

bool VrpInstance::is_valid() const {
  try {
    validate();
    return true;
  } catch (const ArgumentError&) {
    return false;
  }
}

// ---- generators -----------------------------------------------------------

namespace {

std::string make_id(const std::string& dist, ProblemKind kind, int n, uint64_t seed, int i) {
  std::ostringstream os;
  os << dist << "-" << to_string(kind) << "-n" << n << "-s" << seed << "-" << i;
  return os.str();
}

void check_gen_args(int n, int count) {
  if (n < 2) throw ArgumentError("instance size must be >= 2");
  if (count < 1) throw ArgumentError("instance count must be >= 1");
}

std::vector<Point> uniform_coords(int n, Rng& rng) {
  std::vector<Point> coords(static_cast<size_t>(n));
  for (auto& p : coords) {
    p.x = rng.uniform();
    p.y = rng.uniform();
  }
  return coords;
}

}  // namespace

Dataset gen_uniform(int n, int count, uint64_t seed, ProblemKind kind) {
  check_gen_args(n, count);
  Dataset ds;
  ds.meta = {"gen_uniform", seed, n, "uniform"};
  ds.instances.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {static_cast<uint64_t>(kind), static_cast<uint64_t>(i)}));
    VrpInstance inst;
    inst.kind = kind;
    inst.coords = uniform_coords(n, rng);
    if (kind == ProblemKind::Cvrp) {
      inst.depot = Point{rng.uniform(), rng.uniform()};
      std::vector<int> demands(static_cast<size_t>(n));
      for (int& d : demands) d = rng.uniform_int(1, 9);
      inst.demands = std::move(demands);
      inst.capacity = capacity_for(n);
    }
    inst.id = make_id("uniform", kind, n, seed, i);
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

std::vector<Point> rotate_subset(const std::vector<Point>& coords,
                                 const std::vector<bool>& subset, double angle) {
  if (subset.size() != coords.size())
    throw ArgumentError("subset mask size does not match coordinate count");
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<Point> out = coords;
  for (size_t i = 0; i < coords.size(); ++i) {
    if (!subset[i]) continue;
    out[i].x = coords[i].x * c - coords[i].y * s;
    out[i].y = coords[i].x * s + coords[i].y * c;
  }
  return out;
}

Dataset gen_rotation(int n, int count, uint64_t seed) {
  check_gen_args(n, count);
  Dataset ds;
  ds.meta = {"gen_rotation", seed, n, "rotation"};
  ds.instances.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {0x7071ULL, static_cast<uint64_t>(i)}));
    std::vector<Point> coords = uniform_coords(n, rng);
    std::vector<bool> subset(static_cast<size_t>(n));
    for (size_t k = 0; k < subset.size(); ++k) subset[k] = rng.bernoulli(0.5);
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    VrpInstance inst;
    inst.kind = ProblemKind::Tsp;
    inst.coords = project_coords(rotate_subset(coords, subset, angle));
    inst.id = make_id("rotation", ProblemKind::Tsp, n, seed, i);
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

std::vector<Point> explode(const std::vector<Point>& coords, const Point& center, Rng& rng,
                           double radius, double displacement_mean) {
  std::vector<Point> out = coords;
  for (size_t i = 0; i < coords.size(); ++i) {
    const double d = dist(coords[i], center);
    if (d >= radius) continue;
    const double s = rng.exponential(displacement_mean);
    double ux, uy;
    if (d == 0.0) {
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      ux = std::cos(theta);
      uy = std::sin(theta);
    } else {
      ux = (center.x - coords[i].x) / d;
      uy = (center.y - coords[i].y) / d;
    }
    out[i].x = center.x + (radius + s) * ux;
    out[i].y = center.y + (radius + s) * uy;
  }
  return out;
}

Dataset gen_explosion(int n, int count, uint64_t seed) {
  check_gen_args(n, count);
  Dataset ds;
  ds.meta = {"gen_explosion", seed, n, "explosion"};
  ds.instances.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {0xe109ULL, static_cast<uint64_t>(i)}));
    std::vector<Point> coords = uniform_coords(n, rng);
    const Point center{rng.uniform(), rng.uniform()};
    VrpInstance inst;
    inst.kind = ProblemKind::Tsp;
    inst.coords = project_coords(explode(coords, center, rng));
    inst.id = make_id("explosion", ProblemKind::Tsp, n, seed, i);
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

// ---- projections ----------------------------------------------------------

std::vector<Point> project_coords(const std::vector<Point>& coords) {
  if (coords.empty()) throw ArgumentError("empty coordinate array");
  bool in_range = true;
  double lo = coords[0].x, hi = coords[0].x;
  for (const Point& p : coords) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw ArgumentError("non-finite coordinate");
    if (p.x < 0.0 || p.x > 1.0 || p.y < 0.0 || p.y > 1.0) in_range = false;
    lo = std::min(lo, std::min(p.x, p.y));
    hi = std::max(hi, std::max(p.x, p.y));
  }
  if (in_range) return coords;
  const double range = hi - lo;
  if (range == 0.0)
    throw DegenerateInstanceError("all coordinate entries identical; cannot normalize");
  std::vector<Point> out(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    out[i].x = (coords[i].x - lo) / range;
    out[i].y = (coords[i].y - lo) / range;
  }
  return out;
}

std::vector<int> project_demands(const std::vector<double>& raw) {
  if (raw.empty()) throw ArgumentError("empty demand array");
  for (double v : raw)
    if (!std::isfinite(v)) throw ArgumentError("non-finite demand");
  const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  std::vector<int> out(raw.size());
  if (range == 0.0) {
    const int d = static_cast<int>(std::clamp(std::llround(lo), 1LL, 9LL));
    std::fill(out.begin(), out.end(), d);
    return out;
  }
  for (size_t i = 0; i < raw.size(); ++i) {
    // tiny slack before ceil so decimal inputs that should land exactly on an
    // integer grid point do not get bumped up by rounding noise
    const double t = (raw[i] - lo) / range * 8.0;
    const int c = static_cast<int>(std::ceil(t - 1e-9));
    out[i] = std::clamp(1 + c, 1, 9);
  }
  return out;
}

// ---- cost / gap -----------------------------------------------------------

void validate_tour(const VrpInstance& instance, const std::vector<int>& sequence) {
  const int n = instance.n();
  if (instance.kind == ProblemKind::Tsp) {
    if (static_cast<int>(sequence.size()) != n)
      throw FeasibilityError("tour length " + std::to_string(sequence.size()) +
                             ", expected " + std::to_string(n));
    std::vector<char> seen(static_cast<size_t>(n), 0);
    for (int v : sequence) {
      if (v < 0 || v >= n)
        throw FeasibilityError("node " + std::to_string(v) + " outside [0," +
                               std::to_string(n) + ")");
      if (seen[static_cast<size_t>(v)])
        throw FeasibilityError("node " + std::to_string(v) + " visited twice");
      seen[static_cast<size_t>(v)] = 1;
    }
    return;
  }
  // CVRP
  if (!instance.depot || !instance.demands || !instance.capacity)
    throw FeasibilityError("CVRP tour on an instance without depot/demands/capacity");
  const int depot = n;
  if (sequence.size() < 3 || sequence.front() != depot || sequence.back() != depot)
    throw FeasibilityError("CVRP tour must start and end at the depot");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  long long load = 0;
  int route = 0;
  for (size_t i = 1; i < sequence.size(); ++i) {
    const int v = sequence[i];
    if (v < 0 || v > depot)
      throw FeasibilityError("node " + std::to_string(v) + " outside [0," +
                             std::to_string(depot) + "]");
    if (v == depot) {
      if (sequence[i - 1] == depot) throw FeasibilityError("empty route (consecutive depot visits)");
      load = 0;
      ++route;
      continue;
    }
    if (seen[static_cast<size_t>(v)])
      throw FeasibilityError("customer " + std::to_string(v) + " visited twice");
    seen[static_cast<size_t>(v)] = 1;
    load += (*instance.demands)[static_cast<size_t>(v)];
    if (load > *instance.capacity)
      throw FeasibilityError("route " + std::to_string(route) + " demand " +
                             std::to_string(load) + " exceeds capacity " +
                             std::to_string(*instance.capacity));
  }
  for (int v = 0; v < n; ++v)
    if (!seen[static_cast<size_t>(v)])
      throw FeasibilityError("customer " + std::to_string(v) + " never visited");
}

double sequence_length(const VrpInstance& instance, const std::vector<int>& sequence,
                       bool closed) {
  double total = 0.0;
  for (size_t i = 0; i + 1 < sequence.size(); ++i)
    total += dist(instance.position(sequence[i]), instance.position(sequence[i + 1]));
  if (closed && sequence.size() > 1)
    total += dist(instance.position(sequence.back()), instance.position(sequence.front()));
  return total;
}

double tour_cost(const VrpInstance& instance, const std::vector<int>& sequence) {
  validate_tour(instance, sequence);
  return sequence_length(instance, sequence, instance.kind == ProblemKind::Tsp);
}

double opt_gap(double cost, double ref_cost) {
  if (!(ref_cost > 0.0)) throw ArgumentError("reference cost must be positive");
  return (cost - ref_cost) / ref_cost * 100.0;
}

Point apply_dihedral(const Point& p, int which) {
  switch (which) {
    case 0: return {p.x, p.y};
    case 1: return {1.0 - p.x, p.y};
    case 2: return {p.x, 1.0 - p.y};
    case 3: return {1.0 - p.x, 1.0 - p.y};
    case 4: return {p.y, p.x};
    case 5: return {1.0 - p.y, p.x};
    case 6: return {p.y, 1.0 - p.x};
    case 7: return {1.0 - p.y, 1.0 - p.x};
    default: throw ArgumentError("dihedral transform index outside [0,8)");
  }
}

std::array<VrpInstance, 8> augment_x8(const VrpInstance& instance) {
  std::array<VrpInstance, 8> out;
  for (int k = 0; k < 8; ++k) {
    VrpInstance inst = instance;
    for (Point& p : inst.coords) p = apply_dihedral(p, k);
    if (inst.depot) inst.depot = apply_dihedral(*inst.depot, k);
    if (k > 0) inst.id += "/aug" + std::to_string(k);
    out[static_cast<size_t>(k)] = std::move(inst);
  }
  return out;
}

// ---- persistence ----------------------------------------------------------

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_escaped(std::string& out, const std::string& s) {
  out += '"';
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (static_cast<unsigned char>(c) < 0x20) {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\u%04x", c);
      out += buf;
    } else {
      out += c;
    }
  }
  out += '"';
}

}  // namespace

std::string instance_to_json(const VrpInstance& instance) {
  std::string out = "{\"id\":";
  append_escaped(out, instance.id);
  out += ",\"kind\":\"" + to_string(instance.kind) + "\",\"coords\":[";
  for (size_t i = 0; i < instance.coords.size(); ++i) {
    if (i) out += ',';
    out += '[';
    append_double(out, instance.coords[i].x);
    out += ',';
    append_double(out, instance.coords[i].y);
    out += ']';
  }
  out += ']';
  if (instance.depot) {
    out += ",\"depot\":[";
    append_double(out, instance.depot->x);
    out += ',';
    append_double(out, instance.depot->y);
    out += ']';
  }
  if (instance.demands) {
    out += ",\"demands\":[";
    for (size_t i = 0; i < instance.demands->size(); ++i) {
      if (i) out += ',';
      out += std::to_string((*instance.demands)[i]);
    }
    out += ']';
  }
  if (instance.capacity) out += ",\"capacity\":" + std::to_string(*instance.capacity);
  out += '}';
  return out;
}

VrpInstance instance_from_json(const std::string& line, int line_number) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), line_number);
  }
  try {
    VrpInstance inst;
    inst.id = j.at("id").get<std::string>();
    inst.kind = problem_kind_from_string(j.at("kind").get<std::string>());
    for (const auto& c : j.at("coords"))
      inst.coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (j.contains("depot"))
      inst.depot = Point{j["depot"].at(0).get<double>(), j["depot"].at(1).get<double>()};
    if (j.contains("demands")) inst.demands = j["demands"].get<std::vector<int>>();
    if (j.contains("capacity")) inst.capacity = j["capacity"].get<int>();
    inst.validate();
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("instance record malformed: ") + e.what(), line_number);
  }
}

void write_dataset(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingInputError("cannot open for writing: " + path);
  for (const VrpInstance& inst : dataset.instances) {
    out << instance_to_json(inst) << '\n';
  }
  if (!out) throw MissingInputError("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open dataset file: " + path);
  Dataset ds;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    ds.instances.push_back(instance_from_json(line, line_number));
  }
  if (ds.instances.empty()) throw ParseError("dataset file is empty: " + path);
  ds.meta.generator = "file:" + path;
  ds.meta.distribution = "file";
  ds.meta.n = ds.instances.front().n();
  return ds;
}

VrpInstance read_tsplib(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open TSPLIB file: " + path);

  std::string name;
  std::string edge_weight_type;
  std::string type;
  int dimension = -1;
  std::vector<Point> raw;
  bool in_coords = false;
  std::string line;
  int line_number = 0;

  auto split_keyword = [](const std::string& s, std::string& key, std::string& value) {
    const size_t colon = s.find(':');
    key = s.substr(0, colon == std::string::npos ? s.size() : colon);
    value = colon == std::string::npos ? "" : s.substr(colon + 1);
    auto trim = [](std::string& t) {
      const size_t b = t.find_first_not_of(" \t\r");
      const size_t e = t.find_last_not_of(" \t\r");
      t = b == std::string::npos ? "" : t.substr(b, e - b + 1);
    };
    trim(key);
    trim(value);
  };

  while (std::getline(in, line)) {
    ++line_number;
    std::string key, value;
    split_keyword(line, key, value);
    if (key.empty()) continue;
    if (key == "EOF") break;
    if (in_coords) {
      std::istringstream is(line);
      int idx;
      double x, y;
      if (!(is >> idx >> x >> y)) {
        // a keyword terminates the coordinate section
        if (key == "DEMAND_SECTION" || key == "DEPOT_SECTION" || key == "DISPLAY_DATA_SECTION") {
          in_coords = false;
          continue;
        }
        throw ParseError("malformed node coordinate line", line_number);
      }
      raw.push_back({x, y});
      continue;
    }
    if (key == "NAME") name = value;
    else if (key == "TYPE") type = value;
    else if (key == "DIMENSION") {
      try {
        dimension = std::stoi(value);
      } catch (...) {
        throw ParseError("malformed DIMENSION", line_number);
      }
    } else if (key == "EDGE_WEIGHT_TYPE") edge_weight_type = value;
    else if (key == "NODE_COORD_SECTION") in_coords = true;
    // remaining specification keywords (COMMENT, ...) are ignored
  }

  if (type != "TSP")
    throw UnsupportedFormatError("unsupported TSPLIB TYPE: " + (type.empty() ? "<missing>" : type));
  if (edge_weight_type != "EUC_2D")
    throw UnsupportedFormatError("unsupported EDGE_WEIGHT_TYPE: " +
                                 (edge_weight_type.empty() ? "<missing>" : edge_weight_type));
  if (dimension < 2) throw ParseError("missing or invalid DIMENSION in " + path);
  if (static_cast<int>(raw.size()) != dimension)
    throw ParseError("NODE_COORD_SECTION has " + std::to_string(raw.size()) +
                     " entries, DIMENSION says " + std::to_string(dimension));

  double lo = raw[0].x, hi = raw[0].x;
  for (const Point& p : raw) {
    lo = std::min(lo, std::min(p.x, p.y));
    hi = std::max(hi, std::max(p.x, p.y));
  }
  VrpInstance inst;
  inst.kind = ProblemKind::Tsp;
  inst.coords = project_coords(raw);
  inst.id = name.empty() ? path : name;
  inst.source_scale = (hi - lo) > 0.0 && inst.coords != raw ? hi - lo : 1.0;
  inst.validate();
  return inst;
}

}  // namespace cnf
