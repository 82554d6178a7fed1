#include "rctkg/io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "json.hpp"

#ifndef RCTKG_VERSION
#define RCTKG_VERSION "0.0.0"
#endif

namespace rctkg {

using nlohmann::json;

namespace {

[[noreturn]] void fail_at(const std::string& path, const std::string& what) {
  throw ValidationError(path + ": " + what);
}

void reject_unknown(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key())) fail_at(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

double get_number(const json& v, const std::string& path) {
  if (!v.is_number()) fail_at(path, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail_at(path, "expected a finite number");
  return d;
}

int get_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) fail_at(path, "expected an integer");
  const auto i = v.get<long long>();
  if (i < -1'000'000'000LL || i > 1'000'000'000LL) fail_at(path, "integer out of range");
  return static_cast<int>(i);
}

std::uint64_t get_seed(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
  fail_at(path, "expected a nonnegative integer");
}

std::string get_string(const json& v, const std::string& path) {
  if (!v.is_string()) fail_at(path, "expected a string");
  return v.get<std::string>();
}

const json& get_array(const json& v, const std::string& path) {
  if (!v.is_array()) fail_at(path, "expected an array");
  return v;
}

std::string index_path(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

template <class F>
auto rethrow_at(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    fail_at(path, e.what());
  }
}

}  // namespace

ConfigDocument parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!root.is_object()) throw ValidationError("config: top level must be an object");
  reject_unknown(root, "", {"subgroups", "budget", "cohorts", "cohort_size", "policy", "uniform_mode",
                            "dexfem_exponent", "lambda", "tau", "seed", "replicates", "truth", "prior", "pilot",
                            "stopping"});

  ConfigDocument doc;
  TrialConfig& cfg = doc.trial;
  if (!root.contains("subgroups")) fail_at("subgroups", "required");
  cfg.subgroups = get_int(root["subgroups"], "subgroups");
  if (cfg.subgroups < 1) fail_at("subgroups", "must be at least 1");
  if (!root.contains("policy")) fail_at("policy", "required");
  cfg.policy.kind = rethrow_at("policy", [&] { return parse_policy(get_string(root["policy"], "policy")); });
  if (root.contains("uniform_mode")) {
    const std::string mode = get_string(root["uniform_mode"], "uniform_mode");
    if (mode == "multinomial")
      cfg.policy.uniform_mode = UniformMode::multinomial;
    else if (mode == "equal_quota")
      cfg.policy.uniform_mode = UniformMode::equal_quota;
    else
      fail_at("uniform_mode", "expected multinomial or equal_quota");
  }
  if (root.contains("dexfem_exponent")) {
    cfg.policy.dexfem_exponent = get_number(root["dexfem_exponent"], "dexfem_exponent");
    if (cfg.policy.dexfem_exponent < 0.0) fail_at("dexfem_exponent", "must be nonnegative");
  }
  if (root.contains("lambda")) cfg.loss.lambda = get_number(root["lambda"], "lambda");
  if (root.contains("tau")) cfg.loss.tau = get_number(root["tau"], "tau");
  if (!(cfg.loss.lambda >= 0.0 && cfg.loss.lambda <= 1.0)) fail_at("lambda", "must lie in [0, 1]");
  if (cfg.loss.tau < 0.0) fail_at("tau", "must be nonnegative");
  if (root.contains("seed")) cfg.seed = get_seed(root["seed"], "seed");
  if (root.contains("replicates")) cfg.replicates = get_int(root["replicates"], "replicates");
  if (cfg.replicates < 1) fail_at("replicates", "must be at least 1");

  if (root.contains("stopping")) {
    const json& st = root["stopping"];
    if (!st.is_object()) fail_at("stopping", "expected an object");
    reject_unknown(st, "stopping", {"beta", "max_cohorts", "measure"});
    StoppingRule rule;
    if (!st.contains("beta")) fail_at("stopping.beta", "required");
    rule.beta = get_number(st["beta"], "stopping.beta");
    if (!(rule.beta > 0.5 && rule.beta < 1.0)) fail_at("stopping.beta", "must lie in (0.5, 1)");
    if (st.contains("max_cohorts")) rule.max_cohorts = get_int(st["max_cohorts"], "stopping.max_cohorts");
    if (rule.max_cohorts < 0) fail_at("stopping.max_cohorts", "must be nonnegative");
    if (st.contains("measure"))
      rule.measure = rethrow_at("stopping.measure",
                                [&] { return parse_stopping_measure(get_string(st["measure"], "stopping.measure")); });
    cfg.stopping = rule;
  }

  const bool has_n = root.contains("budget"), has_k = root.contains("cohorts"), has_m = root.contains("cohort_size");
  if (has_n) cfg.budget = get_int(root["budget"], "budget");
  if (has_k) cfg.cohorts = get_int(root["cohorts"], "cohorts");
  if (has_m) cfg.cohort_size = get_int(root["cohort_size"], "cohort_size");
  if (cfg.stopping) {
    if (!has_m) fail_at("cohort_size", "required in stopping mode");
  } else {
    if (!has_n || !has_k) fail_at(has_n ? "cohorts" : "budget", "required in fixed-horizon mode");
    if (cfg.cohorts < 0) fail_at("cohorts", "must be nonnegative");
    if (cfg.budget < 0) fail_at("budget", "must be nonnegative");
    if (!has_m) {
      if (cfg.cohorts == 0 || cfg.budget % cfg.cohorts != 0)
        throw ValidationError("budget, cohorts, cohort_size: budget must be a multiple of cohorts when cohort_size "
                              "is omitted");
      cfg.cohort_size = cfg.budget / cfg.cohorts;
    }
  }
  if (cfg.cohort_size < 1) fail_at("cohort_size", "must be at least 1");

  if (root.contains("truth")) {
    const json& t = get_array(root["truth"], "truth");
    if (static_cast<int>(t.size()) != cfg.subgroups) fail_at("truth", "needs one [control, treatment] pair per subgroup");
    Environment env;
    env.tau = cfg.loss.tau;
    for (std::size_t x = 0; x < t.size(); ++x) {
      const std::string p = index_path("truth", x);
      const json& pair = get_array(t[x], p);
      if (pair.size() != 2) fail_at(p, "expected [control, treatment]");
      std::array<double, 2> cell{};
      for (std::size_t y = 0; y < 2; ++y) {
        cell[y] = get_number(pair[y], index_path(p, y));
        if (!(cell[y] > 0.0 && cell[y] < 1.0)) fail_at(index_path(p, y), "must lie in (0, 1)");
      }
      env.truth.push_back(cell);
    }
    doc.environment = env;
  }

  if (root.contains("prior")) {
    const json& pr = get_array(root["prior"], "prior");
    if (static_cast<int>(pr.size()) != cfg.subgroups) fail_at("prior", "needs one entry per subgroup");
    StateMatrix prior(cfg.subgroups);
    for (std::size_t x = 0; x < pr.size(); ++x) {
      const std::string p = index_path("prior", x);
      if (!pr[x].is_object()) fail_at(p, "expected an object with control and treatment");
      reject_unknown(pr[x], p, {"control", "treatment"});
      for (const Arm arm : kArms) {
        const std::string ap = join(p, arm_name(arm));
        if (!pr[x].contains(arm_name(arm))) fail_at(ap, "required");
        const json& cell = get_array(pr[x][arm_name(arm)], ap);
        if (cell.size() != 2) fail_at(ap, "expected [successes, samples]");
        ArmPosterior a{get_number(cell[0], index_path(ap, 0)), get_number(cell[1], index_path(ap, 1))};
        rethrow_at(ap, [&] {
          validate(a);
          return 0;
        });
        prior.at(static_cast<int>(x), arm) = a;
      }
    }
    cfg.prior = prior;
  }

  if (root.contains("pilot")) {
    const json& pl = root["pilot"];
    if (!pl.is_object()) fail_at("pilot", "expected an object");
    reject_unknown(pl, "pilot", {"samples", "subgroups"});
    PilotPrior pilot;
    if (!pl.contains("samples")) fail_at("pilot.samples", "required");
    pilot.per_cell_samples = get_int(pl["samples"], "pilot.samples");
    if (pilot.per_cell_samples < 0) fail_at("pilot.samples", "must be nonnegative");
    if (pl.contains("subgroups")) {
      const json& sg = get_array(pl["subgroups"], "pilot.subgroups");
      for (std::size_t i = 0; i < sg.size(); ++i) {
        const int x = get_int(sg[i], index_path("pilot.subgroups", i));
        if (x < 0 || x >= cfg.subgroups) fail_at(index_path("pilot.subgroups", i), "subgroup index out of range");
        pilot.subgroups.push_back(x);
      }
    }
    if (!doc.environment) fail_at("pilot", "needs a truth table to sample from");
    cfg.pilot = pilot;
  }

  cfg.validate();
  return doc;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ConfigDocument load_config(const std::filesystem::path& path) { return parse_config(read_text_file(path)); }

std::string config_to_json(const ConfigDocument& doc) {
  const TrialConfig& cfg = doc.trial;
  json j;
  j["subgroups"] = cfg.subgroups;
  j["policy"] = policy_name(cfg.policy.kind);
  j["uniform_mode"] = cfg.policy.uniform_mode == UniformMode::multinomial ? "multinomial" : "equal_quota";
  j["dexfem_exponent"] = cfg.policy.dexfem_exponent;
  j["lambda"] = cfg.loss.lambda;
  j["tau"] = cfg.loss.tau;
  j["seed"] = cfg.seed;
  j["replicates"] = cfg.replicates;
  j["cohort_size"] = cfg.cohort_size;
  if (cfg.stopping) {
    j["stopping"] = {{"beta", cfg.stopping->beta},
                     {"max_cohorts", cfg.stopping->max_cohorts},
                     {"measure", stopping_measure_name(cfg.stopping->measure)}};
  } else {
    j["budget"] = cfg.budget;
    j["cohorts"] = cfg.cohorts;
  }
  if (doc.environment) {
    json t = json::array();
    for (const auto& cell : doc.environment->truth) t.push_back({cell[0], cell[1]});
    j["truth"] = t;
  }
  if (cfg.prior) {
    json pr = json::array();
    for (int x = 0; x < cfg.prior->subgroup_count(); ++x) {
      json e;
      for (const Arm arm : kArms) e[arm_name(arm)] = {cfg.prior->at(x, arm).s0, cfg.prior->at(x, arm).s1};
      pr.push_back(e);
    }
    j["prior"] = pr;
  }
  if (cfg.pilot) j["pilot"] = {{"samples", cfg.pilot->per_cell_samples}, {"subgroups", cfg.pilot->subgroups}};
  return j.dump(2) + "\n";
}

OutputFormat parse_format(const std::string& text) {
  if (text == "csv") return OutputFormat::csv;
  if (text == "json") return OutputFormat::json;
  throw ValidationError("format: expected csv or json, got '" + text + "'");
}

namespace {

std::string csv_field(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) {
    if (s->find_first_of(",\"\n") == std::string::npos) return *s;
    std::string q = "\"";
    for (const char ch : *s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  }
  if (const auto* i = std::get_if<std::int64_t>(&c)) return std::to_string(*i);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", std::get<double>(c));
  return buf;
}

json cell_json(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  if (const auto* i = std::get_if<std::int64_t>(&c)) return *i;
  return std::get<double>(c);
}

}  // namespace

std::string table_to_csv(const Table& table) {
  std::string out;
  for (std::size_t i = 0; i < table.columns.size(); ++i) out += (i ? "," : "") + table.columns[i];
  out += "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
    out += "\n";
  }
  return out;
}

std::string table_to_json(const Table& table) {
  json rows = json::array();
  for (const auto& row : table.rows) {
    json r = json::object();
    for (std::size_t i = 0; i < row.size(); ++i) r[table.columns[i]] = cell_json(row[i]);
    rows.push_back(r);
  }
  json j{{"name", table.name}, {"columns", table.columns}, {"rows", rows}};
  return j.dump(2) + "\n";
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
  }
}

std::string RunManifest::to_json() const {
  json cfg = config_echo.empty() ? json(nullptr) : json::parse(config_echo);
  json j{{"command", command},   {"config", cfg},          {"seed", seed},       {"version", version},
         {"started_at", started_at}, {"finished_at", finished_at}, {"outputs", outputs}};
  return j.dump(2) + "\n";
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const char* library_version() { return RCTKG_VERSION; }

std::vector<std::filesystem::path> emit_results(const std::vector<Table>& tables, OutputFormat format,
                                                const std::filesystem::path& out_dir, RunManifest manifest) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (const auto& t : tables) {
    const auto path = out_dir / (t.name + (format == OutputFormat::csv ? ".csv" : ".json"));
    write_file_atomic(path, format == OutputFormat::csv ? table_to_csv(t) : table_to_json(t));
    written.push_back(path);
    manifest.outputs.push_back(path.filename().string());
  }
  if (manifest.version.empty()) manifest.version = library_version();
  if (manifest.finished_at.empty()) manifest.finished_at = utc_timestamp();
  const auto mpath = out_dir / "manifest.json";
  write_file_atomic(mpath, manifest.to_json());
  written.push_back(mpath);
  return written;
}

OutcomeFile parse_outcome_file(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0, declared = -1;
  bool header = false;
  OutcomeFile out;
  std::vector<std::array<bool, 2>> seen;
  auto fail = [&](const std::string& what) {
    throw ValidationError("outcome file line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    if (!header) {
      std::string magic;
      int version = 0;
      if (!(fields >> magic >> version) || magic != "rctkg-outcome" || version != 1)
        fail("expected header 'rctkg-outcome 1'");
      header = true;
      continue;
    }
    if (declared < 0) {
      std::string key;
      if (!(fields >> key >> declared) || key != "subgroups" || declared < 1) fail("expected 'subgroups <X>'");
      out.enrolled = Allocation(declared);
      out.successes = CohortOutcome(declared);
      seen.assign(declared, {false, false});
      continue;
    }
    int x = -1, n = -1, w = -1;
    std::string arm_text, extra;
    if (!(fields >> x >> arm_text >> n >> w)) fail("expected '<x> <arm> <enrolled> <successes>'");
    if (fields >> extra) fail("trailing content '" + extra + "'");
    if (x < 0 || x >= declared) fail("subgroup index out of range");
    Arm arm;
    try {
      arm = parse_arm(arm_text);
    } catch (const ValidationError& e) {
      fail(e.what());
    }
    if (seen[x][static_cast<int>(arm)]) fail("duplicate cell");
    seen[x][static_cast<int>(arm)] = true;
    if (n < 0 || w < 0 || w > n) fail("successes must lie in [0, enrolled]");
    out.enrolled.at(x, arm) = n;
    out.successes.at(x, arm) = w;
  }
  if (!header || declared < 0) throw ValidationError("outcome file is missing its header");
  for (int x = 0; x < declared; ++x)
    if (!seen[x][0] || !seen[x][1])
      throw ValidationError("outcome file is missing cells for subgroup " + std::to_string(x));
  return out;
}

Recommendation recommend(const StateMatrix& state, int cohort_size, const LossParams& lp, std::uint64_t seed,
                         std::uint64_t cohort_index, const std::optional<OutcomeFile>& outcomes,
                         bool allow_deviation) {
  if (cohort_size < 1) throw ValidationError("cohort size must be at least 1");
  state.validate();
  lp.validate();
  TieBreakRng rng(seed, cohort_index);
  Recommendation r;
  r.allocation = rctkg_action(state, cohort_size, lp, rng);
  r.p_effective = effectiveness_probabilities(state, lp.tau);
  r.expected_total_error = expected_total_error(r.p_effective, lp.lambda);
  if (outcomes) {
    if (outcomes->enrolled.subgroup_count() != state.subgroup_count())
      throw ValidationError("outcome file covers a different number of subgroups than the state");
    if (!allow_deviation && !(outcomes->enrolled == r.allocation))
      throw ValidationError("outcome enrollment does not match the recommended allocation");
    r.next_state = transition(state, outcomes->enrolled, outcomes->successes);
  }
  return r;
}

std::string allocation_table(const Allocation& u) {
  std::string out = "subgroup arm count\n";
  for (int x = 0; x < u.subgroup_count(); ++x)
    for (const Arm arm : kArms) out += std::to_string(x) + " " + arm_name(arm) + " " + std::to_string(u.at(x, arm)) + "\n";
  return out;
}

}  // namespace rctkg
