#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rctkg/io.hpp"

namespace py = pybind11;
using namespace rctkg;

namespace {

py::object cell_value(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return py::str(*s);
  if (const auto* i = std::get_if<std::int64_t>(&c)) return py::int_(*i);
  return py::float_(std::get<double>(c));
}

py::dict table_dict(const Table& t) {
  py::list rows;
  for (const auto& row : t.rows) {
    py::list r;
    for (const auto& c : row) r.append(cell_value(c));
    rows.append(r);
  }
  py::dict d;
  d["name"] = t.name;
  d["columns"] = t.columns;
  d["rows"] = rows;
  return d;
}

std::vector<std::array<int, 2>> allocation_list(const Allocation& u) { return u.counts(); }

py::dict summary_dict(const Summary& s) {
  py::dict d;
  d["mean"] = s.mean;
  d["stderr"] = s.stderr_;
  return d;
}

py::dict metrics_dict(const MetricsRecord& m) {
  py::dict d;
  d["replicates"] = m.replicates;
  d["type1"] = summary_dict(m.type1);
  d["type2"] = summary_dict(m.type2);
  d["total"] = summary_dict(m.total);
  d["type1_rate"] = summary_dict(m.type1_rate);
  d["type2_rate"] = summary_dict(m.type2_rate);
  d["total_rate"] = summary_dict(m.total_rate);
  d["cohorts_used"] = summary_dict(m.cohorts_used);
  d["confidence_pct"] = m.confidence_pct;
  d["mean_recruitment"] = m.mean_recruitment;
  d["first_cohort_recruitment"] = m.first_cohort_recruitment;
  return d;
}

}  // namespace

PYBIND11_MODULE(_rctkg, m) {
  m.doc() = "Knowledge-gradient allocation for subgroup clinical trials";
  m.attr("__version__") = library_version();

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

  m.def(
      "prob_effective",
      [](std::pair<double, double> control, std::pair<double, double> treatment, double tau) {
        return prob_effective(SubgroupPosterior{{control.first, control.second}, {treatment.first, treatment.second}},
                              tau);
      },
      py::arg("control"), py::arg("treatment"), py::arg("tau") = 0.0,
      "Posterior probability that treatment beats control by a relative margin tau.\n"
      "Each arm is given as (successes, patients).");

  m.def(
      "recommend",
      [](const std::string& state_text, int cohort_size, double lam, double tau, std::uint64_t seed,
         std::uint64_t cohort_index) {
        const StateMatrix s = StateMatrix::from_text(state_text);
        Recommendation r;
        {
          py::gil_scoped_release release;
          r = recommend(s, cohort_size, {lam, tau}, seed, cohort_index);
        }
        py::dict d;
        d["allocation"] = allocation_list(r.allocation);
        d["p_effective"] = r.p_effective;
        d["expected_total_error"] = r.expected_total_error;
        return d;
      },
      py::arg("state"), py::arg("cohort_size"), py::arg("lam") = 0.5, py::arg("tau") = 0.0, py::arg("seed") = 0,
      py::arg("cohort_index") = 0,
      "RCT-KG allocation for the next cohort, given a state file's text.\n"
      "The allocation is a list of [control, treatment] counts per subgroup.");

  m.def(
      "fresh_state", [](int subgroups) { return StateMatrix(subgroups).to_text(); }, py::arg("subgroups"),
      "State text for a trial with no observations yet.");

  m.def(
      "simulate",
      [](const std::string& config_json, std::optional<int> replicates, int threads) {
        ConfigDocument doc = parse_config(config_json);
        if (!doc.environment) throw ValidationError("truth: required for simulate");
        if (replicates) doc.trial.replicates = *replicates;
        doc.trial.validate();
        MetricsRecord record;
        {
          py::gil_scoped_release release;
          record = replicate(*doc.environment, doc.trial, doc.trial.replicates, threads);
        }
        return metrics_dict(record);
      },
      py::arg("config"), py::arg("replicates") = py::none(), py::arg("threads") = 0,
      "Replicated simulation of a JSON config that includes a synthetic truth.");

  m.def(
      "run_experiment",
      [](const std::string& preset, int replicates, std::uint64_t seed, int threads, double lam, double tau) {
        ExperimentOptions o;
        o.replicates = replicates;
        o.seed = seed;
        o.threads = threads;
        o.loss = {lam, tau};
        o.loss.validate();
        const Preset p = parse_preset(preset);
        std::vector<Table> tables;
        {
          py::gil_scoped_release release;
          tables = run_experiment(p, o);
        }
        py::list out;
        for (const auto& t : tables) out.append(table_dict(t));
        return out;
      },
      py::arg("preset"), py::arg("replicates") = 1000, py::arg("seed") = kDefaultMasterSeed, py::arg("threads") = 0,
      py::arg("lam") = 0.5, py::arg("tau") = 0.0,
      "Runs a named experiment preset and returns its tables as dicts with name, columns and rows.");

  m.def("presets", [] {
    std::vector<std::string> names;
    for (const Preset p : all_presets()) names.emplace_back(preset_name(p));
    return names;
  });
}
