#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "rctkg/experiments.hpp"
#include "rctkg/io.hpp"
#include "rctkg/service.hpp"

using namespace rctkg;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct Common {
  std::string out_dir;
  std::string format = "csv";
  std::optional<int> replicates;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--out", c.out_dir, "Output directory (tables are printed to stdout when omitted)");
  cmd->add_option("--format", c.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  cmd->add_option("--replicates", c.replicates, "Number of replicates")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", c.seed, "Master seed");
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all cores)");
}

int write_tables(const std::vector<Table>& tables, const Common& c, RunManifest manifest) {
  const OutputFormat fmt = parse_format(c.format);
  if (c.out_dir.empty()) {
    for (std::size_t i = 0; i < tables.size(); ++i) {
      if (i) std::cout << "\n";
      if (fmt == OutputFormat::csv) std::cout << "# " << tables[i].name << "\n";
      std::cout << (fmt == OutputFormat::csv ? table_to_csv(tables[i]) : table_to_json(tables[i]));
    }
    return 0;
  }
  for (const auto& p : emit_results(tables, fmt, c.out_dir, std::move(manifest))) std::cerr << "wrote " << p.string() << "\n";
  return 0;
}

std::vector<Table> simulation_tables(const TrialConfig& cfg, const MetricsRecord& m) {
  Table summary{"simulation",
                {"policy", "replicates", "type1", "type1_stderr", "type2", "type2_stderr", "total_error",
                 "total_error_stderr", "error_rate", "error_rate_stderr", "mean_cohorts", "mean_cohorts_stderr"},
                {}};
  summary.add_row({std::string(policy_name(cfg.policy.kind)), static_cast<std::int64_t>(m.replicates), m.type1.mean,
                   m.type1.stderr_, m.type2.mean, m.type2.stderr_, m.total.mean, m.total.stderr_, m.total_rate.mean,
                   m.total_rate.stderr_, m.cohorts_used.mean, m.cohorts_used.stderr_});
  Table groups{"subgroups", {"subgroup", "confidence_pct", "stderr", "control", "treatment", "first_cohort"}, {}};
  for (int x = 0; x < cfg.subgroups; ++x)
    groups.add_row({static_cast<std::int64_t>(x), m.confidence_pct[x], m.confidence_stderr[x], m.mean_recruitment[x][0],
                    m.mean_recruitment[x][1], m.first_cohort_recruitment[x]});
  return {summary, groups};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive subgroup trial engine: simulation, experiments, recommendations and the trial service"};
  app.require_subcommand(1);
  app.set_version_flag("--version", library_version());

  Common sim_opts;
  std::string config_path;
  auto* simulate = app.add_subcommand("simulate", "Replicate one configured trial against its synthetic truth");
  simulate->add_option("--config", config_path, "Trial config (JSON)")->required();
  add_common(simulate, sim_opts);

  Common exp_opts;
  std::string preset_text;
  double lambda = 0.5, tau = 0.0;
  auto* experiment = app.add_subcommand("experiment", "Run a named experiment preset");
  experiment->add_option("--preset", preset_text, "Preset name")->required();
  experiment->add_option("--lambda", lambda, "Type-I error weight");
  experiment->add_option("--tau", tau, "Effectiveness threshold");
  add_common(experiment, exp_opts);

  std::string state_path, outcomes_path, write_state;
  int cohort_size = 0;
  std::uint64_t rec_seed = 0, cohort_index = 0;
  double rec_lambda = 0.5, rec_tau = 0.0;
  bool allow_deviation = false;
  auto* rec = app.add_subcommand("recommend", "RCT-KG allocation for the next cohort of a live trial");
  rec->add_option("--state", state_path, "State file")->required();
  rec->add_option("--cohort-size,-M", cohort_size, "Patients in the next cohort")->required();
  rec->add_option("--lambda", rec_lambda, "Type-I error weight");
  rec->add_option("--tau", rec_tau, "Effectiveness threshold");
  rec->add_option("--seed", rec_seed, "Trial seed for tie-breaking");
  rec->add_option("--cohort-index", cohort_index, "Index of the cohort being planned");
  rec->add_option("--outcomes", outcomes_path, "Observed outcomes for this cohort");
  rec->add_option("--write-state", write_state, "Where to write the updated state (needs --outcomes)");
  rec->add_flag("--allow-deviation", allow_deviation, "Accept enrollment that differs from the recommendation");

  HttpOptions http;
  auto* serve = app.add_subcommand("serve", "Serve the trial HTTP API");
  serve->add_option("--host", http.host, "Bind address");
  serve->add_option("--port", http.port, "Port");
  serve->add_option("--data-dir", http.data_dir, "Event log directory");
  serve->add_option("--token", http.bearer_token, "Require this bearer token on /trials routes");
  serve->add_option("--static", http.static_dir, "Serve static files from this directory");

  int oracle_x = 1, oracle_k = 1, oracle_m = 2;
  std::string oracle_state;
  double oracle_lambda = 0.5, oracle_tau = 0.0;
  auto* oracle = app.add_subcommand("oracle", "Exact dynamic program and full knowledge gradient on a tiny instance");
  oracle->add_option("--subgroups", oracle_x, "Subgroups (1 or 2)");
  oracle->add_option("--cohorts", oracle_k, "Cohorts K");
  oracle->add_option("--cohort-size", oracle_m, "Cohort size M");
  oracle->add_option("--state", oracle_state, "Starting state file (fresh when omitted)");
  oracle->add_option("--lambda", oracle_lambda, "Type-I error weight");
  oracle->add_option("--tau", oracle_tau, "Effectiveness threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    RunManifest manifest;
    manifest.started_at = utc_timestamp();
    if (*simulate) {
      ConfigDocument doc = load_config(config_path);
      if (!doc.environment) throw ValidationError("truth: required for simulate");
      if (sim_opts.replicates) doc.trial.replicates = *sim_opts.replicates;
      if (sim_opts.seed) doc.trial.seed = *sim_opts.seed;
      doc.trial.validate();
      const MetricsRecord m = replicate(*doc.environment, doc.trial, doc.trial.replicates, sim_opts.threads);
      manifest.command = "simulate";
      manifest.config_echo = config_to_json(doc);
      manifest.seed = doc.trial.seed;
      return write_tables(simulation_tables(doc.trial, m), sim_opts, manifest);
    }
    if (*experiment) {
      const Preset preset = parse_preset(preset_text);
      ExperimentOptions o;
      if (exp_opts.replicates) o.replicates = *exp_opts.replicates;
      if (exp_opts.seed) o.seed = *exp_opts.seed;
      o.threads = exp_opts.threads;
      o.loss = {lambda, tau};
      o.loss.validate();
      const auto tables = run_experiment(preset, o);
      manifest.command = std::string("experiment ") + preset_name(preset);
      nlohmann::json echo{{"preset", preset_name(preset)}, {"replicates", o.replicates}, {"seed", o.seed},
                          {"lambda", o.loss.lambda}, {"tau", o.loss.tau}};
      manifest.config_echo = echo.dump();
      manifest.seed = o.seed;
      return write_tables(tables, exp_opts, manifest);
    }
    if (*rec) {
      if (cohort_size < 1) throw ValidationError("--cohort-size: must be at least 1");
      if (!write_state.empty() && outcomes_path.empty()) throw ValidationError("--write-state: needs --outcomes");
      const StateMatrix state = StateMatrix::from_text(read_text_file(state_path));
      std::optional<OutcomeFile> outcomes;
      if (!outcomes_path.empty()) outcomes = parse_outcome_file(read_text_file(outcomes_path));
      const Recommendation r =
          recommend(state, cohort_size, {rec_lambda, rec_tau}, rec_seed, cohort_index, outcomes, allow_deviation);
      std::cout << allocation_table(r.allocation);
      std::cout << "\nsubgroup p_effective\n";
      for (std::size_t x = 0; x < r.p_effective.size(); ++x) std::cout << x << " " << r.p_effective[x] << "\n";
      std::cout << "expected_total_error " << r.expected_total_error << "\n";
      if (r.next_state) {
        if (write_state.empty())
          std::cout << "\n" << r.next_state->to_text();
        else
          write_file_atomic(write_state, r.next_state->to_text());
      }
      return 0;
    }
    if (*serve) return serve_http(http);
    if (*oracle) {
      const LossParams lp{oracle_lambda, oracle_tau};
      lp.validate();
      const StateMatrix s =
          oracle_state.empty() ? StateMatrix(oracle_x) : StateMatrix::from_text(read_text_file(oracle_state));
      const DpResult dp = dp_optimal(s, oracle_k, oracle_m, lp);
      const KgExactResult kg = kg_exact(s, oracle_m, lp);
      TieBreakRng rng(0, 0);
      const Allocation greedy = rctkg_action(s, oracle_m, lp, rng);
      auto cells = [](const Allocation& u) {
        std::string out;
        for (int x = 0; x < u.subgroup_count(); ++x)
          out += (x ? " " : "") + std::to_string(u.at(x, Arm::control)) + "/" + std::to_string(u.at(x, Arm::treatment));
        return out;
      };
      std::cout << "method first_action value\n";
      std::cout << "dp_optimal " << cells(dp.first_action) << " " << dp.value << "\n";
      std::cout << "kg_exact " << cells(kg.action) << " " << kg.value << "\n";
      std::cout << "rctkg " << cells(greedy) << " " << expected_terminal_value(s, greedy, lp) << "\n";
      std::cout << "current_value " << terminal_value(s, lp) << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
