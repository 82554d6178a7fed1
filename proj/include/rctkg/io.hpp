#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rctkg/experiments.hpp"
#include "rctkg/sim.hpp"

namespace rctkg {

/// A parsed config file: the trial config plus an optional synthetic truth.
struct ConfigDocument {
  TrialConfig trial;
  std::optional<Environment> environment;
};

/// Parses the JSON config schema (see docs/config.md). Throws ValidationError
/// whose message starts with the offending field path.
ConfigDocument parse_config(const std::string& text);
ConfigDocument load_config(const std::filesystem::path& path);

/// Canonical JSON echo; parse_config(config_to_json(d)) reproduces d.
std::string config_to_json(const ConfigDocument& doc);

enum class OutputFormat { csv, json };
OutputFormat parse_format(const std::string& text);

/// CSV text: header line, then one line per row; floats with 6 significant digits.
std::string table_to_csv(const Table& table);
std::string table_to_json(const Table& table);

/// Writes `contents` to a temp file next to `path`, then renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

struct RunManifest {
  std::string command;
  std::string config_echo;  // JSON text
  std::uint64_t seed = 0;
  std::string version;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> outputs;

  std::string to_json() const;
};

std::string utc_timestamp();
const char* library_version();

/// Writes each table as <out_dir>/<table.name>.<ext>, then manifest.json. Returns the written paths.
std::vector<std::filesystem::path> emit_results(const std::vector<Table>& tables, OutputFormat format,
                                                const std::filesystem::path& out_dir, RunManifest manifest);

/// Observed cohort for the offline workflow: enrolled and successes per cell.
struct OutcomeFile {
  Allocation enrolled;
  CohortOutcome successes;
};

/*
 * Text format:
 *   rctkg-outcome 1
 *   subgroups <X>
 *   <x> <control|treatment> <enrolled> <successes>
 * Every cell must appear once; '#' starts a comment line.
 */
OutcomeFile parse_outcome_file(const std::string& text);

struct Recommendation {
  Allocation allocation;
  std::vector<double> p_effective;
  double expected_total_error = 0.0;
  std::optional<StateMatrix> next_state;  // set when outcomes were supplied
};

/*
 * RCT-KG recommendation for one cohort of `cohort_size` patients. Outcomes,
 * when given, must enroll exactly the recommended counts unless
 * `allow_deviation` is set, in which case the actual enrollment is used.
 */
Recommendation recommend(const StateMatrix& state, int cohort_size, const LossParams& lp, std::uint64_t seed,
                         std::uint64_t cohort_index = 0, const std::optional<OutcomeFile>& outcomes = std::nullopt,
                         bool allow_deviation = false);

std::string allocation_table(const Allocation& u);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace rctkg
