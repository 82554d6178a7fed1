#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rctkg/io.hpp"

namespace rctkg {

/// Error surfaced to API clients as {code, message, details} with an HTTP status.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message, nlohmann::json details = nlohmann::json::object())
      : std::runtime_error(message), status_(status), code_(std::move(code)), details_(std::move(details)) {}

  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const nlohmann::json& details() const { return details_; }
  nlohmann::json body() const { return {{"code", code_}, {"message", what()}, {"details", details_}}; }

 private:
  int status_;
  std::string code_;
  nlohmann::json details_;
};

/*
 * One append-only JSONL file per session under `dir`. Appends are flushed
 * and fsync'ed before returning. A torn trailing line (crash mid-write) is
 * ignored when the log is read back.
 */
class TrialStore {
 public:
  explicit TrialStore(std::filesystem::path dir);

  void append(const std::string& session_id, const nlohmann::json& event);
  std::vector<nlohmann::json> read(const std::string& session_id) const;
  std::vector<std::string> sessions() const;
  bool exists(const std::string& session_id) const;
  /// Truncates a torn trailing line so later appends start on a fresh line.
  void recover(const std::string& session_id);

  /// Test hook invoked right after an event is durable.
  std::function<void(const std::string& session_id, const nlohmann::json& event)> after_append;

 private:
  std::filesystem::path path_for(const std::string& session_id) const;
  std::filesystem::path dir_;
};

/// Folded view of one session's event log.
struct SessionState {
  std::string id;
  ConfigDocument config;
  std::optional<std::string> request_token;
  StateMatrix initial_state;
  StateMatrix state;
  int cohort_index = 0;
  std::int64_t last_seq = 0;
  std::optional<Allocation> pending;
  std::int64_t pending_seq = 0;
  Allocation tallies;
  std::vector<std::vector<double>> p_history;  // [cohort][x], entry 0 is the prior
  std::vector<double> error_history;
  std::map<int, std::int64_t> outcome_seq_by_cohort;
  std::vector<nlohmann::json> events;

  bool terminal() const;
};

/// Rebuilds a session purely from its events.
SessionState fold_events(const std::vector<nlohmann::json>& events);

class TrialService {
 public:
  explicit TrialService(std::filesystem::path data_dir);

  TrialStore& store() { return store_; }

  /// Body: {"config": {...}, "request_token": "..."}. Returns {"id", "created"}.
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json get_session(const std::string& id);
  nlohmann::json get_recommendation(const std::string& id);
  /// Body: {"cohort_index", "successes", optional "enrolled", "skipped", "override"}.
  nlohmann::json submit_outcomes(const std::string& id, const nlohmann::json& body);
  nlohmann::json export_session(const std::string& id);

  /// Refolds every session log and compares with memory; returns ids that differ.
  std::vector<std::string> consistency_check();

 private:
  struct Slot {
    std::mutex mutex;
    SessionState state;
  };
  std::shared_ptr<Slot> slot(const std::string& id);
  void append(Slot& slot, nlohmann::json event);
  nlohmann::json summary(const SessionState& s) const;
  nlohmann::json report(const SessionState& s) const;

  TrialStore store_;
  std::mutex index_mutex_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::map<std::string, std::string> tokens_;
};

struct HttpOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "trial-data";
  std::string bearer_token;          // empty disables auth
  std::filesystem::path static_dir;  // empty disables the static mount
};

/// Blocks serving the HTTP API until the process is stopped.
int serve_http(const HttpOptions& opts);

/// JSON helpers shared with tests and bindings.
nlohmann::json allocation_to_json(const Allocation& u);
Allocation allocation_from_json(const nlohmann::json& j, int subgroups, const std::string& path);
nlohmann::json state_to_json(const StateMatrix& s);

}  // namespace rctkg
