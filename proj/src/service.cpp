#include "rctkg/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace rctkg {

using nlohmann::json;

namespace {

bool valid_session_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  for (const char c : id)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') return false;
  return true;
}

std::string new_session_id() {
  static std::mutex m;
  static std::mt19937_64 engine{std::random_device{}()};
  std::lock_guard lock(m);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(engine()));
  return buf;
}

}  // namespace

TrialStore::TrialStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw std::runtime_error("cannot create data directory " + dir_.string() + ": " + ec.message());
}

std::filesystem::path TrialStore::path_for(const std::string& session_id) const {
  if (!valid_session_id(session_id)) throw ServiceError(404, "not_found", "unknown session '" + session_id + "'");
  return dir_ / (session_id + ".jsonl");
}

bool TrialStore::exists(const std::string& session_id) const {
  return valid_session_id(session_id) && std::filesystem::exists(path_for(session_id));
}

void TrialStore::append(const std::string& session_id, const json& event) {
  const auto path = path_for(session_id);
  const std::string line = event.dump() + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open event log " + path.string());
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw std::runtime_error("write failed for " + path.string());
    }
    written += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) throw std::runtime_error("fsync failed for " + path.string());
  if (after_append) after_append(session_id, event);
}

std::vector<json> TrialStore::read(const std::string& session_id) const {
  const auto path = path_for(session_id);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ServiceError(404, "not_found", "unknown session '" + session_id + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<json> events;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // torn trailing write
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    try {
      events.push_back(json::parse(line));
    } catch (const json::parse_error&) {
      if (pos >= text.size()) break;
      throw std::runtime_error("corrupt event log " + path.string());
    }
  }
  return events;
}

void TrialStore::recover(const std::string& session_id) {
  const auto path = path_for(session_id);
  const std::string text = read_text_file(path);
  const auto last = text.rfind('\n');
  const std::size_t keep = last == std::string::npos ? 0 : last + 1;
  if (keep != text.size()) std::filesystem::resize_file(path, keep);
}

std::vector<std::string> TrialStore::sessions() const {
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir_))
    if (entry.path().extension() == ".jsonl") ids.push_back(entry.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

json allocation_to_json(const Allocation& u) {
  json j = json::array();
  for (int x = 0; x < u.subgroup_count(); ++x) j.push_back({u.at(x, Arm::control), u.at(x, Arm::treatment)});
  return j;
}

Allocation allocation_from_json(const json& j, int subgroups, const std::string& path) {
  auto bad = [&](const std::string& what) {
    throw ServiceError(400, "validation_error", path + ": " + what, {{"field", path}});
  };
  if (!j.is_array() || static_cast<int>(j.size()) != subgroups) bad("expected one [control, treatment] pair per subgroup");
  Allocation u(subgroups);
  for (int x = 0; x < subgroups; ++x) {
    const json& pair = j[x];
    if (!pair.is_array() || pair.size() != 2) bad("expected [control, treatment] pairs");
    for (const Arm arm : kArms) {
      const json& v = pair[static_cast<int>(arm)];
      if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<long long>() > 1'000'000'000)
        bad("counts must be nonnegative integers");
      u.at(x, arm) = v.get<int>();
    }
  }
  return u;
}

json state_to_json(const StateMatrix& s) {
  json j = json::array();
  for (int x = 0; x < s.subgroup_count(); ++x) {
    json cell{{"subgroup", x}};
    for (const Arm arm : kArms) {
      const auto& p = s.at(x, arm);
      cell[arm_name(arm)] = {{"s0", p.s0}, {"s1", p.s1}, {"posterior_mean", posterior_mean(p)}};
    }
    j.push_back(cell);
  }
  return j;
}

namespace {

StateMatrix initial_state_for(const TrialConfig& cfg) {
  StateMatrix s(cfg.subgroups);
  if (cfg.prior)
    for (int x = 0; x < cfg.subgroups; ++x)
      for (const Arm arm : kArms) s.at(x, arm) = update(s.at(x, arm), cfg.prior->at(x, arm).s0, cfg.prior->at(x, arm).s1);
  return s;
}

void record_probabilities(SessionState& s) {
  const auto p = effectiveness_probabilities(s.state, s.config.trial.loss.tau);
  s.error_history.push_back(expected_total_error(p, s.config.trial.loss.lambda));
  s.p_history.push_back(p);
}

void apply_event(SessionState& s, const json& e) {
  const std::int64_t seq = e.at("seq").get<std::int64_t>();
  if (seq != s.last_seq + 1) throw std::runtime_error("event log out of sequence in session " + s.id);
  const std::string type = e.at("type").get<std::string>();
  if (type == "created") {
    s.id = e.at("id").get<std::string>();
    s.config = parse_config(e.at("config").dump());
    if (e.contains("request_token") && e["request_token"].is_string()) s.request_token = e["request_token"];
    s.initial_state = initial_state_for(s.config.trial);
    s.state = s.initial_state;
    s.tallies = Allocation(s.config.trial.subgroups);
    record_probabilities(s);
  } else if (type == "recommendation") {
    s.pending = allocation_from_json(e.at("allocation"), s.config.trial.subgroups, "allocation");
    s.pending_seq = seq;
  } else if (type == "outcome") {
    const int X = s.config.trial.subgroups;
    const Allocation enrolled = allocation_from_json(e.at("enrolled"), X, "enrolled");
    const Allocation successes = allocation_from_json(e.at("successes"), X, "successes");
    CohortOutcome w(X);
    for (int x = 0; x < X; ++x)
      for (const Arm arm : kArms) w.at(x, arm) = successes.at(x, arm);
    s.state = transition(s.state, enrolled, w);
    for (int x = 0; x < X; ++x)
      for (const Arm arm : kArms) s.tallies.at(x, arm) += enrolled.at(x, arm);
    s.outcome_seq_by_cohort[s.cohort_index] = seq;
    ++s.cohort_index;
    s.pending.reset();
    s.pending_seq = 0;
    record_probabilities(s);
  } else {
    throw std::runtime_error("unknown event type '" + type + "' in session " + s.id);
  }
  s.last_seq = seq;
  s.events.push_back(e);
}

}  // namespace

bool SessionState::terminal() const {
  const TrialConfig& cfg = config.trial;
  if (cohort_index >= cfg.max_cohorts()) return true;
  return cfg.stopping && !p_history.empty() && confidence_reached(p_history.back(), cfg.loss.lambda, *cfg.stopping);
}

SessionState fold_events(const std::vector<json>& events) {
  if (events.empty() || events.front().value("type", "") != "created")
    throw std::runtime_error("event log must start with a created event");
  SessionState s;
  for (const auto& e : events) apply_event(s, e);
  return s;
}

TrialService::TrialService(std::filesystem::path data_dir) : store_(std::move(data_dir)) {
  for (const auto& id : store_.sessions()) {
    store_.recover(id);
    auto slot = std::make_shared<Slot>();
    slot->state = fold_events(store_.read(id));
    if (slot->state.request_token) tokens_[*slot->state.request_token] = id;
    sessions_[id] = slot;
  }
}

std::shared_ptr<TrialService::Slot> TrialService::slot(const std::string& id) {
  std::lock_guard lock(index_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "not_found", "unknown session '" + id + "'", {{"id", id}});
  return it->second;
}

void TrialService::append(Slot& slot, json event) {
  event["seq"] = slot.state.last_seq + 1;
  event["timestamp"] = utc_timestamp();
  store_.append(slot.state.id, event);
  apply_event(slot.state, event);
}

json TrialService::create_session(const json& body) {
  if (!body.is_object()) throw ServiceError(400, "validation_error", "request body must be a JSON object");
  for (auto it = body.begin(); it != body.end(); ++it)
    if (it.key() != "config" && it.key() != "request_token")
      throw ServiceError(400, "validation_error", it.key() + ": unknown key", {{"field", it.key()}});
  if (!body.contains("config")) throw ServiceError(400, "validation_error", "config: required", {{"field", "config"}});
  std::optional<std::string> token;
  if (body.contains("request_token")) {
    if (!body["request_token"].is_string())
      throw ServiceError(400, "validation_error", "request_token: expected a string", {{"field", "request_token"}});
    token = body["request_token"].get<std::string>();
  }
  ConfigDocument doc;
  try {
    doc = parse_config(body["config"].dump());
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    const auto colon = msg.find(": ");
    throw ServiceError(400, "validation_error", msg,
                       {{"field", colon == std::string::npos ? "" : "config." + msg.substr(0, colon)}});
  }
  if (doc.trial.pilot)
    throw ServiceError(400, "validation_error", "config.pilot: pilot sampling is simulation-only",
                       {{"field", "config.pilot"}});

  std::lock_guard lock(index_mutex_);
  if (token) {
    const auto it = tokens_.find(*token);
    if (it != tokens_.end()) return {{"id", it->second}, {"created", false}};
  }
  std::string id;
  do id = new_session_id();
  while (sessions_.count(id) || store_.exists(id));
  auto s = std::make_shared<Slot>();
  json event{{"type", "created"}, {"id", id}, {"config", json::parse(config_to_json(doc))}};
  if (token) event["request_token"] = *token;
  s->state.id = id;
  append(*s, event);
  sessions_[id] = s;
  if (token) tokens_[*token] = id;
  return {{"id", id}, {"created", true}};
}

json TrialService::report(const SessionState& s) const {
  const double lambda = s.config.trial.loss.lambda;
  json j{{"estimated_positive", classify(s.p_history.back(), lambda)},
         {"p_effective_history", s.p_history},
         {"expected_total_error_history", s.error_history},
         {"tallies", allocation_to_json(s.tallies)},
         {"cohorts_completed", s.cohort_index},
         {"status", s.terminal() ? "complete" : "active"}};
  return j;
}

json TrialService::summary(const SessionState& s) const {
  const TrialConfig& cfg = s.config.trial;
  json j{{"id", s.id},
         {"status", s.terminal() ? "complete" : "active"},
         {"cohort_index", s.cohort_index},
         {"cohorts_planned", cfg.max_cohorts()},
         {"cohort_size", cfg.cohort_size},
         {"config", json::parse(config_to_json(s.config))},
         {"state", state_to_json(s.state)},
         {"p_effective", s.p_history.back()},
         {"expected_total_error", s.error_history.back()},
         {"estimated_positive", classify(s.p_history.back(), cfg.loss.lambda)},
         {"tallies", allocation_to_json(s.tallies)},
         {"last_seq", s.last_seq}};
  j["pending_recommendation"] =
      s.pending ? json{{"cohort_index", s.cohort_index}, {"allocation", allocation_to_json(*s.pending)},
                       {"event_id", s.pending_seq}}
                : json(nullptr);
  return j;
}

json TrialService::get_session(const std::string& id) {
  auto sl = slot(id);
  std::lock_guard lock(sl->mutex);
  return summary(sl->state);
}

json TrialService::get_recommendation(const std::string& id) {
  auto sl = slot(id);
  std::lock_guard lock(sl->mutex);
  SessionState& s = sl->state;
  const TrialConfig& cfg = s.config.trial;
  if (s.terminal()) return {{"terminal", true}, {"cohort_index", s.cohort_index}, {"report", report(s)}};
  if (!s.pending) {
    TieBreakRng rng(cfg.seed, static_cast<std::uint64_t>(s.cohort_index));
    PolicySettings policy = cfg.policy;
    policy.dp_horizon = cfg.max_cohorts() - s.cohort_index;
    const Allocation u = choose_action(policy, s.state, cfg.cohort_size, cfg.loss, rng);
    append(*sl, {{"type", "recommendation"}, {"cohort_index", s.cohort_index}, {"allocation", allocation_to_json(u)}});
  }
  return {{"terminal", false},
          {"cohort_index", s.cohort_index},
          {"allocation", allocation_to_json(*s.pending)},
          {"p_effective", s.p_history.back()},
          {"expected_total_error", s.error_history.back()},
          {"event_id", s.pending_seq}};
}

json TrialService::submit_outcomes(const std::string& id, const json& body) {
  auto sl = slot(id);
  std::lock_guard lock(sl->mutex);
  SessionState& s = sl->state;
  const TrialConfig& cfg = s.config.trial;
  const int X = cfg.subgroups;
  auto invalid = [](const std::string& field, const std::string& what) {
    throw ServiceError(400, "validation_error", field + ": " + what, {{"field", field}});
  };
  if (!body.is_object()) invalid("body", "expected a JSON object");
  for (auto it = body.begin(); it != body.end(); ++it)
    if (it.key() != "cohort_index" && it.key() != "enrolled" && it.key() != "successes" && it.key() != "skipped" &&
        it.key() != "override")
      invalid(it.key(), "unknown key");
  if (!body.contains("cohort_index") || !body["cohort_index"].is_number_integer())
    invalid("cohort_index", "required integer");
  const int k = body["cohort_index"].get<int>();
  if (k < s.cohort_index) {
    const auto seq = s.outcome_seq_by_cohort.count(k) ? s.outcome_seq_by_cohort.at(k) : 0;
    throw ServiceError(409, "conflict", "cohort " + std::to_string(k) + " already has recorded outcomes",
                       {{"conflicting_event_id", seq}, {"cohort_index", s.cohort_index}});
  }
  if (k > s.cohort_index) invalid("cohort_index", "expected " + std::to_string(s.cohort_index));
  if (s.terminal())
    throw ServiceError(409, "trial_complete", "the trial has completed all cohorts", {{"cohort_index", s.cohort_index}});
  auto flag = [&](const char* key) {
    if (!body.contains(key)) return false;
    if (!body[key].is_boolean()) invalid(key, "expected a boolean");
    return body[key].get<bool>();
  };
  const bool skipped = flag("skipped");
  const bool override_cap = flag("override");

  Allocation enrolled;
  if (body.contains("enrolled"))
    enrolled = allocation_from_json(body["enrolled"], X, "enrolled");
  else if (s.pending)
    enrolled = *s.pending;
  else if (skipped)
    enrolled = Allocation(X);
  else
    invalid("enrolled", "required when no recommendation is pending");
  Allocation successes = body.contains("successes") ? allocation_from_json(body["successes"], X, "successes")
                                                    : Allocation(X);
  for (int x = 0; x < X; ++x)
    for (const Arm arm : kArms)
      if (successes.at(x, arm) > enrolled.at(x, arm))
        invalid("successes[" + std::to_string(x) + "][" + std::to_string(static_cast<int>(arm)) + "]",
                "successes exceed enrolled patients");
  if (enrolled.total() == 0 && !skipped) invalid("skipped", "a zero-enrollment cohort must be marked skipped");
  if (enrolled.total() > 0 && skipped) invalid("skipped", "a skipped cohort cannot enroll patients");
  if (enrolled.total() > cfg.cohort_size && !override_cap)
    invalid("enrolled", "total enrollment " + std::to_string(enrolled.total()) + " exceeds the cohort size " +
                            std::to_string(cfg.cohort_size) + " (set override to accept)");

  json event{{"type", "outcome"},
             {"cohort_index", k},
             {"enrolled", allocation_to_json(enrolled)},
             {"successes", allocation_to_json(successes)},
             {"skipped", skipped},
             {"override", override_cap}};
  if (s.pending) event["recommendation_seq"] = s.pending_seq;
  append(*sl, event);
  return {{"cohort_index", s.cohort_index},
          {"p_effective", s.p_history.back()},
          {"expected_total_error", s.error_history.back()},
          {"estimated_positive", classify(s.p_history.back(), cfg.loss.lambda)},
          {"status", s.terminal() ? "complete" : "active"},
          {"event_id", s.last_seq}};
}

json TrialService::export_session(const std::string& id) {
  auto sl = slot(id);
  std::lock_guard lock(sl->mutex);
  const SessionState& s = sl->state;
  return {{"id", s.id},
          {"config", json::parse(config_to_json(s.config))},
          {"events", s.events},
          {"state", state_to_json(s.state)},
          {"state_text", s.state.to_text()},
          {"report", report(s)}};
}

std::vector<std::string> TrialService::consistency_check() {
  std::vector<std::shared_ptr<Slot>> slots;
  {
    std::lock_guard lock(index_mutex_);
    for (auto& [id, sl] : sessions_) slots.push_back(sl);
  }
  std::vector<std::string> bad;
  for (auto& sl : slots) {
    std::lock_guard lock(sl->mutex);
    const SessionState replay = fold_events(store_.read(sl->state.id));
    if (!(replay.state == sl->state.state) || replay.cohort_index != sl->state.cohort_index ||
        replay.last_seq != sl->state.last_seq)
      bad.push_back(sl->state.id);
  }
  return bad;
}

}  // namespace rctkg
