#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "doctest.h"
#include "rctkg/http.hpp"
#include "rctkg/service.hpp"

using namespace rctkg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path data_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rctkg_svc_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

json trial_config(int X, int K, int M, std::uint64_t seed = 11) {
  return {{"subgroups", X}, {"budget", K * M}, {"cohorts", K}, {"policy", "RCT-KG"}, {"seed", seed}};
}

json successes_for(const json& allocation, std::mt19937_64& rng) {
  json out = json::array();
  for (const auto& cell : allocation) {
    const int c = cell[0].get<int>(), t = cell[1].get<int>();
    out.push_back({c ? static_cast<int>(rng() % (c + 1)) : 0, t ? static_cast<int>(rng() % (t + 1)) : 0});
  }
  return out;
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 0;
}

}  // namespace

TEST_SUITE("trial_service") {
  TEST_CASE("create, idempotent token and validation") {
    const fs::path dir = data_dir("create");
    TrialService svc(dir);
    const json created = svc.create_session({{"config", trial_config(4, 10, 100)}, {"request_token", "abc"}});
    CHECK(created["created"] == true);
    const std::string id = created["id"];
    const json again = svc.create_session({{"config", trial_config(4, 10, 100)}, {"request_token", "abc"}});
    CHECK(again["id"] == id);
    CHECK(again["created"] == false);

    const json summary = svc.get_session(id);
    CHECK(summary["state"].size() == 4);
    CHECK(summary["cohort_index"] == 0);
    CHECK(summary["pending_recommendation"].is_null());
    for (const auto& p : summary["p_effective"]) CHECK(std::abs(p.get<double>() - 0.5) < 1e-9);

    json bad = trial_config(2, 2, 10);
    bad["lambda"] = 2;
    try {
      svc.create_session({{"config", bad}});
      FAIL("expected a validation error");
    } catch (const ServiceError& e) {
      CHECK(e.status() == 400);
      CHECK(e.body()["details"]["field"] == "config.lambda");
    }
    CHECK(status_of([&] { svc.get_session("nope"); }) == 404);
    CHECK(status_of([&] { svc.get_session("../etc"); }) == 404);
    fs::remove_all(dir);
  }

  TEST_CASE("recommendation lifecycle") {
    const fs::path dir = data_dir("lifecycle");
    TrialService svc(dir);
    const std::string id = svc.create_session({{"config", trial_config(2, 2, 100)}})["id"];
    const json rec = svc.get_recommendation(id);
    CHECK(rec["terminal"] == false);
    const Allocation u = allocation_from_json(rec["allocation"], 2, "allocation");
    CHECK(u.subgroup_total(0) == 50);
    CHECK(u.subgroup_total(1) == 50);
    CHECK(svc.get_recommendation(id)["allocation"] == rec["allocation"]);
    CHECK(svc.get_recommendation(id)["event_id"] == rec["event_id"]);

    std::mt19937_64 rng(1);
    const json w = successes_for(rec["allocation"], rng);
    const json reply = svc.submit_outcomes(id, {{"cohort_index", 0}, {"successes", w}});
    CHECK(reply["cohort_index"] == 1);
    const StateMatrix expected = transition(StateMatrix(2), u, [&] {
      CohortOutcome o(2);
      for (int x = 0; x < 2; ++x)
        for (const Arm arm : kArms) o.at(x, arm) = w[x][static_cast<int>(arm)].get<int>();
      return o;
    }());
    CHECK(svc.get_session(id)["state"] == state_to_json(expected));

    // A retry of the same cohort is a stale submission.
    try {
      svc.submit_outcomes(id, {{"cohort_index", 0}, {"successes", w}});
      FAIL("expected a conflict");
    } catch (const ServiceError& e) {
      CHECK(e.status() == 409);
      CHECK(e.code() == "conflict");
      CHECK(e.details()["conflicting_event_id"] == reply["event_id"]);
    }
    CHECK(status_of([&] { svc.submit_outcomes(id, {{"cohort_index", 5}}); }) == 400);

    const json rec2 = svc.get_recommendation(id);
    svc.submit_outcomes(id, {{"cohort_index", 1}, {"successes", successes_for(rec2["allocation"], rng)}});
    const json done = svc.get_recommendation(id);
    CHECK(done["terminal"] == true);
    CHECK(done["report"]["status"] == "complete");
    CHECK(done["report"]["p_effective_history"].size() == 3);
    try {
      svc.submit_outcomes(id, {{"cohort_index", 2}, {"skipped", true}});
      FAIL("expected trial_complete");
    } catch (const ServiceError& e) {
      CHECK(e.code() == "trial_complete");
    }
    CHECK(svc.consistency_check().empty());
    fs::remove_all(dir);
  }

  TEST_CASE("submission rules") {
    const fs::path dir = data_dir("rules");
    TrialService svc(dir);
    const std::string id = svc.create_session({{"config", trial_config(2, 5, 10)}})["id"];
    const json before = svc.get_session(id)["state"];
    CHECK(status_of([&] { svc.submit_outcomes(id, {{"cohort_index", 0}, {"enrolled", {{0, 0}, {0, 0}}}}); }) == 400);
    const json skipped = svc.submit_outcomes(id, {{"cohort_index", 0}, {"skipped", true}});
    CHECK(skipped["cohort_index"] == 1);
    CHECK(svc.get_session(id)["state"] == before);
    CHECK(status_of([&] {
            svc.submit_outcomes(id, {{"cohort_index", 1}, {"enrolled", {{1, 0}, {0, 0}}}, {"skipped", true}});
          }) == 400);
    CHECK(status_of([&] {
            svc.submit_outcomes(id, {{"cohort_index", 1}, {"enrolled", {{2, 0}, {0, 0}}}, {"successes", {{3, 0}, {0, 0}}}});
          }) == 400);
    CHECK(status_of([&] { svc.submit_outcomes(id, {{"cohort_index", 1}, {"enrolled", {{6, 6}, {0, 0}}}}); }) == 400);
    CHECK(status_of([&] { svc.submit_outcomes(id, {{"cohort_index", 1}, {"bogus", 1}}); }) == 400);
    // Partial enrollment without a pending recommendation, then an over-cap override.
    svc.submit_outcomes(id, {{"cohort_index", 1}, {"enrolled", {{3, 0}, {0, 1}}}, {"successes", {{1, 0}, {0, 1}}}});
    svc.submit_outcomes(id, {{"cohort_index", 2}, {"enrolled", {{6, 6}, {0, 0}}}, {"override", true}});
    const json s = svc.get_session(id);
    CHECK(s["tallies"] == json{{9, 6}, {0, 1}});
    CHECK(s["cohort_index"] == 3);
    fs::remove_all(dir);
  }

  TEST_CASE("export replays to the current state") {
    const fs::path dir = data_dir("export");
    TrialService svc(dir);
    const std::string id = svc.create_session({{"config", trial_config(3, 6, 30)}})["id"];
    const json empty = svc.export_session(id);
    CHECK(empty["events"].size() == 1);
    CHECK(empty["report"]["p_effective_history"].size() == 1);
    std::mt19937_64 rng(2);
    for (int k = 0; k < 3; ++k) {
      const json rec = svc.get_recommendation(id);
      svc.submit_outcomes(id, {{"cohort_index", k}, {"successes", successes_for(rec["allocation"], rng)}});
    }
    const json ex = svc.export_session(id);
    CHECK(ex["report"]["p_effective_history"].size() == 4);
    CHECK(ex["report"]["expected_total_error_history"].size() == 4);
    StateMatrix replay(3);
    for (const auto& e : ex["events"]) {
      if (e["type"] != "outcome") continue;
      const Allocation enrolled = allocation_from_json(e["enrolled"], 3, "enrolled");
      const Allocation wins = allocation_from_json(e["successes"], 3, "successes");
      CohortOutcome o(3);
      for (int x = 0; x < 3; ++x)
        for (const Arm arm : kArms) o.at(x, arm) = wins.at(x, arm);
      replay = transition(replay, enrolled, o);
    }
    CHECK(StateMatrix::from_text(ex["state_text"].get<std::string>()) == replay);
    CHECK(fold_events(ex["events"].get<std::vector<json>>()).state == replay);

    // Causality: every recommendation precedes the outcome that answers it.
    std::int64_t last_rec = 0;
    for (const auto& e : ex["events"]) {
      if (e["type"] == "recommendation") last_rec = e["seq"];
      if (e["type"] == "outcome") CHECK(e["recommendation_seq"] == last_rec);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("random valid event sequences fold to the live state") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 8; ++trial) {
      const fs::path dir = data_dir("random" + std::to_string(trial));
      TrialService svc(dir);
      const int X = 1 + static_cast<int>(rng() % 3);
      const std::string id = svc.create_session({{"config", trial_config(X, 6, 12, rng())}})["id"];
      for (int k = 0; k < 6; ++k) {
        switch (rng() % 3) {
          case 0: {
            const json rec = svc.get_recommendation(id);
            svc.submit_outcomes(id, {{"cohort_index", k}, {"successes", successes_for(rec["allocation"], rng)}});
            break;
          }
          case 1: {
            json enrolled = json::array();
            for (int x = 0; x < X; ++x) enrolled.push_back({static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)});
            if (enrolled[0][0] == 0) enrolled[0][0] = 1;
            svc.submit_outcomes(id, {{"cohort_index", k}, {"enrolled", enrolled}, {"successes", successes_for(enrolled, rng)}});
            break;
          }
          default:
            if (rng() % 2) svc.get_recommendation(id);
            svc.submit_outcomes(id, {{"cohort_index", k}, {"enrolled", json(std::vector<std::array<int, 2>>(X))}, {"skipped", true}});
        }
      }
      CHECK(svc.consistency_check().empty());
      TrialService reopened(dir);
      CHECK(reopened.get_session(id)["state"] == svc.get_session(id)["state"]);
      CHECK(reopened.get_session(id)["cohort_index"] == 6);
      fs::remove_all(dir);
    }
  }

  TEST_CASE("two identical sessions recommend identically") {
    const fs::path dir = data_dir("twins");
    TrialService svc(dir);
    const std::string a = svc.create_session({{"config", trial_config(4, 4, 40, 77)}})["id"];
    const std::string b = svc.create_session({{"config", trial_config(4, 4, 40, 77)}})["id"];
    CHECK(a != b);
    std::mt19937_64 rng(4);
    for (int k = 0; k < 4; ++k) {
      const json ra = svc.get_recommendation(a), rb = svc.get_recommendation(b);
      CHECK(ra["allocation"] == rb["allocation"]);
      const json w = successes_for(ra["allocation"], rng);
      svc.submit_outcomes(a, {{"cohort_index", k}, {"successes", w}});
      svc.submit_outcomes(b, {{"cohort_index", k}, {"successes", w}});
    }
    fs::remove_all(dir);
  }

  TEST_CASE("a torn trailing line is ignored and truncated") {
    const fs::path dir = data_dir("torn");
    std::string id;
    {
      TrialService svc(dir);
      id = svc.create_session({{"config", trial_config(2, 3, 10)}})["id"];
      svc.get_recommendation(id);
    }
    const fs::path log = dir / (id + ".jsonl");
    REQUIRE(fs::exists(log));
    std::ofstream(log, std::ios::app) << R"({"type":"outcome","cohort_in)";
    TrialService svc(dir);
    CHECK(svc.get_session(id)["cohort_index"] == 0);
    CHECK_FALSE(svc.get_session(id)["pending_recommendation"].is_null());
    svc.submit_outcomes(id, {{"cohort_index", 0}, {"successes", {{0, 0}, {0, 0}}}});
    TrialService again(dir);
    CHECK(again.get_session(id)["cohort_index"] == 1);
    fs::remove_all(dir);
  }

  TEST_CASE("a crash between append and reply does not double-apply") {
    const fs::path dir = data_dir("crash");
    std::string id;
    json allocation;
    {
      TrialService svc(dir);
      id = svc.create_session({{"config", trial_config(2, 3, 20)}})["id"];
      allocation = svc.get_recommendation(id)["allocation"];
    }
    std::mt19937_64 rng(5);
    const json w = successes_for(allocation, rng);
    const pid_t child = ::fork();
    REQUIRE(child >= 0);
    if (child == 0) {
      TrialService svc(dir);
      svc.store().after_append = [](const std::string&, const json& e) {
        if (e["type"] == "outcome") ::_exit(42);
      };
      try {
        svc.submit_outcomes(id, {{"cohort_index", 0}, {"successes", w}});
      } catch (...) {
      }
      ::_exit(0);
    }
    int status = 0;
    ::waitpid(child, &status, 0);
    REQUIRE(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 42);

    TrialService restarted(dir);
    const json s = restarted.get_session(id);
    CHECK(s["cohort_index"] == 1);
    const Allocation u = allocation_from_json(allocation, 2, "a");
    CHECK(s["tallies"] == allocation_to_json(u));
    // The client never saw the reply and retries: it gets a conflict, not a second apply.
    CHECK(status_of([&] { restarted.submit_outcomes(id, {{"cohort_index", 0}, {"successes", w}}); }) == 409);
    CHECK(restarted.get_session(id)["tallies"] == allocation_to_json(u));
    fs::remove_all(dir);
  }

  TEST_CASE("HTTP API") {
    const fs::path dir = data_dir("http");
    TrialService svc(dir);
    HttpOptions opts;
    opts.bearer_token = "secret";
    httplib::Server server;
    register_routes(server, svc, opts);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread loop([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const auto health = client.Get("/healthz");
    REQUIRE(health);
    CHECK(health->status == 200);

    const std::string create = json{{"config", trial_config(2, 2, 100)}, {"request_token", "t1"}}.dump();
    const auto denied = client.Post("/trials", create, "application/json");
    REQUIRE(denied);
    CHECK(denied->status == 401);

    const httplib::Headers auth{{"Authorization", "Bearer secret"}};
    const auto made = client.Post("/trials", auth, create, "application/json");
    REQUIRE(made);
    CHECK(made->status == 201);
    const std::string id = json::parse(made->body)["id"];
    const auto replayed = client.Post("/trials", auth, create, "application/json");
    CHECK(replayed->status == 200);
    CHECK(json::parse(replayed->body)["id"] == id);

    const auto bad = client.Post("/trials", auth, R"({"config": {"subgroups": 2}})", "application/json");
    CHECK(bad->status == 400);
    const json err = json::parse(bad->body);
    CHECK(err.contains("code"));
    CHECK(err.contains("message"));
    CHECK(err.contains("details"));
    CHECK(client.Post("/trials", auth, "{oops", "application/json")->status == 400);

    const auto rec = client.Get("/trials/" + id + "/recommendation", auth);
    CHECK(rec->status == 200);
    const json r = json::parse(rec->body);
    const auto sub = client.Post("/trials/" + id + "/cohorts", auth,
                                 json{{"cohort_index", 0}, {"successes", {{0, 0}, {0, 0}}}}.dump(), "application/json");
    CHECK(sub->status == 200);
    const auto stale = client.Post("/trials/" + id + "/cohorts", auth,
                                   json{{"cohort_index", 0}, {"successes", {{0, 0}, {0, 0}}}}.dump(),
                                   "application/json");
    CHECK(stale->status == 409);
    CHECK(json::parse(stale->body)["details"].contains("conflicting_event_id"));

    const auto got = client.Get("/trials/" + id, auth);
    CHECK(json::parse(got->body)["tallies"] == r["allocation"]);
    const auto ex = client.Get("/trials/" + id + "/export", auth);
    CHECK(ex->status == 200);
    CHECK(json::parse(ex->body)["events"].size() == 3);
    CHECK(client.Get("/trials/doesnotexist", auth)->status == 404);

    server.stop();
    loop.join();
    fs::remove_all(dir);
  }
}
