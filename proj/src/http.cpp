#include "rctkg/http.hpp"

#include <atomic>
#include <chrono>
#include <iostream>
#include <thread>

namespace rctkg {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body.empty() ? "{}" : req.body);
  } catch (const json::parse_error& e) {
    throw ServiceError(400, "malformed_json", std::string("request body is not valid JSON: ") + e.what());
  }
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_json(res, e.status(), e.body());
    } catch (const ValidationError& e) {
      send_json(res, 400, {{"code", "validation_error"}, {"message", e.what()}, {"details", json::object()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"code", "internal_error"}, {"message", e.what()}, {"details", json::object()}});
    }
  };
}

}  // namespace

void register_routes(httplib::Server& server, TrialService& service, const HttpOptions& opts) {
  if (!opts.bearer_token.empty()) {
    const std::string expected = "Bearer " + opts.bearer_token;
    server.set_pre_routing_handler([expected](const httplib::Request& req, httplib::Response& res) {
      if (req.path.rfind("/trials", 0) != 0) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == expected) return httplib::Server::HandlerResponse::Unhandled;
      send_json(res, 401, {{"code", "unauthorized"}, {"message", "missing or invalid bearer token"},
                           {"details", json::object()}});
      return httplib::Server::HandlerResponse::Handled;
    });
  }

  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"version", library_version()}});
  });
  server.Post("/trials", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                const json out = service.create_session(parse_body(req));
                send_json(res, out["created"].get<bool>() ? 201 : 200, out);
              }));
  server.Get(R"(/trials/([A-Za-z0-9_-]+))", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.get_session(req.matches[1]));
             }));
  server.Get(R"(/trials/([A-Za-z0-9_-]+)/recommendation)",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.get_recommendation(req.matches[1]));
             }));
  server.Post(R"(/trials/([A-Za-z0-9_-]+)/cohorts)",
              guarded([&service](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, service.submit_outcomes(req.matches[1], parse_body(req)));
              }));
  server.Get(R"(/trials/([A-Za-z0-9_-]+)/export)",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.export_session(req.matches[1]));
             }));

  if (!opts.static_dir.empty() && !server.set_mount_point("/", opts.static_dir.string()))
    throw std::runtime_error("static directory not found: " + opts.static_dir.string());
}

int serve_http(const HttpOptions& opts) {
  TrialService service(opts.data_dir);
  httplib::Server server;
  register_routes(server, service, opts);

  std::atomic<bool> running{true};
  std::thread checker([&] {
    int ticks = 0;
    while (running) {
      std::this_thread::sleep_for(std::chrono::seconds(1));
      if (++ticks % 60 != 0) continue;
      for (const auto& id : service.consistency_check())
        std::cerr << "consistency check failed for session " << id << "\n";
    }
  });
  std::cerr << "listening on " << opts.host << ":" << opts.port << "\n";
  const bool ok = server.listen(opts.host, opts.port);
  running = false;
  checker.join();
  if (!ok) {
    std::cerr << "cannot bind " << opts.host << ":" << opts.port << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rctkg
