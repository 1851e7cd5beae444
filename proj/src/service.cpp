#include "csrpipe/service.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <fmt/format.h>

#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/rewards.hpp"

namespace csrpipe {

namespace {

constexpr const char* kPlaceholderPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>csrpipe annotation queue</title></head>
<body>
<h1>Annotation queue</h1>
<p>No UI bundle is configured. Set <code>service.ui_dir</code> to serve one.</p>
<p>API: <code>GET /queue/next</code>, <code>POST /queue/{case_id}/verdict</code>,
<code>GET /cases/{id}</code>, <code>GET /stats</code>.</p>
</body></html>
)";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, std::string_view msg) {
  send_json(res, status, {{"error", kind}, {"message", msg}});
}

std::string iso_time(std::chrono::system_clock::time_point tp) {
  auto t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

json queue_item_view(const TriageCase& c, const std::optional<Lease>& lease) {
  json snippets = json::array();
  for (const auto& s : c.dialogue.snippets) snippets.push_back({{"id", s.id}, {"content", s.content}});
  json view = {{"case_id", c.case_id},
               {"history", render_history(c.dialogue)},
               {"query", c.dialogue.query},
               {"snippets", snippets},
               {"response", c.response},
               {"state", to_string(c.state)},
               {"priority", c.priority()}};
  if (c.detector_verdict) view["detector_verdict"] = to_json(*c.detector_verdict);
  if (c.verifier_verdict) view["verifier_verdict"] = to_json(*c.verifier_verdict);
  if (lease) view["lease_expires"] = iso_time(lease->expires);
  return view;
}

Service::Service(TriageStore& store, ServiceConfig config)
    : store_(store), config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
  store_.set_lease_ttl(std::chrono::seconds(config_.lease_ttl_s));
  started_ = std::chrono::steady_clock::now();
  install_routes();
}

Service::~Service() { stop(); }

void Service::install_routes() {
  auto& svr = *server_;
  svr.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    requests_.fetch_add(1, std::memory_order_relaxed);
    const bool guarded = req.path.rfind("/queue", 0) == 0 || req.path.rfind("/cases", 0) == 0;
    if (guarded && !config_.bearer_token.empty() &&
        req.get_header_value("Authorization") != "Bearer " + config_.bearer_token) {
      send_error(res, 401, "Unauthorized", "missing or wrong bearer token");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  svr.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });

  svr.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    json counts = json::object();
    std::size_t total = 0;
    for (auto [state, n] : store_.counts()) {
      counts[std::string(to_string(state))] = n;
      total += n;
    }
    send_json(res, 200,
              {{"counts", counts}, {"total", total}, {"active_leases", store_.active_leases()}});
  });

  svr.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
    std::string out;
    out += "# TYPE csrpipe_triage_cases gauge\n";
    for (auto [state, n] : store_.counts()) {
      out += fmt::format("csrpipe_triage_cases{{state=\"{}\"}} {}\n", to_string(state), n);
    }
    const double uptime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    const auto rewards = reward_counter().load();
    out += "# TYPE csrpipe_rewards_total counter\n";
    out += fmt::format("csrpipe_rewards_total {}\n", rewards);
    out += "# TYPE csrpipe_rewards_per_second gauge\n";
    out += fmt::format("csrpipe_rewards_per_second {:.6f}\n",
                       uptime > 0 ? static_cast<double>(rewards) / uptime : 0.0);
    out += "# TYPE csrpipe_http_requests_total counter\n";
    out += fmt::format("csrpipe_http_requests_total {}\n", requests_.load());
    out += "# TYPE csrpipe_verdicts_total counter\n";
    out += fmt::format("csrpipe_verdicts_total {}\n", verdicts_.load());
    out += "# TYPE csrpipe_active_leases gauge\n";
    out += fmt::format("csrpipe_active_leases {}\n", store_.active_leases());
    res.set_content(out, "text/plain; version=0.0.4");
  });

  svr.Get("/queue/next", [this](const httplib::Request& req, httplib::Response& res) {
    std::string annotator = req.get_param_value("annotator");
    if (annotator.empty()) annotator = req.get_header_value("X-Annotator-Id");
    if (annotator.empty()) {
      send_error(res, 400, "InvalidInput", "annotator id required");
      return;
    }
    auto c = store_.lease_next(annotator);
    if (!c) {
      res.status = 204;
      return;
    }
    send_json(res, 200, queue_item_view(*c, store_.lease_of(c->case_id)));
  });

  svr.Post(R"(/queue/([^/]+)/verdict)", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    const std::string case_id = req.matches[1];
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error&) {
      send_error(res, 400, "InvalidInput", "body is not JSON");
      return;
    }
    if (!body.is_object() || !body.contains("is_hallucination") ||
        !body["is_hallucination"].is_boolean()) {
      send_error(res, 400, "InvalidInput", "is_hallucination (boolean) required");
      return;
    }
    std::string annotator = body.value("annotator_id", std::string{});
    if (annotator.empty()) annotator = req.get_header_value("X-Annotator-Id");
    if (annotator.empty()) {
      send_error(res, 400, "InvalidInput", "annotator_id required");
      return;
    }
    try {
      auto c = store_.submit_human_verdict(case_id, body["is_hallucination"].get<bool>(),
                                           body.value("reason", std::string{}), annotator);
      verdicts_.fetch_add(1, std::memory_order_relaxed);
      send_json(res, 200, to_json(c));
    } catch (const NotFound& e) {
      send_error(res, 404, "NotFound", e.what());
    } catch (const WrongState& e) {
      send_error(res, 409, "WrongState", e.what());
    } catch (const LeaseConflict& e) {
      send_error(res, 409, "LeaseConflict", e.what());
    } catch (const MissingReason& e) {
      send_error(res, 400, "MissingReason", e.what());
    } catch (const Error& e) {
      send_error(res, 500, "Error", e.what());
    }
  });

  svr.Get(R"(/cases/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    auto c = store_.get(req.matches[1]);
    if (!c) {
      send_error(res, 404, "NotFound", "no such case");
      return;
    }
    auto body = to_json(*c);
    // Other annotators only learn that the case is taken, not by whom.
    if (auto lease = store_.lease_of(c->case_id)) {
      std::string who = req.get_param_value("annotator");
      if (who.empty()) who = req.get_header_value("X-Annotator-Id");
      if (who == lease->annotator_id) {
        body["lease"] = {{"annotator_id", lease->annotator_id},
                         {"expires", iso_time(lease->expires)}};
      } else {
        body["leased"] = true;
      }
    }
    send_json(res, 200, body);
  });

  if (!config_.ui_dir.empty()) {
    if (!svr.set_mount_point("/", config_.ui_dir)) {
      spdlog::warn("ui_dir {} is not a directory; serving placeholder page", config_.ui_dir);
    } else {
      return;
    }
  }
  svr.Get("/", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(kPlaceholderPage, "text/html; charset=utf-8");
  });
}

int Service::bind() {
  if (config_.port == 0) {
    port_ = server_->bind_to_any_port(config_.host);
  } else {
    port_ = server_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ < 0) {
    throw BindFailure(fmt::format("cannot bind {}:{}", config_.host, config_.port));
  }
  return port_;
}

void Service::start() {
  if (port_ < 0) bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void Service::run() {
  if (port_ < 0) bind();
  spdlog::info("serving on {}:{}", config_.host, port_);
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace csrpipe
