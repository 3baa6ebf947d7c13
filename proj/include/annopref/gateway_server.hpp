#pragma once

#include <atomic>
#include <memory>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>
#include <string>
#include <thread>

#include "annopref/feedback_gateway.hpp"

// after Eigen: resolv.h defines _res
#include <httplib.h>

namespace annopref::gateway {

namespace detail {

// "rejected label: [e0: ...] [e1: ...]" -> ["e0: ...", "e1: ..."]
inline std::vector<std::string> bracketed_fields(const std::string& msg) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = msg.find('[', pos)) != std::string::npos) {
    const auto end = msg.find(']', pos);
    if (end == std::string::npos) break;
    out.push_back(msg.substr(pos + 1, end - pos - 1));
    pos = end + 1;
  }
  return out;
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  nlohmann::json err{{"code", code}, {"message", message}};
  const auto fields = bracketed_fields(message);
  if (!fields.empty()) err["fields"] = fields;
  send_json(res, status, {{"schema_version", kApiSchemaVersion}, {"error", err}});
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const NotFound& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const Conflict& e) {
    send_error(res, 409, "conflict", e.what());
  } catch (const InvalidInput& e) {
    send_error(res, 400, "invalid_input", e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

}  // namespace detail

/// HTTP front end for a FeedbackGateway.
///   GET  /runs/{id}/queries     pending queries
///   POST /queries/{id}/label    submit a label
///   GET  /runs/{id}/status      run summary
///   GET  /runs/{id}/plotdata    latest evaluation curves
class GatewayServer {
 public:
  explicit GatewayServer(FeedbackGateway& gateway) : gateway_(gateway) { routes(); }

  ~GatewayServer() { stop(); }

  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  int start(const std::string& host, int port) {
    if (thread_.joinable()) throw Conflict("gateway server already running");
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw std::runtime_error("gateway: cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    spdlog::info("feedback gateway listening on {}:{}", host, port_);
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }

 private:
  void routes() {
    using detail::guarded;
    using detail::send_json;
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get(R"(/runs/([^/]+)/queries)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string run_id = req.matches[1];
        const auto pending = gateway_.get_pending(run_id);
        const auto display = gateway_.display(run_id);
        auto list = nlohmann::json::array();
        for (const auto& q : pending) list.push_back(to_json(q, display));
        send_json(res, 200, {{"schema_version", kApiSchemaVersion}, {"run_id", run_id}, {"queries", list}});
      });
    });

    server_.Post(R"(/queries/([^/]+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        const auto ack = gateway_.submit(submission_from_json(req.matches[1], body));
        send_json(res, 200,
                  {{"schema_version", kApiSchemaVersion},
                   {"query_id", ack.query_id},
                   {"accepted", true},
                   {"record_appended", ack.record_appended},
                   {"dataset_size", ack.dataset_size}});
      });
    });

    server_.Get(R"(/runs/([^/]+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send_json(res, 200, to_json(gateway_.status(req.matches[1]))); });
    });

    server_.Get(R"(/runs/([^/]+)/plotdata)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        send_json(res, 200, {{"schema_version", kApiSchemaVersion}, {"plotdata", gateway_.plotdata(req.matches[1])}});
      });
    });

    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      detail::send_json(res, 200, {{"schema_version", kApiSchemaVersion}, {"ok", true}});
    });
  }

  FeedbackGateway& gateway_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace annopref::gateway
