#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include "csrpipe/config.hpp"
#include "csrpipe/triage.hpp"

namespace httplib {
class Server;
}

namespace csrpipe {

/// Triage queue HTTP API plus health, metrics and the annotator UI.
/// All case mutations go through the store's writer lock.
class Service {
public:
  Service(TriageStore& store, ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds host:port (port 0 picks a free one) and returns the bound port.
  /// Throws BindFailure.
  int bind();
  /// Serves on a background thread until stop().
  void start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();

  int port() const { return port_; }

private:
  void install_routes();

  TriageStore& store_;
  ServiceConfig config_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = -1;
  std::chrono::steady_clock::time_point started_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> verdicts_{0};
};

/// JSON shown to annotators for a leased case.
json queue_item_view(const TriageCase& c, const std::optional<Lease>& lease);

}  // namespace csrpipe
