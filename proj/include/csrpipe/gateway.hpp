#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "csrpipe/util.hpp"

namespace csrpipe {

enum class BackendKind { Http, Stub };

struct EndpointProfile {
  std::string name;
  BackendKind kind = BackendKind::Http;
  std::string base_url;
  std::string model_id;
  std::string api_key_env;
  int max_parallel = 4;
  std::chrono::milliseconds timeout{60000};
  double temperature = 1.0;
  double top_p = 0.95;
  // One request with n>1 when true, else n sequential single requests.
  bool supports_n = true;
  int max_retries = 3;
  std::chrono::milliseconds backoff_initial{500};
  std::chrono::milliseconds backoff_max{8000};
  // Name of the stub script (kind == Stub).
  std::string stub;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

json to_json(const EndpointProfile& profile);
EndpointProfile profile_from_json(const std::string& name, const json& j);

struct ChatRequest {
  std::string prompt;
  int n = 1;
  double temperature = 1.0;
  double top_p = 0.95;
};

/// Transport behind the gateway. Implementations throw Timeout,
/// RateLimited, TransportError or MalformedResponse; retries are the
/// gateway's job.
class CompletionBackend {
public:
  virtual ~CompletionBackend() = default;
  virtual std::vector<std::string> send(const EndpointProfile& profile,
                                        const ChatRequest& request) = 0;
};

/// Chat-completion JSON over HTTP (`model`, `messages`, `n`, `temperature`).
class HttpBackend : public CompletionBackend {
public:
  std::vector<std::string> send(const EndpointProfile& profile,
                                const ChatRequest& request) override;
};

/// Stable request fingerprint: FNV-1a of the prompt text, hex encoded.
std::string request_fingerprint(std::string_view prompt);

/// Canned completions for deterministic runs. Lookup order: exact
/// fingerprint, then the first rule whose every `contains` needle occurs in
/// the prompt, then default_completion. The i-th of n completions is
/// entry i modulo the list size.
struct StubScript {
  struct Rule {
    std::vector<std::string> contains;
    std::vector<std::string> completions;
  };

  std::map<std::string, std::vector<std::string>> by_fingerprint;
  std::vector<Rule> rules;
  std::string default_completion;

  static StubScript from_json(const json& j);
  const std::vector<std::string>* lookup(std::string_view prompt) const;
};

class StubBackend : public CompletionBackend {
public:
  explicit StubBackend(StubScript script) : script_(std::move(script)) {}

  std::vector<std::string> send(const EndpointProfile& profile,
                                const ChatRequest& request) override;

private:
  StubScript script_;
};

/// Test backend driven by a callable (prompt, completion index) -> text.
class FunctionBackend : public CompletionBackend {
public:
  using Fn = std::function<std::string(const std::string& prompt, int index)>;
  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}

  std::vector<std::string> send(const EndpointProfile& profile,
                                const ChatRequest& request) override;

private:
  Fn fn_;
};

struct Completion {
  std::string text;
  std::string endpoint;
  std::chrono::milliseconds latency{0};
  int retries = 0;
};

struct CallRecord {
  std::string endpoint;
  std::string fingerprint;
  int n = 0;
  int retries = 0;
  std::chrono::milliseconds latency{0};
  bool ok = false;
  std::string error;
};

struct CallOptions {
  std::optional<double> temperature;
};

/// Uniform completion client. Each endpoint gets its own backend and a
/// bounded in-flight budget of max_parallel requests.
class Gateway {
public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;
  using CallObserver = std::function<void(const CallRecord&)>;

  Gateway();
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Registers an endpoint. Without an explicit backend, Http profiles use
  /// HttpBackend and Stub profiles need a script registered first.
  void add_endpoint(const EndpointProfile& profile,
                    std::shared_ptr<CompletionBackend> backend = nullptr);
  void add_stub_script(const std::string& name, StubScript script);

  bool has_endpoint(const std::string& name) const;
  const EndpointProfile& profile(const std::string& name) const;

  /// Returns exactly n completions in request order, or throws.
  std::vector<Completion> complete(const std::string& endpoint, const std::string& prompt,
                                   int n = 1, const CallOptions& options = {});

  void set_sleeper(Sleeper sleeper) { sleeper_ = std::move(sleeper); }
  void set_observer(CallObserver observer) { observer_ = std::move(observer); }

  /// Backend requests issued so far, retries included.
  std::size_t request_count() const { return requests_.load(); }
  std::size_t peak_in_flight(const std::string& endpoint) const;

private:
  struct Slot;

  std::vector<std::string> send_with_retry(Slot& slot, const ChatRequest& request,
                                           int& retries);

  std::map<std::string, std::unique_ptr<Slot>> slots_;
  std::map<std::string, StubScript> stub_scripts_;
  Sleeper sleeper_;
  CallObserver observer_;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace csrpipe
