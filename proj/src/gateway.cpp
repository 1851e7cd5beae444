#include "csrpipe/gateway.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "csrpipe/errors.hpp"

namespace csrpipe {

void EndpointProfile::validate() const {
  if (name.empty()) throw ConfigError("endpoint name is empty");
  if (max_parallel < 1) throw ConfigError("endpoint " + name + ": max_parallel must be >= 1");
  if (max_retries < 0) throw ConfigError("endpoint " + name + ": max_retries must be >= 0");
  if (temperature < 0.0 || temperature > 2.0) {
    throw ConfigError("endpoint " + name + ": temperature must lie in [0,2]");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) {
    throw ConfigError("endpoint " + name + ": top_p must lie in (0,1]");
  }
  if (timeout.count() <= 0) throw ConfigError("endpoint " + name + ": timeout must be positive");
  if (kind == BackendKind::Http && base_url.empty()) {
    throw ConfigError("endpoint " + name + ": base_url is required for http endpoints");
  }
  if (kind == BackendKind::Stub && stub.empty()) {
    throw ConfigError("endpoint " + name + ": stub endpoints need a 'stub' script name");
  }
}

json to_json(const EndpointProfile& p) {
  return {{"kind", p.kind == BackendKind::Http ? "http" : "stub"},
          {"base_url", p.base_url},
          {"model_id", p.model_id},
          {"api_key_env", p.api_key_env},
          {"max_parallel", p.max_parallel},
          {"timeout_ms", p.timeout.count()},
          {"temperature", p.temperature},
          {"top_p", p.top_p},
          {"supports_n", p.supports_n},
          {"max_retries", p.max_retries},
          {"backoff_initial_ms", p.backoff_initial.count()},
          {"backoff_max_ms", p.backoff_max.count()},
          {"stub", p.stub}};
}

EndpointProfile profile_from_json(const std::string& name, const json& j) {
  static const std::vector<std::string> known = {
      "kind",        "base_url",   "model_id",    "api_key_env",        "max_parallel",
      "timeout_ms",  "temperature", "top_p",      "supports_n",         "max_retries",
      "backoff_initial_ms", "backoff_max_ms", "stub"};
  if (!j.is_object()) throw ConfigError("endpoint " + name + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("endpoint " + name + ": unknown key '" + key + "'");
    }
  }
  EndpointProfile p;
  p.name = name;
  try {
    auto kind = j.value("kind", std::string("http"));
    if (kind == "http") {
      p.kind = BackendKind::Http;
    } else if (kind == "stub") {
      p.kind = BackendKind::Stub;
    } else {
      throw ConfigError("endpoint " + name + ": kind must be 'http' or 'stub'");
    }
    p.base_url = j.value("base_url", std::string());
    p.model_id = j.value("model_id", std::string());
    p.api_key_env = j.value("api_key_env", std::string());
    p.max_parallel = j.value("max_parallel", p.max_parallel);
    p.timeout = std::chrono::milliseconds(j.value("timeout_ms", p.timeout.count()));
    p.temperature = j.value("temperature", p.temperature);
    p.top_p = j.value("top_p", p.top_p);
    p.supports_n = j.value("supports_n", p.supports_n);
    p.max_retries = j.value("max_retries", p.max_retries);
    p.backoff_initial =
        std::chrono::milliseconds(j.value("backoff_initial_ms", p.backoff_initial.count()));
    p.backoff_max = std::chrono::milliseconds(j.value("backoff_max_ms", p.backoff_max.count()));
    p.stub = j.value("stub", std::string());
  } catch (const json::exception& e) {
    throw ConfigError("endpoint " + name + ": " + e.what());
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// HTTP backend

namespace {

struct SplitUrl {
  std::string origin;
  std::string prefix;
};

SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  auto host_begin = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  auto path_begin = url.find('/', host_begin);
  if (path_begin == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_begin);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_begin), prefix};
}

}  // namespace

std::vector<std::string> HttpBackend::send(const EndpointProfile& profile,
                                           const ChatRequest& request) {
  auto [origin, prefix] = split_url(profile.base_url);
  httplib::Client client(origin);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(profile.timeout);
  auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(profile.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  httplib::Headers headers;
  if (!profile.api_key_env.empty()) {
    if (const char* key = std::getenv(profile.api_key_env.c_str())) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }

  json body = {{"model", profile.model_id},
               {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
               {"n", request.n},
               {"temperature", request.temperature},
               {"top_p", request.top_p}};

  auto res = client.Post(prefix + "/chat/completions", headers, body.dump(), "application/json");
  if (!res) {
    auto err = res.error();
    if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
        err == httplib::Error::Write) {
      throw Timeout(profile.name + ": " + httplib::to_string(err));
    }
    throw TransportError(profile.name + ": " + httplib::to_string(err));
  }
  if (res->status == 429) throw RateLimited(profile.name + ": HTTP 429");
  if (res->status == 408 || res->status == 504) {
    throw Timeout(profile.name + ": HTTP " + std::to_string(res->status));
  }
  if (res->status >= 500) {
    throw TransportError(profile.name + ": HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw GatewayError(profile.name + ": HTTP " + std::to_string(res->status) + ": " + res->body);
  }

  std::vector<std::string> out;
  try {
    auto reply = json::parse(res->body);
    for (const auto& choice : reply.at("choices")) {
      out.push_back(choice.at("message").at("content").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw MalformedResponse(profile.name + ": " + e.what());
  }
  if (static_cast<int>(out.size()) != request.n) {
    throw MalformedResponse(profile.name + ": expected " + std::to_string(request.n) +
                            " choices, got " + std::to_string(out.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stub backends

std::string request_fingerprint(std::string_view prompt) { return hex64(fnv1a64(prompt)); }

StubScript StubScript::from_json(const json& j) {
  StubScript script;
  auto as_list = [](const json& v) {
    std::vector<std::string> out;
    if (v.is_string()) {
      out.push_back(v.get<std::string>());
    } else {
      for (const auto& s : v) out.push_back(s.get<std::string>());
    }
    if (out.empty()) throw ConfigError("stub completion list is empty");
    return out;
  };
  try {
    if (auto it = j.find("by_fingerprint"); it != j.end()) {
      for (const auto& [fp, v] : it->items()) script.by_fingerprint[fp] = as_list(v);
    }
    if (auto it = j.find("rules"); it != j.end()) {
      for (const auto& r : *it) {
        Rule rule;
        rule.contains = as_list(r.at("contains"));
        rule.completions = as_list(r.at("completions"));
        script.rules.push_back(std::move(rule));
      }
    }
    script.default_completion = j.value("default_completion", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("stub script: ") + e.what());
  }
  return script;
}

const std::vector<std::string>* StubScript::lookup(std::string_view prompt) const {
  if (auto it = by_fingerprint.find(request_fingerprint(prompt)); it != by_fingerprint.end()) {
    return &it->second;
  }
  for (const auto& rule : rules) {
    bool all = std::all_of(rule.contains.begin(), rule.contains.end(), [&](const std::string& s) {
      return prompt.find(s) != std::string_view::npos;
    });
    if (all) return &rule.completions;
  }
  return nullptr;
}

std::vector<std::string> StubBackend::send(const EndpointProfile&, const ChatRequest& request) {
  std::vector<std::string> out;
  const auto* list = script_.lookup(request.prompt);
  for (int i = 0; i < request.n; ++i) {
    out.push_back(list ? (*list)[static_cast<std::size_t>(i) % list->size()]
                       : script_.default_completion);
  }
  return out;
}

std::vector<std::string> FunctionBackend::send(const EndpointProfile&,
                                               const ChatRequest& request) {
  std::vector<std::string> out;
  for (int i = 0; i < request.n; ++i) out.push_back(fn_(request.prompt, i));
  return out;
}

// ---------------------------------------------------------------------------
// Gateway

struct Gateway::Slot {
  EndpointProfile profile;
  std::shared_ptr<CompletionBackend> backend;
  std::mutex mutex;
  std::condition_variable cv;
  int in_flight = 0;
  int peak = 0;

  void acquire() {
    std::unique_lock lock(mutex);
    cv.wait(lock, [&] { return in_flight < profile.max_parallel; });
    ++in_flight;
    peak = std::max(peak, in_flight);
  }

  void release() {
    {
      std::lock_guard lock(mutex);
      --in_flight;
    }
    cv.notify_one();
  }
};

namespace {

class SlotGuard {
public:
  template <typename SlotT>
  explicit SlotGuard(SlotT& slot) : release_([&slot] { slot.release(); }) {
    slot.acquire();
  }
  ~SlotGuard() { release_(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

private:
  std::function<void()> release_;
};

}  // namespace

Gateway::Gateway() : sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {}

Gateway::~Gateway() = default;

void Gateway::add_stub_script(const std::string& name, StubScript script) {
  stub_scripts_[name] = std::move(script);
}

void Gateway::add_endpoint(const EndpointProfile& profile,
                           std::shared_ptr<CompletionBackend> backend) {
  profile.validate();
  if (!backend) {
    if (profile.kind == BackendKind::Http) {
      backend = std::make_shared<HttpBackend>();
    } else {
      auto it = stub_scripts_.find(profile.stub);
      if (it == stub_scripts_.end()) {
        throw ConfigError("endpoint " + profile.name + ": unknown stub script '" + profile.stub +
                          "'");
      }
      backend = std::make_shared<StubBackend>(it->second);
    }
  }
  auto slot = std::make_unique<Slot>();
  slot->profile = profile;
  slot->backend = std::move(backend);
  slots_[profile.name] = std::move(slot);
}

bool Gateway::has_endpoint(const std::string& name) const { return slots_.count(name) != 0; }

const EndpointProfile& Gateway::profile(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw ConfigError("unknown endpoint '" + name + "'");
  return it->second->profile;
}

std::size_t Gateway::peak_in_flight(const std::string& endpoint) const {
  auto it = slots_.find(endpoint);
  if (it == slots_.end()) return 0;
  std::lock_guard lock(it->second->mutex);
  return static_cast<std::size_t>(it->second->peak);
}

std::vector<std::string> Gateway::send_with_retry(Slot& slot, const ChatRequest& request,
                                                  int& retries) {
  const auto& p = slot.profile;
  auto delay = p.backoff_initial;
  for (int attempt = 0;; ++attempt) {
    try {
      SlotGuard guard(slot);
      ++requests_;
      return slot.backend->send(p, request);
    } catch (const MalformedResponse&) {
      throw;
    } catch (const GatewayError& e) {
      bool retryable = dynamic_cast<const RateLimited*>(&e) || dynamic_cast<const Timeout*>(&e) ||
                       dynamic_cast<const TransportError*>(&e);
      if (!retryable || attempt >= p.max_retries) throw;
      ++retries;
      spdlog::warn("{}: {} (retry {}/{} in {} ms)", p.name, e.what(), attempt + 1, p.max_retries,
                   delay.count());
      sleeper_(delay);
      delay = std::min(delay * 2, p.backoff_max);
    }
  }
}

std::vector<Completion> Gateway::complete(const std::string& endpoint, const std::string& prompt,
                                          int n, const CallOptions& options) {
  if (n < 1) throw InvalidInput("complete: n must be >= 1");
  auto it = slots_.find(endpoint);
  if (it == slots_.end()) throw ConfigError("unknown endpoint '" + endpoint + "'");
  Slot& slot = *it->second;

  ChatRequest request;
  request.prompt = prompt;
  request.temperature = options.temperature.value_or(slot.profile.temperature);
  request.top_p = slot.profile.top_p;

  CallRecord record;
  record.endpoint = endpoint;
  record.fingerprint = request_fingerprint(prompt);
  record.n = n;

  const auto start = std::chrono::steady_clock::now();
  std::vector<std::string> texts;
  try {
    if (slot.profile.supports_n) {
      request.n = n;
      texts = send_with_retry(slot, request, record.retries);
    } else {
      request.n = 1;
      for (int i = 0; i < n; ++i) {
        auto one = send_with_retry(slot, request, record.retries);
        texts.push_back(std::move(one.at(0)));
      }
    }
    if (static_cast<int>(texts.size()) != n) {
      throw MalformedResponse(endpoint + ": backend returned " + std::to_string(texts.size()) +
                              " completions, expected " + std::to_string(n));
    }
  } catch (const std::exception& e) {
    record.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - start);
    record.error = e.what();
    if (observer_) observer_(record);
    throw;
  }
  record.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now() - start);
  record.ok = true;
  if (observer_) observer_(record);

  std::vector<Completion> out;
  out.reserve(texts.size());
  for (auto& text : texts) out.push_back({std::move(text), endpoint, record.latency, record.retries});
  return out;
}

}  // namespace csrpipe
