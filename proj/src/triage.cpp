#include "csrpipe/triage.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <ctime>

#include <spdlog/spdlog.h>

#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"

namespace csrpipe {

std::string_view to_string(TriageState state) {
  switch (state) {
    case TriageState::Detected: return "detected";
    case TriageState::AwaitingVerifier: return "awaiting_verifier";
    case TriageState::SimpleNonHalluc: return "simple_non_halluc";
    case TriageState::AwaitingHuman: return "awaiting_human";
    case TriageState::VerifiedHalluc: return "verified_halluc";
    case TriageState::HardNonHalluc: return "hard_non_halluc";
    case TriageState::ReasonOptimized: return "reason_optimized";
  }
  return "detected";
}

TriageState triage_state_from_string(std::string_view text) {
  for (auto s : kAllTriageStates) {
    if (text == to_string(s)) return s;
  }
  throw InvalidInput("unknown triage state '" + std::string(text) + "'");
}

bool is_terminal(TriageState s) {
  return s == TriageState::SimpleNonHalluc || s == TriageState::HardNonHalluc ||
         s == TriageState::ReasonOptimized;
}

bool is_legal_transition(TriageState from, TriageState to) {
  using S = TriageState;
  switch (from) {
    case S::Detected: return to == S::AwaitingVerifier || to == S::AwaitingHuman;
    case S::AwaitingVerifier: return to == S::SimpleNonHalluc || to == S::AwaitingHuman;
    case S::AwaitingHuman: return to == S::VerifiedHalluc || to == S::HardNonHalluc;
    case S::VerifiedHalluc: return to == S::ReasonOptimized;
    default: return false;
  }
}

bool TriageCase::priority() const {
  auto feedback = [](const std::optional<HallucinationVerdict>& v) {
    return v && v->label == HallucinationLabel::UserFeedbackHallucination;
  };
  return feedback(detector_verdict) || feedback(verifier_verdict);
}

namespace {

json human_to_json(const HumanVerdict& h) {
  return {{"is_hallucination", h.is_hallucination},
          {"reason", h.reason},
          {"annotator_id", h.annotator_id},
          {"timestamp", h.timestamp}};
}

HumanVerdict human_from_json(const json& j) {
  return {j.at("is_hallucination").get<bool>(), j.at("reason").get<std::string>(),
          j.at("annotator_id").get<std::string>(), j.value("timestamp", std::string())};
}

void apply_record(std::map<std::string, TriageCase>& cases, const AuditRecord& r) {
  if (r.event == "created") {
    auto c = triage_case_from_json(r.payload.at("case"));
    c.state = r.to;
    cases[r.case_id] = std::move(c);
    return;
  }
  auto it = cases.find(r.case_id);
  if (it == cases.end()) throw InvalidInput("audit record for unknown case " + r.case_id);
  auto& c = it->second;
  if (r.event == "quarantined") {
    c.quarantine_reason = r.payload.at("reason").get<std::string>();
  } else if (r.event == "detected") {
    c.detector_verdict = hallucination_verdict_from_json(r.payload.at("detector_verdict"));
    c.quarantine_reason.clear();
  } else if (r.event == "verified") {
    if (auto v = r.payload.find("verifier_verdict"); v != r.payload.end() && !v->is_null()) {
      c.verifier_verdict = hallucination_verdict_from_json(*v);
    }
  } else if (r.event == "human_verdict") {
    c.human_verdict = human_from_json(r.payload);
  } else if (r.event == "reason_optimized") {
    c.optimized_reason = r.payload.at("optimized_reason").get<std::string>();
  } else {
    throw InvalidInput("unknown audit event '" + r.event + "'");
  }
  c.state = r.to;
}

}  // namespace

json to_json(const TriageCase& c) {
  json j = {{"case_id", c.case_id},
            {"seq", c.seq},
            {"dialogue", to_json(c.dialogue)},
            {"response", c.response},
            {"state", to_string(c.state)}};
  if (c.detector_verdict) j["detector_verdict"] = to_json(*c.detector_verdict);
  if (c.verifier_verdict) j["verifier_verdict"] = to_json(*c.verifier_verdict);
  if (c.human_verdict) j["human_verdict"] = human_to_json(*c.human_verdict);
  if (c.optimized_reason) j["optimized_reason"] = *c.optimized_reason;
  if (!c.quarantine_reason.empty()) j["quarantine_reason"] = c.quarantine_reason;
  return j;
}

TriageCase triage_case_from_json(const json& j) {
  TriageCase c;
  c.case_id = j.at("case_id").get<std::string>();
  c.seq = j.value("seq", std::uint64_t{0});
  c.dialogue = dialogue_from_json(j.at("dialogue"));
  c.response = j.at("response").get<std::string>();
  c.state = triage_state_from_string(j.value("state", std::string("detected")));
  if (j.contains("detector_verdict")) {
    c.detector_verdict = hallucination_verdict_from_json(j.at("detector_verdict"));
  }
  if (j.contains("verifier_verdict")) {
    c.verifier_verdict = hallucination_verdict_from_json(j.at("verifier_verdict"));
  }
  if (j.contains("human_verdict")) c.human_verdict = human_from_json(j.at("human_verdict"));
  if (j.contains("optimized_reason")) c.optimized_reason = j.at("optimized_reason").get<std::string>();
  c.quarantine_reason = j.value("quarantine_reason", std::string());
  return c;
}

json to_json(const AuditRecord& r) {
  return {{"seq", r.seq},       {"case_id", r.case_id},     {"event", r.event},
          {"from", to_string(r.from)}, {"to", to_string(r.to)}, {"payload", r.payload},
          {"actor", r.actor},   {"timestamp", r.timestamp}};
}

AuditRecord audit_record_from_json(const json& j) {
  AuditRecord r;
  r.seq = j.at("seq").get<std::uint64_t>();
  r.case_id = j.at("case_id").get<std::string>();
  r.event = j.at("event").get<std::string>();
  r.from = triage_state_from_string(j.at("from").get<std::string>());
  r.to = triage_state_from_string(j.at("to").get<std::string>());
  r.payload = j.value("payload", json::object());
  r.actor = j.value("actor", std::string());
  r.timestamp = j.value("timestamp", std::string());
  return r;
}

std::string make_case_id(const DialogueContext& dialogue, std::string_view response) {
  return "case-" + hex64(fnv1a64(dialogue.dialogue_id + '\x1f' + std::string(response)));
}

// ---------------------------------------------------------------------------
// TriageStore

TriageStore::TriageStore(std::filesystem::path path, Clock clock)
    : path_(std::move(path)),
      clock_(clock ? std::move(clock) : Clock([] { return std::chrono::system_clock::now(); })) {
  if (path_.empty()) return;
  lock_fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT, 0644);
  if (lock_fd_ < 0) throw SinkUnwritable("cannot open triage store " + path_.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw StoreLocked("triage store " + path_.string() + " is held by another instance");
  }
  for (const auto& j : read_jsonl(path_)) {
    auto record = audit_record_from_json(j);
    apply_record(cases_, record);
    next_seq_ = std::max(next_seq_, record.seq + 1);
    if (record.event == "created") ++next_case_seq_;
    audit_.push_back(std::move(record));
  }
  log_ = std::make_unique<JsonlWriter>(path_, /*append=*/true);
}

TriageStore::~TriageStore() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

std::string TriageStore::now_iso() const {
  auto t = std::chrono::system_clock::to_time_t(clock_());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void TriageStore::append(AuditRecord record) {
  record.seq = next_seq_++;
  if (record.timestamp.empty()) record.timestamp = now_iso();
  if (log_) log_->write(to_json(record));
  apply_record(cases_, record);
  audit_.push_back(std::move(record));
}

TriageCase TriageStore::create(const DialogueContext& dialogue, std::string response) {
  if (trim(response).empty()) throw InvalidInput("triage response is empty");
  std::unique_lock lock(mutex_);
  auto id = make_case_id(dialogue, response);
  if (auto it = cases_.find(id); it != cases_.end()) return it->second;
  TriageCase c;
  c.case_id = id;
  c.seq = next_case_seq_++;
  c.dialogue = dialogue;
  c.response = std::move(response);
  AuditRecord r;
  r.case_id = id;
  r.event = "created";
  r.from = TriageState::Detected;
  r.to = TriageState::Detected;
  r.payload = {{"case", to_json(c)}};
  r.actor = "system";
  append(std::move(r));
  return cases_.at(id);
}

TriageCase TriageStore::transition(const std::string& case_id, TriageState expected,
                                   TriageState to, const std::string& event, const json& payload,
                                   const std::string& actor) {
  std::unique_lock lock(mutex_);
  auto it = cases_.find(case_id);
  if (it == cases_.end()) throw NotFound("no triage case " + case_id);
  if (it->second.state != expected) {
    throw WrongState("case " + case_id + " is " + std::string(to_string(it->second.state)) +
                     ", expected " + std::string(to_string(expected)));
  }
  if (!is_legal_transition(expected, to)) {
    throw InvalidInput("illegal triage transition " + std::string(to_string(expected)) + " -> " +
                       std::string(to_string(to)));
  }
  AuditRecord r;
  r.case_id = case_id;
  r.event = event;
  r.from = expected;
  r.to = to;
  r.payload = payload;
  r.actor = actor;
  append(std::move(r));
  leases_.erase(case_id);
  return cases_.at(case_id);
}

TriageCase TriageStore::quarantine(const std::string& case_id, const std::string& reason) {
  std::unique_lock lock(mutex_);
  auto it = cases_.find(case_id);
  if (it == cases_.end()) throw NotFound("no triage case " + case_id);
  if (it->second.state != TriageState::Detected) {
    throw WrongState("only detected cases can be quarantined");
  }
  AuditRecord r;
  r.case_id = case_id;
  r.event = "quarantined";
  r.from = TriageState::Detected;
  r.to = TriageState::Detected;
  r.payload = {{"reason", reason}};
  r.actor = "system";
  append(std::move(r));
  return cases_.at(case_id);
}

std::optional<TriageCase> TriageStore::get(const std::string& case_id) const {
  std::shared_lock lock(mutex_);
  if (auto it = cases_.find(case_id); it != cases_.end()) return it->second;
  return std::nullopt;
}

std::vector<TriageCase> TriageStore::snapshot() const {
  std::vector<TriageCase> out;
  {
    std::shared_lock lock(mutex_);
    for (const auto& [_, c] : cases_) out.push_back(c);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.seq < b.seq; });
  return out;
}

std::vector<AuditRecord> TriageStore::audit_log() const {
  std::shared_lock lock(mutex_);
  return audit_;
}

std::map<TriageState, std::size_t> TriageStore::counts() const {
  std::map<TriageState, std::size_t> out;
  for (auto s : kAllTriageStates) out[s] = 0;
  std::shared_lock lock(mutex_);
  for (const auto& [_, c] : cases_) ++out[c.state];
  return out;
}

std::optional<TriageCase> TriageStore::lease_next(const std::string& annotator_id) {
  std::unique_lock lock(mutex_);
  const auto now = clock_();
  std::erase_if(leases_, [&](const auto& kv) {
    auto it = cases_.find(kv.first);
    return kv.second.expires <= now || it == cases_.end() ||
           it->second.state != TriageState::AwaitingHuman;
  });
  for (const auto& [id, lease] : leases_) {
    if (lease.annotator_id == annotator_id) return cases_.at(id);
  }
  const TriageCase* best = nullptr;
  for (const auto& [id, c] : cases_) {
    if (c.state != TriageState::AwaitingHuman || leases_.count(id)) continue;
    if (!best || std::pair(!c.priority(), c.seq) < std::pair(!best->priority(), best->seq)) {
      best = &c;
    }
  }
  if (!best) return std::nullopt;
  leases_[best->case_id] = {annotator_id, now + lease_ttl_};
  return *best;
}

std::optional<Lease> TriageStore::lease_of(const std::string& case_id) const {
  std::shared_lock lock(mutex_);
  auto it = leases_.find(case_id);
  if (it == leases_.end() || it->second.expires <= clock_()) return std::nullopt;
  return it->second;
}

std::size_t TriageStore::active_leases() const {
  std::shared_lock lock(mutex_);
  const auto now = clock_();
  return static_cast<std::size_t>(std::count_if(
      leases_.begin(), leases_.end(), [&](const auto& kv) { return kv.second.expires > now; }));
}

TriageCase TriageStore::submit_human_verdict(const std::string& case_id, bool is_hallucination,
                                             const std::string& reason,
                                             const std::string& annotator_id) {
  if (is_hallucination && trim(reason).empty()) {
    throw MissingReason("confirming a hallucination requires a reason");
  }
  if (auto lease = lease_of(case_id); lease && lease->annotator_id != annotator_id) {
    auto current = get(case_id);
    if (current && current->state == TriageState::AwaitingHuman) {
      throw LeaseConflict("case " + case_id + " is leased by another annotator");
    }
  }
  json payload = {{"is_hallucination", is_hallucination},
                  {"reason", reason},
                  {"annotator_id", annotator_id},
                  {"timestamp", now_iso()}};
  return transition(case_id, TriageState::AwaitingHuman,
                    is_hallucination ? TriageState::VerifiedHalluc : TriageState::HardNonHalluc,
                    "human_verdict", payload, annotator_id);
}

std::map<std::string, TriageCase> TriageStore::replay(const std::vector<AuditRecord>& log) {
  std::map<std::string, TriageCase> cases;
  for (const auto& r : log) {
    if (r.event != "created" && r.event != "quarantined" && !is_legal_transition(r.from, r.to)) {
      throw InvalidInput("audit log holds an illegal transition for " + r.case_id);
    }
    apply_record(cases, r);
  }
  return cases;
}

// ---------------------------------------------------------------------------
// TriageEngine

TriageEngine::TriageEngine(TriageStore& store, JudgeSuite& judges, TriageEndpoints endpoints)
    : store_(store), judges_(judges), endpoints_(std::move(endpoints)) {}

TriageCase TriageEngine::detect(const TriageCase& c) {
  HallucinationVerdict verdict;
  try {
    verdict = judges_.judge_hallucination(c.dialogue, c.response, endpoints_.detector);
  } catch (const ParseFailure& e) {
    spdlog::warn("triage: quarantining {}: {}", c.case_id, e.what());
    return store_.quarantine(c.case_id, e.what());
  } catch (const GatewayError& e) {
    spdlog::warn("triage: quarantining {}: {}", c.case_id, e.what());
    return store_.quarantine(c.case_id, e.what());
  }
  auto to = verdict.hallucinated() ? TriageState::AwaitingHuman : TriageState::AwaitingVerifier;
  return store_.transition(c.case_id, TriageState::Detected, to, "detected",
                           {{"detector_verdict", to_json(verdict)}}, endpoints_.detector);
}

TriageCase TriageEngine::triage_detect(const DialogueContext& dialogue,
                                       const std::string& response) {
  auto c = store_.create(dialogue, response);
  if (c.state != TriageState::Detected || c.quarantined()) return c;
  return detect(c);
}

TriageCase TriageEngine::retry_detect(const std::string& case_id) {
  auto c = store_.get(case_id);
  if (!c) throw NotFound("no triage case " + case_id);
  if (c->state != TriageState::Detected) throw WrongState("case " + case_id + " is not in detected");
  return detect(*c);
}

TriageCase TriageEngine::triage_verify(const std::string& case_id) {
  auto c = store_.get(case_id);
  if (!c) throw NotFound("no triage case " + case_id);
  if (c->state != TriageState::AwaitingVerifier) {
    throw WrongState("case " + case_id + " is " + std::string(to_string(c->state)) +
                     ", expected awaiting_verifier");
  }
  if (endpoints_.verifiers.empty()) throw ConfigError("no verifier endpoints configured");

  std::optional<HallucinationVerdict> last;
  std::string note;
  bool concur = true;
  for (const auto& verifier : endpoints_.verifiers) {
    try {
      last = judges_.judge_hallucination(c->dialogue, c->response, verifier);
    } catch (const ParseFailure& e) {
      // Conservative: an unreadable verifier sends the case to a human.
      note = e.what();
      last.reset();
      concur = false;
      break;
    }
    if (last->hallucinated()) {
      concur = false;
      break;
    }
  }
  json payload = {{"verifier_verdict", last ? to_json(*last) : json(nullptr)}};
  if (!note.empty()) payload["note"] = note;
  return store_.transition(case_id, TriageState::AwaitingVerifier,
                           concur ? TriageState::SimpleNonHalluc : TriageState::AwaitingHuman,
                           "verified", payload, "verifier");
}

TriageCase TriageEngine::submit_human_verdict(const std::string& case_id, bool is_hallucination,
                                              const std::string& reason,
                                              const std::string& annotator_id) {
  return store_.submit_human_verdict(case_id, is_hallucination, reason, annotator_id);
}

TriageCase TriageEngine::optimize_reason(const std::string& case_id) {
  auto c = store_.get(case_id);
  if (!c) throw NotFound("no triage case " + case_id);
  if (c->state != TriageState::VerifiedHalluc) {
    throw WrongState("case " + case_id + " is " + std::string(to_string(c->state)) +
                     ", expected verified_halluc");
  }
  const auto& human_reason = c->human_verdict->reason;
  std::string optimized;
  bool fallback = false;
  try {
    optimized = judges_.optimize_reason(c->dialogue, c->response, human_reason,
                                        endpoints_.optimizer);
  } catch (const ParseFailure& e) {
    spdlog::warn("triage: reason optimizer failed for {}, keeping human reason: {}", case_id,
                 e.what());
    fallback = true;
  } catch (const GatewayError& e) {
    spdlog::warn("triage: reason optimizer failed for {}, keeping human reason: {}", case_id,
                 e.what());
    fallback = true;
  }
  if (fallback || trim(optimized).empty()) {
    optimized = human_reason;
    fallback = true;
  }
  return store_.transition(case_id, TriageState::VerifiedHalluc, TriageState::ReasonOptimized,
                           "reason_optimized",
                           {{"optimized_reason", optimized}, {"fallback", fallback}},
                           endpoints_.optimizer);
}

// ---------------------------------------------------------------------------

CuratedCounts emit_curated_corpus(const std::vector<TriageCase>& cases,
                                  const std::filesystem::path& sink) {
  std::vector<const TriageCase*> ordered;
  for (const auto& c : cases) ordered.push_back(&c);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->seq < b->seq; });

  CuratedCounts counts;
  JsonlWriter writer(sink);
  for (const auto* c : ordered) {
    json sample = {{"case_id", c->case_id},
                   {"dialogue", to_json(c->dialogue)},
                   {"response", c->response}};
    switch (c->state) {
      case TriageState::SimpleNonHalluc:
        sample["label"] = "simple_non_hallucination";
        sample["rationale"] = "";
        ++counts.simple_non_halluc;
        break;
      case TriageState::HardNonHalluc:
        sample["label"] = "hard_non_hallucination";
        sample["rationale"] = "";
        ++counts.hard_non_halluc;
        break;
      case TriageState::ReasonOptimized: {
        if (!c->optimized_reason || trim(*c->optimized_reason).empty()) {
          spdlog::warn("curated corpus: {} has no rationale, excluded", c->case_id);
          ++counts.excluded;
          continue;
        }
        sample["label"] = "hallucination";
        auto type = c->detector_verdict && c->detector_verdict->hallucinated()
                        ? c->detector_verdict->label
                        : c->verifier_verdict ? c->verifier_verdict->label
                                              : HallucinationLabel::NoHallucination;
        sample["hallucination_type"] =
            type == HallucinationLabel::NoHallucination ? json(nullptr) : json(to_string(type));
        sample["rationale"] = *c->optimized_reason;
        ++counts.halluc;
        break;
      }
      default:
        spdlog::warn("curated corpus: {} is {}, not terminal; excluded", c->case_id,
                     to_string(c->state));
        ++counts.excluded;
        continue;
    }
    writer.write(sample);
  }
  return counts;
}

double hallucination_reward(JudgeSuite& judges, const DialogueContext& dialogue,
                            std::string_view response, const std::string& detector) {
  try {
    return judges.judge_hallucination(dialogue, response, detector).hallucinated() ? -1.0 : 0.0;
  } catch (const ParseFailure& e) {
    spdlog::warn("hallucination reward for {} treated as 0: {}", dialogue.dialogue_id, e.what());
    return 0.0;
  }
}

}  // namespace csrpipe
