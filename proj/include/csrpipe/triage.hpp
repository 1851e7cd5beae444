#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/judges.hpp"

namespace csrpipe {

enum class TriageState {
  Detected,
  AwaitingVerifier,
  SimpleNonHalluc,
  AwaitingHuman,
  VerifiedHalluc,
  HardNonHalluc,
  ReasonOptimized,
};

inline constexpr TriageState kAllTriageStates[] = {
    TriageState::Detected,      TriageState::AwaitingVerifier, TriageState::SimpleNonHalluc,
    TriageState::AwaitingHuman, TriageState::VerifiedHalluc,   TriageState::HardNonHalluc,
    TriageState::ReasonOptimized};

std::string_view to_string(TriageState state);
TriageState triage_state_from_string(std::string_view text);
bool is_terminal(TriageState state);
bool is_legal_transition(TriageState from, TriageState to);

struct HumanVerdict {
  bool is_hallucination = false;
  std::string reason;
  std::string annotator_id;
  std::string timestamp;
};

struct TriageCase {
  std::string case_id;
  std::uint64_t seq = 0;  // detection order
  DialogueContext dialogue;
  std::string response;
  std::optional<HallucinationVerdict> detector_verdict;
  std::optional<HallucinationVerdict> verifier_verdict;
  std::optional<HumanVerdict> human_verdict;
  std::optional<std::string> optimized_reason;
  TriageState state = TriageState::Detected;
  // Set while a detector failure keeps the case in Detected.
  std::string quarantine_reason;

  bool quarantined() const { return state == TriageState::Detected && !quarantine_reason.empty(); }
  /// User-feedback hallucinations jump the annotation queue.
  bool priority() const;
};

json to_json(const TriageCase& c);
TriageCase triage_case_from_json(const json& j);

struct AuditRecord {
  std::uint64_t seq = 0;
  std::string case_id;
  std::string event;
  TriageState from = TriageState::Detected;
  TriageState to = TriageState::Detected;
  json payload;
  std::string actor;
  std::string timestamp;
};

json to_json(const AuditRecord& r);
AuditRecord audit_record_from_json(const json& j);

/// Case id for a (dialogue, response) pair; stable across runs.
std::string make_case_id(const DialogueContext& dialogue, std::string_view response);

struct Lease {
  std::string annotator_id;
  std::chrono::system_clock::time_point expires;
};

/// Single-writer case store. Every mutation runs under one writer lock and
/// appends its audit record to the JSON Lines log before touching memory;
/// reads take shared snapshots. With a path, the log is replayed on open
/// and the file is held with an exclusive lock (StoreLocked otherwise).
class TriageStore {
public:
  using Clock = std::function<std::chrono::system_clock::time_point()>;

  explicit TriageStore(std::filesystem::path path = {}, Clock clock = nullptr);
  ~TriageStore();
  TriageStore(const TriageStore&) = delete;
  TriageStore& operator=(const TriageStore&) = delete;

  /// Creates a case in Detected; an existing case with the same id is
  /// returned unchanged.
  TriageCase create(const DialogueContext& dialogue, std::string response);

  /// Applies `mutate` and moves the case from `expected` to `to`. Throws
  /// NotFound, WrongState when the case is not in `expected`, or
  /// InvalidInput for an illegal transition.
  TriageCase transition(const std::string& case_id, TriageState expected, TriageState to,
                        const std::string& event, const json& payload, const std::string& actor);

  /// Records a detector failure without changing state.
  TriageCase quarantine(const std::string& case_id, const std::string& reason);

  std::optional<TriageCase> get(const std::string& case_id) const;
  std::vector<TriageCase> snapshot() const;  // detection order
  std::vector<AuditRecord> audit_log() const;
  std::map<TriageState, std::size_t> counts() const;

  /// Leases the next AwaitingHuman case: priority cases first, then FIFO
  /// by detection order. An annotator holding a live lease gets it back.
  std::optional<TriageCase> lease_next(const std::string& annotator_id);
  std::optional<Lease> lease_of(const std::string& case_id) const;
  std::size_t active_leases() const;
  void set_lease_ttl(std::chrono::seconds ttl) { lease_ttl_ = ttl; }

  /// Human adjudication of an AwaitingHuman case. Throws WrongState,
  /// MissingReason, or LeaseConflict when another annotator holds a live
  /// lease on the case.
  TriageCase submit_human_verdict(const std::string& case_id, bool is_hallucination,
                                  const std::string& reason, const std::string& annotator_id);

  std::string now_iso() const;

  /// Rebuilds case state from an audit log.
  static std::map<std::string, TriageCase> replay(const std::vector<AuditRecord>& log);

private:
  void append(AuditRecord record);
  void apply(const AuditRecord& record);

  std::filesystem::path path_;
  Clock clock_;
  int lock_fd_ = -1;
  std::unique_ptr<JsonlWriter> log_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, TriageCase> cases_;
  std::vector<AuditRecord> audit_;
  std::map<std::string, Lease> leases_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t next_case_seq_ = 1;
  std::chrono::seconds lease_ttl_{600};
};

struct TriageEndpoints {
  std::string detector;
  std::vector<std::string> verifiers;  // unanimity required
  std::string optimizer;
};

struct CuratedCounts {
  std::size_t simple_non_halluc = 0;
  std::size_t hard_non_halluc = 0;
  std::size_t halluc = 0;
  std::size_t excluded = 0;
};

/// Drives cases through detection, verification and reason optimization.
class TriageEngine {
public:
  TriageEngine(TriageStore& store, JudgeSuite& judges, TriageEndpoints endpoints);

  /// New case, advanced to AwaitingVerifier or AwaitingHuman by the
  /// detector verdict. Detector failures quarantine the case in Detected.
  TriageCase triage_detect(const DialogueContext& dialogue, const std::string& response);
  /// Re-runs the detector on a quarantined case.
  TriageCase retry_detect(const std::string& case_id);
  TriageCase triage_verify(const std::string& case_id);
  TriageCase submit_human_verdict(const std::string& case_id, bool is_hallucination,
                                  const std::string& reason, const std::string& annotator_id);
  TriageCase optimize_reason(const std::string& case_id);

  TriageStore& store() { return store_; }

private:
  TriageCase detect(const TriageCase& c);

  TriageStore& store_;
  JudgeSuite& judges_;
  TriageEndpoints endpoints_;
};

/// Writes terminal cases as CuratedSample JSON Lines in detection order and
/// returns per-label counts. Non-terminal cases are skipped with a warning.
CuratedCounts emit_curated_corpus(const std::vector<TriageCase>& cases,
                                  const std::filesystem::path& sink);

/// -1 when the detector flags a hallucination, else 0. Detector parse
/// failures count as 0 so one bad completion cannot poison a rollout group.
double hallucination_reward(JudgeSuite& judges, const DialogueContext& dialogue,
                            std::string_view response, const std::string& detector);

}  // namespace csrpipe
