#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace csrpipe {

enum class Role { User, Assistant, HumanCsr };

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);

struct Turn {
  Role role = Role::User;
  std::string text;
  std::uint32_t index = 0;

  bool operator==(const Turn&) const = default;
};

struct KnowledgeSnippet {
  std::string id;
  std::string content;

  bool operator==(const KnowledgeSnippet&) const = default;
};

/// Reasoning process and response strategy mined from a human CSR dialogue.
struct ThoughtTrace {
  std::string reasoning_process;
  std::string response_strategy;

  bool operator==(const ThoughtTrace&) const = default;
};

/// Length function applied to answer text. The default counts unicode
/// scalar values; a tokenizer can be substituted.
using LengthFn = std::function<std::size_t(std::string_view)>;

/// Number of unicode scalar values in a UTF-8 string. Invalid lead bytes
/// count as one scalar each.
std::size_t utf8_length(std::string_view text);

const LengthFn& default_length_fn();

/// One service conversation: history, the current user query, retrieved
/// knowledge, and an optional reference response.
struct DialogueContext {
  std::string dialogue_id;
  std::vector<Turn> history;
  std::string query;
  std::vector<KnowledgeSnippet> snippets;
  std::optional<std::string> reference_response;
  std::optional<std::size_t> reference_length;
  std::optional<ThoughtTrace> thought;

  bool has_human_csr_turn() const;

  /// reference_length if set, else computed from reference_response with
  /// `length`. Empty when neither is available.
  std::optional<std::size_t> effective_reference_length(
      const LengthFn& length = default_length_fn()) const;

  bool operator==(const DialogueContext&) const = default;
};

/// Checks the DialogueContext invariants and fills reference_length from
/// reference_response when missing. Throws InvalidInput.
void validate(DialogueContext& dialogue, const LengthFn& length = default_length_fn());

enum class CotMode { PreCot, PostCot, HybridCot };

std::string_view to_string(CotMode mode);
CotMode cot_mode_from_string(std::string_view text);

enum class Origin { Sampled, Refined, External };

std::string_view to_string(Origin origin);
Origin origin_from_string(std::string_view text);

struct CandidatePair {
  std::string cot;
  std::string answer;
  CotMode mode = CotMode::PreCot;
  Origin origin = Origin::External;

  bool operator==(const CandidatePair&) const = default;
};

struct RewardWeights {
  double alpha_format = 0.2;
  double alpha_length = 0.5;
  double alpha_match = 1.0;
  double beta_human = 1.0;
  double beta_risk = 1.0;
  double beta_gsb = 1.0;
  double gamma_halluc = 5.0;
  double rho = 0.2;

  /// Throws InvalidInput on negative weights or non-positive rho.
  void validate() const;

  bool operator==(const RewardWeights&) const = default;
};

}  // namespace csrpipe
