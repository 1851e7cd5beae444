#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/gateway.hpp"

namespace csrpipe {

// ---------------------------------------------------------------------------
// Prompt templates

struct PromptTemplate {
  std::string name;
  int version = 1;
  std::string text;
};

/// Versioned prompt templates with `{placeholder}` slots. Ships with the
/// templates under prompts/ compiled in; a directory of
/// `<judge_name>.txt` files overrides them.
class PromptLibrary {
public:
  static PromptLibrary builtin();
  static PromptLibrary from_directory(const std::filesystem::path& dir);

  /// Parses a template file body. A first line `@version N` is stripped.
  static PromptTemplate parse(std::string name, std::string_view body);

  void set(PromptTemplate tmpl);
  const PromptTemplate& get(const std::string& name) const;
  bool contains(const std::string& name) const { return templates_.count(name) != 0; }
  std::vector<std::string> names() const;

  /// Single-pass substitution: values are never re-scanned, so dialogue text
  /// containing `{query}` stays literal. Unknown placeholders are kept.
  std::string render(const std::string& name,
                     const std::map<std::string, std::string>& values) const;

private:
  std::map<std::string, PromptTemplate> templates_;
};

std::string render_history(const DialogueContext& dialogue);
std::string render_rag(const DialogueContext& dialogue);
/// Full conversation including the current query, as shown to the miner.
std::string render_dialogue(const DialogueContext& dialogue);

// ---------------------------------------------------------------------------
// Verdicts

struct HumanLikenessVerdict {
  int score = 1;
  std::string analysis;
};

enum class Gsb { Good, Same, Bad };
std::string_view to_string(Gsb value);
Gsb gsb_from_string(std::string_view text);

struct GsbVerdict {
  Gsb value = Gsb::Same;
  std::string analysis;
};

struct RiskVerdict {
  bool risky = false;
  std::string analysis;
};

enum class HallucinationLabel {
  NoHallucination,
  ImproperRagUse,
  ContextContradiction,
  UserFeedbackHallucination,
};

/// The label exactly as the detection prompt spells it.
std::string_view prompt_label(HallucinationLabel label);
std::string_view to_string(HallucinationLabel label);
HallucinationLabel hallucination_label_from_string(std::string_view text);

struct HallucinationVerdict {
  HallucinationLabel label = HallucinationLabel::NoHallucination;
  std::string reason;

  bool hallucinated() const { return label != HallucinationLabel::NoHallucination; }
};

struct MultiTurnVerdict {
  bool passes = false;
  std::string analysis;
};

struct MinedThought {
  ThoughtTrace trace;
};

json to_json(const HumanLikenessVerdict& v);
json to_json(const GsbVerdict& v);
json to_json(const RiskVerdict& v);
json to_json(const HallucinationVerdict& v);
json to_json(const MultiTurnVerdict& v);
HallucinationVerdict hallucination_verdict_from_json(const json& j);

// ---------------------------------------------------------------------------
// Parsers. All are total: they return a verdict or throw ParseFailure.
// When a marker occurs several times, the last occurrence wins.

/// Text following the last `marker`, up to the next of `stops` or the end,
/// trimmed. Empty optional when the marker is absent.
std::optional<std::string> extract_section(std::string_view text, std::string_view marker,
                                           const std::vector<std::string_view>& stops);

ThoughtTrace parse_mined_thought(std::string_view completion);
HumanLikenessVerdict parse_human_likeness(std::string_view completion);
GsbVerdict parse_gsb(std::string_view completion);
RiskVerdict parse_risk(std::string_view completion);
MultiTurnVerdict parse_multiturn(std::string_view completion);
HallucinationVerdict parse_hallucination(std::string_view completion);
std::string parse_optimized_reason(std::string_view completion);

// ---------------------------------------------------------------------------
// Judge calls

struct JudgeOptions {
  std::string risk_standards;
  // Double-call GSB with swapped positions; disagreement yields Same.
  bool gsb_swap = false;
  // Re-asks after a ParseFailure before surfacing it.
  int reask_limit = 1;
};

/// Renders prompts, calls the gateway, parses verdicts, and archives every
/// raw completion with its parsed verdict when an archive is attached.
class JudgeSuite {
public:
  JudgeSuite(Gateway& gateway, PromptLibrary prompts, JudgeOptions options = {});

  void set_archive(std::shared_ptr<JsonlWriter> archive) { archive_ = std::move(archive); }
  const PromptLibrary& prompts() const { return prompts_; }
  Gateway& gateway() { return gateway_; }
  const JudgeOptions& options() const { return options_; }

  MinedThought mine_thought(const DialogueContext& dialogue, const std::string& endpoint);
  HumanLikenessVerdict judge_human_likeness(const DialogueContext& dialogue,
                                            const CandidatePair& candidate,
                                            const std::string& endpoint);
  GsbVerdict judge_gsb(const DialogueContext& dialogue, const CandidatePair& candidate,
                       const std::string& reference, const std::string& endpoint);
  RiskVerdict judge_risk(const DialogueContext& dialogue, const CandidatePair& candidate,
                         const std::string& endpoint);
  MultiTurnVerdict judge_multiturn(const DialogueContext& dialogue, const CandidatePair& candidate,
                                   const std::string& endpoint);
  HallucinationVerdict judge_hallucination(const DialogueContext& dialogue,
                                           std::string_view response,
                                           const std::string& endpoint);
  std::string optimize_reason(const DialogueContext& dialogue, std::string_view response,
                              std::string_view reason, const std::string& endpoint);

  /// Mean score across several judges.
  double ensemble_human_likeness(const DialogueContext& dialogue, const CandidatePair& candidate,
                                 const std::vector<std::string>& endpoints);
  /// Risky unless every judge says No.
  RiskVerdict ensemble_risk(const DialogueContext& dialogue, const CandidatePair& candidate,
                            const std::vector<std::string>& endpoints);

private:
  template <typename Parser>
  auto ask(const std::string& judge, const std::string& endpoint, const std::string& prompt,
           std::string_view reminder, Parser parse) -> decltype(parse(std::string_view{}));

  std::map<std::string, std::string> base_values(const DialogueContext& dialogue) const;
  void archive(const std::string& judge, const std::string& endpoint, const std::string& prompt,
               const std::string& completion, const json& verdict, const std::string& error);

  Gateway& gateway_;
  PromptLibrary prompts_;
  JudgeOptions options_;
  std::shared_ptr<JsonlWriter> archive_;
};

}  // namespace csrpipe
