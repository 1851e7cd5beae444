#include "csrpipe/judges.hpp"

#include <algorithm>
#include <numeric>
#include <regex>

#include <spdlog/spdlog.h>

#include "csrpipe/errors.hpp"
#include "csrpipe/serialization.hpp"

namespace csrpipe {

// Defined in the generated embedded_prompts.cpp.
const std::map<std::string, std::string>& embedded_prompt_files();

// ---------------------------------------------------------------------------
// PromptLibrary

PromptTemplate PromptLibrary::parse(std::string name, std::string_view body) {
  PromptTemplate tmpl;
  tmpl.name = std::move(name);
  constexpr std::string_view kVersion = "@version ";
  if (body.substr(0, kVersion.size()) == kVersion) {
    auto eol = body.find('\n');
    auto header = body.substr(kVersion.size(), eol - kVersion.size());
    try {
      tmpl.version = std::stoi(std::string(header));
    } catch (const std::exception&) {
      throw ConfigError("prompt " + tmpl.name + ": bad @version line");
    }
    body = eol == std::string_view::npos ? std::string_view{} : body.substr(eol + 1);
  }
  // Template files end with a newline that is not part of the prompt.
  while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.remove_suffix(1);
  tmpl.text = std::string(body);
  return tmpl;
}

PromptLibrary PromptLibrary::builtin() {
  PromptLibrary lib;
  for (const auto& [name, body] : embedded_prompt_files()) lib.set(parse(name, body));
  return lib;
}

PromptLibrary PromptLibrary::from_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ConfigError("prompt directory not found: " + dir.string());
  }
  PromptLibrary lib = builtin();
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".txt") continue;
    lib.set(parse(entry.path().stem().string(), read_text_file(entry.path())));
  }
  return lib;
}

void PromptLibrary::set(PromptTemplate tmpl) {
  auto name = tmpl.name;
  templates_[name] = std::move(tmpl);
}

const PromptTemplate& PromptLibrary::get(const std::string& name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw ConfigError("no prompt template named '" + name + "'");
  return it->second;
}

std::vector<std::string> PromptLibrary::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : templates_) out.push_back(name);
  return out;
}

std::string PromptLibrary::render(const std::string& name,
                                  const std::map<std::string, std::string>& values) const {
  const auto& text = get(name).text;
  std::string out;
  out.reserve(text.size() * 2);
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      auto close = text.find('}', i + 1);
      if (close != std::string::npos) {
        auto key = text.substr(i + 1, close - i - 1);
        if (auto it = values.find(key); it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += text[i++];
  }
  return out;
}

namespace {

std::string_view speaker(Role role) {
  switch (role) {
    case Role::User: return "User";
    case Role::Assistant: return "Customer Service";
    case Role::HumanCsr: return "Human Customer Service";
  }
  return "User";
}

}  // namespace

std::string render_history(const DialogueContext& d) {
  if (d.history.empty()) return "None";
  std::string out;
  for (const auto& turn : d.history) {
    if (!out.empty()) out += '\n';
    out += std::string(speaker(turn.role)) + ": " + turn.text;
  }
  return out;
}

std::string render_rag(const DialogueContext& d) {
  if (d.snippets.empty()) return "None";
  std::string out;
  for (const auto& s : d.snippets) {
    if (!out.empty()) out += '\n';
    out += "[" + s.id + "] " + s.content;
  }
  return out;
}

std::string render_dialogue(const DialogueContext& d) {
  std::string out = d.history.empty() ? std::string() : render_history(d) + "\n";
  return out + "User: " + d.query;
}

// ---------------------------------------------------------------------------
// Verdict helpers

std::string_view to_string(Gsb value) {
  switch (value) {
    case Gsb::Good: return "Good";
    case Gsb::Same: return "Same";
    case Gsb::Bad: return "Bad";
  }
  return "Same";
}

Gsb gsb_from_string(std::string_view text) {
  auto lower = ascii_lower(text);
  if (lower == "good") return Gsb::Good;
  if (lower == "same") return Gsb::Same;
  if (lower == "bad") return Gsb::Bad;
  throw InvalidInput("unknown GSB label '" + std::string(text) + "'");
}

std::string_view prompt_label(HallucinationLabel label) {
  switch (label) {
    case HallucinationLabel::NoHallucination: return "No Hallucination";
    case HallucinationLabel::ImproperRagUse: return "Improper Utilization of RAG";
    case HallucinationLabel::ContextContradiction: return "Contradictions with Context";
    case HallucinationLabel::UserFeedbackHallucination:
      return "User feedback indicating hallucinations";
  }
  return "No Hallucination";
}

std::string_view to_string(HallucinationLabel label) {
  switch (label) {
    case HallucinationLabel::NoHallucination: return "no_hallucination";
    case HallucinationLabel::ImproperRagUse: return "improper_rag_use";
    case HallucinationLabel::ContextContradiction: return "context_contradiction";
    case HallucinationLabel::UserFeedbackHallucination: return "user_feedback_hallucination";
  }
  return "no_hallucination";
}

HallucinationLabel hallucination_label_from_string(std::string_view text) {
  for (auto label : {HallucinationLabel::NoHallucination, HallucinationLabel::ImproperRagUse,
                     HallucinationLabel::ContextContradiction,
                     HallucinationLabel::UserFeedbackHallucination}) {
    if (text == to_string(label)) return label;
  }
  throw InvalidInput("unknown hallucination label '" + std::string(text) + "'");
}

json to_json(const HumanLikenessVerdict& v) {
  return {{"score", v.score}, {"analysis", v.analysis}};
}
json to_json(const GsbVerdict& v) { return {{"value", to_string(v.value)}, {"analysis", v.analysis}}; }
json to_json(const RiskVerdict& v) { return {{"risky", v.risky}, {"analysis", v.analysis}}; }
json to_json(const HallucinationVerdict& v) {
  return {{"label", to_string(v.label)}, {"reason", v.reason}};
}
json to_json(const MultiTurnVerdict& v) { return {{"passes", v.passes}, {"analysis", v.analysis}}; }

HallucinationVerdict hallucination_verdict_from_json(const json& j) {
  return {hallucination_label_from_string(j.at("label").get<std::string>()),
          j.at("reason").get<std::string>()};
}

// ---------------------------------------------------------------------------
// Parsers

namespace {

constexpr std::string_view kAnalysis = "[Analysis]";
constexpr std::string_view kScore = "[Score]";
constexpr std::string_view kGsbResult = "[GSB Evaluation Result]";
constexpr std::string_view kRiskJudgment = "[Risk Judgment]";
constexpr std::string_view kMultiTurnJudgment = "[Multi-Turn Judgment]";
constexpr std::string_view kJudgmentResult = "[Judgment Result]";
constexpr std::string_view kJudgmentReason = "[Judgment Reason]";
constexpr std::string_view kReasoningProcess = "[Reasoning Process]";
constexpr std::string_view kResponseStrategy = "[Response Strategy]";
constexpr std::string_view kOptimizedReason = "[Optimized Reason]";

// Strips decoration models put around a bare label: markdown emphasis,
// quotes, list dashes and trailing punctuation.
std::string bare_label(std::string_view text) {
  auto s = trim(text);
  auto junk = [](char c) {
    return c == '*' || c == '"' || c == '\'' || c == '`' || c == '-' || c == ' ' || c == '.' ||
           c == ':' || c == '\t';
  };
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && junk(s[b])) ++b;
  while (e > b && junk(s[e - 1])) --e;
  return s.substr(b, e - b);
}

std::string analysis_of(std::string_view text, std::string_view verdict_marker) {
  return extract_section(text, kAnalysis, {verdict_marker}).value_or("");
}

std::string require_section(std::string_view text, std::string_view marker,
                            const std::vector<std::string_view>& stops) {
  auto section = extract_section(text, marker, stops);
  if (!section) throw ParseFailure("missing marker " + std::string(marker));
  return *section;
}

}  // namespace

std::optional<std::string> extract_section(std::string_view text, std::string_view marker,
                                           const std::vector<std::string_view>& stops) {
  auto pos = text.rfind(marker);
  if (pos == std::string_view::npos) return std::nullopt;
  auto begin = pos + marker.size();
  auto end = text.size();
  for (auto stop : stops) {
    auto s = text.find(stop, begin);
    if (s != std::string_view::npos) end = std::min(end, s);
  }
  return trim(text.substr(begin, end - begin));
}

ThoughtTrace parse_mined_thought(std::string_view completion) {
  ThoughtTrace trace;
  trace.reasoning_process =
      require_section(completion, kReasoningProcess, {kResponseStrategy});
  trace.response_strategy =
      require_section(completion, kResponseStrategy, {kReasoningProcess});
  if (trace.reasoning_process.empty() || trace.response_strategy.empty()) {
    throw ParseFailure("empty [Reasoning Process] or [Response Strategy] section");
  }
  return trace;
}

HumanLikenessVerdict parse_human_likeness(std::string_view completion) {
  static const std::regex kInteger(R"(^([1-5])(\s*/\s*5)?$)");
  auto raw = bare_label(require_section(completion, kScore, {kAnalysis}));
  std::smatch m;
  if (!std::regex_match(raw, m, kInteger)) {
    throw ParseFailure("human-likeness score must be an integer in 1..5, got '" + raw + "'");
  }
  return {m[1].str()[0] - '0', analysis_of(completion, kScore)};
}

GsbVerdict parse_gsb(std::string_view completion) {
  auto raw = bare_label(require_section(completion, kGsbResult, {kAnalysis}));
  try {
    return {gsb_from_string(raw), analysis_of(completion, kGsbResult)};
  } catch (const InvalidInput&) {
    throw ParseFailure("GSB result must be Good, Same or Bad, got '" + raw + "'");
  }
}

RiskVerdict parse_risk(std::string_view completion) {
  auto raw = ascii_lower(bare_label(require_section(completion, kRiskJudgment, {kAnalysis})));
  if (raw == "yes") return {true, analysis_of(completion, kRiskJudgment)};
  if (raw == "no") return {false, analysis_of(completion, kRiskJudgment)};
  throw ParseFailure("risk judgment must be Yes or No, got '" + raw + "'");
}

MultiTurnVerdict parse_multiturn(std::string_view completion) {
  auto raw =
      ascii_lower(bare_label(require_section(completion, kMultiTurnJudgment, {kAnalysis})));
  if (raw == "pass") return {true, analysis_of(completion, kMultiTurnJudgment)};
  if (raw == "fail") return {false, analysis_of(completion, kMultiTurnJudgment)};
  throw ParseFailure("multi-turn judgment must be Pass or Fail, got '" + raw + "'");
}

HallucinationVerdict parse_hallucination(std::string_view completion) {
  auto raw = ascii_lower(bare_label(require_section(completion, kJudgmentResult, {kJudgmentReason})));
  std::optional<HallucinationLabel> label;
  for (auto candidate : {HallucinationLabel::NoHallucination, HallucinationLabel::ImproperRagUse,
                         HallucinationLabel::ContextContradiction,
                         HallucinationLabel::UserFeedbackHallucination}) {
    if (raw == ascii_lower(prompt_label(candidate))) label = candidate;
  }
  if (!label) throw ParseFailure("unknown hallucination label '" + raw + "'");

  auto reason = require_section(completion, kJudgmentReason, {kJudgmentResult});
  bool none = ascii_lower(bare_label(reason)) == "none";
  if (*label == HallucinationLabel::NoHallucination && !none) {
    throw ParseFailure("No Hallucination verdict must carry reason None");
  }
  if (*label != HallucinationLabel::NoHallucination && (none || reason.empty())) {
    throw ParseFailure("hallucination verdict needs a reason");
  }
  return {*label, none ? std::string("None") : reason};
}

std::string parse_optimized_reason(std::string_view completion) {
  auto reason = require_section(completion, kOptimizedReason, {});
  if (reason.empty()) throw ParseFailure("empty [Optimized Reason]");
  return reason;
}

// ---------------------------------------------------------------------------
// JudgeSuite

JudgeSuite::JudgeSuite(Gateway& gateway, PromptLibrary prompts, JudgeOptions options)
    : gateway_(gateway), prompts_(std::move(prompts)), options_(std::move(options)) {}

std::map<std::string, std::string> JudgeSuite::base_values(const DialogueContext& d) const {
  return {{"history", render_history(d)},
          {"query", d.query},
          {"rag", render_rag(d)},
          {"dialogue", render_dialogue(d)},
          {"risk_standards", options_.risk_standards}};
}

void JudgeSuite::archive(const std::string& judge, const std::string& endpoint,
                         const std::string& prompt, const std::string& completion,
                         const json& verdict, const std::string& error) {
  if (!archive_) return;
  json record = {{"judge", judge},
                 {"endpoint", endpoint},
                 {"fingerprint", request_fingerprint(prompt)},
                 {"completion", completion},
                 {"verdict", verdict}};
  if (!error.empty()) record["error"] = error;
  archive_->write(record);
}

template <typename Parser>
auto JudgeSuite::ask(const std::string& judge, const std::string& endpoint,
                     const std::string& prompt, std::string_view reminder, Parser parse)
    -> decltype(parse(std::string_view{})) {
  std::string current = prompt;
  for (int attempt = 0;; ++attempt) {
    auto completion = gateway_.complete(endpoint, current, 1).at(0).text;
    try {
      auto verdict = parse(completion);
      if constexpr (std::is_same_v<decltype(verdict), std::string>) {
        archive(judge, endpoint, current, completion, verdict, "");
      } else if constexpr (std::is_same_v<decltype(verdict), ThoughtTrace>) {
        archive(judge, endpoint, current, completion,
                {{"reasoning_process", verdict.reasoning_process},
                 {"response_strategy", verdict.response_strategy}},
                "");
      } else {
        archive(judge, endpoint, current, completion, to_json(verdict), "");
      }
      return verdict;
    } catch (const ParseFailure& e) {
      archive(judge, endpoint, current, completion, nullptr, e.what());
      if (attempt >= options_.reask_limit) {
        throw ParseFailure(judge + " via " + endpoint + ": " + e.what());
      }
      spdlog::debug("{}: re-asking after parse failure: {}", judge, e.what());
      current = prompt + "\n\n# Format Reminder\n" + std::string(reminder);
    }
  }
}

namespace {

std::string judge_view(const CandidatePair& candidate) {
  if (candidate.cot.empty()) return candidate.answer;
  return serialize_candidate(candidate, CotMode::PreCot);
}

}  // namespace

MinedThought JudgeSuite::mine_thought(const DialogueContext& dialogue,
                                      const std::string& endpoint) {
  if (!dialogue.has_human_csr_turn()) {
    throw InvalidInput("dialogue " + dialogue.dialogue_id + " has no human CSR turn");
  }
  auto prompt = prompts_.render("mining", base_values(dialogue));
  auto trace = ask("mining", endpoint, prompt,
                   "Your answer must contain both sections: a line starting with "
                   "[Reasoning Process] and a line starting with [Response Strategy].",
                   parse_mined_thought);
  return {std::move(trace)};
}

HumanLikenessVerdict JudgeSuite::judge_human_likeness(const DialogueContext& dialogue,
                                                      const CandidatePair& candidate,
                                                      const std::string& endpoint) {
  auto values = base_values(dialogue);
  values["response"] = judge_view(candidate);
  auto prompt = prompts_.render("human_likeness", values);
  return ask("human_likeness", endpoint, prompt,
             "End with a line `[Score] N` where N is a single integer from 1 to 5.",
             parse_human_likeness);
}

GsbVerdict JudgeSuite::judge_gsb(const DialogueContext& dialogue, const CandidatePair& candidate,
                                 const std::string& reference, const std::string& endpoint) {
  if (trim(reference).empty()) throw InvalidInput("GSB judging needs a non-empty reference");
  constexpr std::string_view kReminder =
      "End with a line `[GSB Evaluation Result] X` where X is exactly one of Good, Same, Bad.";
  auto values = base_values(dialogue);
  values["response_a"] = reference;
  values["response_b"] = candidate.answer;
  auto forward = ask("gsb", endpoint, prompts_.render("gsb", values), kReminder, parse_gsb);
  if (!options_.gsb_swap) return forward;

  values["response_a"] = candidate.answer;
  values["response_b"] = reference;
  auto swapped = ask("gsb", endpoint, prompts_.render("gsb", values), kReminder, parse_gsb);
  // The swapped call rates the reference against the candidate; flip it back
  // into the candidate's perspective before comparing.
  Gsb flipped = swapped.value == Gsb::Good ? Gsb::Bad
                : swapped.value == Gsb::Bad ? Gsb::Good
                                            : Gsb::Same;
  if (flipped == forward.value) return forward;
  return {Gsb::Same, forward.analysis + "\n[swapped] " + swapped.analysis};
}

RiskVerdict JudgeSuite::judge_risk(const DialogueContext& dialogue, const CandidatePair& candidate,
                                   const std::string& endpoint) {
  auto values = base_values(dialogue);
  values["response"] = candidate.answer;
  return ask("risk", endpoint, prompts_.render("risk", values),
             "End with a line `[Risk Judgment] Yes` or `[Risk Judgment] No`.", parse_risk);
}

MultiTurnVerdict JudgeSuite::judge_multiturn(const DialogueContext& dialogue,
                                             const CandidatePair& candidate,
                                             const std::string& endpoint) {
  auto values = base_values(dialogue);
  values["response"] = candidate.answer;
  return ask("multiturn", endpoint, prompts_.render("multiturn", values),
             "End with a line `[Multi-Turn Judgment] Pass` or `[Multi-Turn Judgment] Fail`.",
             parse_multiturn);
}

HallucinationVerdict JudgeSuite::judge_hallucination(const DialogueContext& dialogue,
                                                     std::string_view response,
                                                     const std::string& endpoint) {
  auto values = base_values(dialogue);
  values["response"] = std::string(response);
  return ask("hallucination", endpoint, prompts_.render("hallucination", values),
             "Output `[Judgment Result]` followed by exactly one of the four labels, then "
             "`[Judgment Reason]` followed by None or a brief reason.",
             parse_hallucination);
}

std::string JudgeSuite::optimize_reason(const DialogueContext& dialogue,
                                        std::string_view response, std::string_view reason,
                                        const std::string& endpoint) {
  auto values = base_values(dialogue);
  values["response"] = std::string(response);
  values["reason"] = std::string(reason);
  return ask("reason_optimizer", endpoint, prompts_.render("reason_optimizer", values),
             "Output a line starting with [Optimized Reason] followed by the rewritten reason.",
             parse_optimized_reason);
}

double JudgeSuite::ensemble_human_likeness(const DialogueContext& dialogue,
                                           const CandidatePair& candidate,
                                           const std::vector<std::string>& endpoints) {
  if (endpoints.empty()) throw ConfigError("human-likeness ensemble has no judges");
  double sum = 0.0;
  for (const auto& ep : endpoints) sum += judge_human_likeness(dialogue, candidate, ep).score;
  return sum / static_cast<double>(endpoints.size());
}

RiskVerdict JudgeSuite::ensemble_risk(const DialogueContext& dialogue,
                                      const CandidatePair& candidate,
                                      const std::vector<std::string>& endpoints) {
  if (endpoints.empty()) throw ConfigError("risk ensemble has no judges");
  RiskVerdict combined{false, ""};
  for (const auto& ep : endpoints) {
    auto v = judge_risk(dialogue, candidate, ep);
    if (v.risky) combined.risky = true;
    if (!combined.analysis.empty()) combined.analysis += "\n";
    combined.analysis += "[" + ep + "] " + v.analysis;
  }
  return combined;
}

}  // namespace csrpipe
