#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/judges.hpp"

namespace csrpipe {

/// (good - bad) / (good + same + bad). Throws EmptySample on zero total.
double gsb_score(std::size_t n_good, std::size_t n_same, std::size_t n_bad);

struct EvalRecord {
  DialogueContext dialogue;
  std::string cot;
  std::string response;
  std::optional<std::string> reference;
  HumanLikenessVerdict human;
  std::optional<GsbVerdict> gsb;  // only with a reference
  RiskVerdict risk;
  HallucinationVerdict hallucination;
};

struct EvalReport {
  std::size_t n = 0;
  double mean_human_likeness = 0.0;
  std::array<std::size_t, 5> score_histogram{};  // scores 1..5
  std::optional<double> gsb_score;
  std::size_t n_good = 0;
  std::size_t n_same = 0;
  std::size_t n_bad = 0;
  double risk_rate = 0.0;
  double hallucination_rate = 0.0;
  double cot_length_mean = 0.0;
  double response_length_mean = 0.0;

  bool operator==(const EvalReport&) const = default;
};

json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const json& j);

/// Aggregates every metric. Throws EmptySample on an empty set.
EvalReport evaluate_set(const std::vector<EvalRecord>& records,
                        const LengthFn& length = default_length_fn());

/// Plain-text table in the column order CoT Length, Response Length,
/// Human-Likeness Score, Dialogue GSB Score, Critical Business Risk Rate,
/// Hallucination Rate.
std::string render_report_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

enum class Direction { HigherBetter, LowerBetter, Neutral };

struct MetricDelta {
  std::string metric;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;
  Direction direction = Direction::Neutral;
  std::optional<bool> improved;
  std::string rendered;  // e.g. "+0.44↑"
};

/// Per-metric b - a. Rates and the GSB score are shown in percentage points.
std::vector<MetricDelta> compare_models(const EvalReport& a, const EvalReport& b);
std::string render_comparison(const std::vector<MetricDelta>& deltas);

struct EvalInput {
  DialogueContext dialogue;
  std::string candidate;
  std::optional<std::string> reference;
};

/// Eval-set line: `{dialogue, candidate, reference?}`; the reference falls
/// back to the dialogue's reference_response.
EvalInput eval_input_from_json(const json& j);

struct JudgeEndpoints {
  std::string human_likeness;
  std::string gsb;
  std::string risk;
  std::string hallucination;
};

struct JudgedSet {
  std::vector<EvalRecord> records;
  std::size_t failures = 0;
  std::vector<std::string> errors;

  double failure_rate() const {
    auto total = records.size() + failures;
    return total == 0 ? 0.0 : static_cast<double>(failures) / static_cast<double>(total);
  }
};

/// Runs the four judges on every input. A record whose judge hard-fails is
/// counted in `failures` and left out of `records`.
JudgedSet judge_eval_set(JudgeSuite& judges, const std::vector<EvalInput>& inputs,
                         const JudgeEndpoints& endpoints, int workers = 1);

}  // namespace csrpipe
