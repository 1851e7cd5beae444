#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/judges.hpp"
#include "csrpipe/util.hpp"

namespace csrpipe {

/// Per-candidate reward components. Rule and hallucination components are
/// absent in stages that do not compute them.
struct RewardVector {
  std::optional<double> r_format;  // {0,1}
  std::optional<double> r_length;  // [-1,0]
  std::optional<double> r_match;   // {-1,0}
  double r_human = 0.0;            // [0,1]
  double r_risk = 0.0;             // {0,1}
  double r_gsb = 0.0;              // {0,0.5,1}
  std::optional<double> r_halluc;  // {-1,0}
  double total = 0.0;

  /// Throws InvalidInput when a component lies outside its range.
  void check_ranges() const;
};

json to_json(const RewardVector& v);
RewardVector reward_vector_from_json(const json& j);

struct RegexRule {
  std::string pattern;
  std::string description;
  std::regex compiled;
};

/// Prohibited terms are matched as ASCII case-folded substrings; regex rules
/// use ECMAScript syntax.
class RuleSet {
public:
  RuleSet() = default;

  /// JSON with `prohibited_terms` and `regex_rules` arrays. Regex rules are
  /// objects `{pattern, description}` or bare pattern strings. Throws
  /// ConfigError when a pattern does not compile.
  static RuleSet from_json(const json& j);
  static RuleSet load(const std::string& path);

  void add_term(std::string term);
  void add_regex(std::string pattern, std::string description);

  const std::vector<std::string>& prohibited_terms() const { return terms_; }
  const std::vector<RegexRule>& regex_rules() const { return regexes_; }
  bool empty() const { return terms_.empty() && regexes_.empty(); }

private:
  std::vector<std::string> terms_;
  std::vector<RegexRule> regexes_;
};

struct MatchResult {
  double value = 0.0;  // -1 on any violation
  std::vector<std::string> matched;
};

/// 1 when `text` parses as a candidate in `mode`, else 0. HybridCot accepts
/// either record layout.
double compute_format_reward(std::string_view text, CotMode mode);

/// Soft overlong punishment with cache window rho * l_ref. Throws
/// InvalidReference when l_ref is 0 and InvalidInput when rho <= 0.
double compute_length_reward(std::size_t y_len, std::size_t l_ref, double rho);

/// Rule-match reward over an answer segment.
MatchResult compute_match_reward(std::string_view answer, const RuleSet& rules);

struct JudgeRewards {
  double r_human;
  double r_gsb;
  double r_risk;
};

JudgeRewards normalize_judge_rewards(const HumanLikenessVerdict& h, const GsbVerdict& g,
                                     const RiskVerdict& k);

/// Weighted sum of present components; absent components contribute 0.
double aggregate_reward(const RewardVector& components, const RewardWeights& weights);

/// Number of aggregate_reward calls in this process.
std::atomic<std::uint64_t>& reward_counter();

/// (r - mean) / max(population std, epsilon). All-equal groups give zeros.
/// Throws GroupTooSmall for fewer than two rewards.
std::vector<double> compute_group_advantages(const std::vector<double>& rewards,
                                             double epsilon = 1e-6);

}  // namespace csrpipe
