#include "csrpipe/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csrpipe/errors.hpp"
#include "csrpipe/serialization.hpp"

namespace csrpipe {

void RewardVector::check_ranges() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  auto binary = [](double v, double a, double b) { return v == a || v == b; };
  if (r_format && !binary(*r_format, 0.0, 1.0)) throw InvalidInput("r_format must be 0 or 1");
  if (r_length && !in(*r_length, -1.0, 0.0)) throw InvalidInput("r_length must lie in [-1,0]");
  if (r_match && !binary(*r_match, -1.0, 0.0)) throw InvalidInput("r_match must be -1 or 0");
  if (!in(r_human, 0.0, 1.0)) throw InvalidInput("r_human must lie in [0,1]");
  if (!binary(r_risk, 0.0, 1.0)) throw InvalidInput("r_risk must be 0 or 1");
  if (r_gsb != 0.0 && r_gsb != 0.5 && r_gsb != 1.0) throw InvalidInput("r_gsb must be 0, 0.5 or 1");
  if (r_halluc && !binary(*r_halluc, -1.0, 0.0)) throw InvalidInput("r_halluc must be -1 or 0");
}

json to_json(const RewardVector& v) {
  json j = json::object();
  if (v.r_format) j["r_format"] = *v.r_format;
  if (v.r_length) j["r_length"] = *v.r_length;
  if (v.r_match) j["r_match"] = *v.r_match;
  j["r_human"] = v.r_human;
  j["r_risk"] = v.r_risk;
  j["r_gsb"] = v.r_gsb;
  if (v.r_halluc) j["r_halluc"] = *v.r_halluc;
  j["total"] = v.total;
  return j;
}

RewardVector reward_vector_from_json(const json& j) {
  RewardVector v;
  auto opt = [&](const char* key) -> std::optional<double> {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) return it->get<double>();
    return std::nullopt;
  };
  v.r_format = opt("r_format");
  v.r_length = opt("r_length");
  v.r_match = opt("r_match");
  v.r_human = j.at("r_human").get<double>();
  v.r_risk = j.at("r_risk").get<double>();
  v.r_gsb = j.at("r_gsb").get<double>();
  v.r_halluc = opt("r_halluc");
  v.total = j.at("total").get<double>();
  return v;
}

// ---------------------------------------------------------------------------

RuleSet RuleSet::from_json(const json& j) {
  static const std::vector<std::string> known = {"prohibited_terms", "regex_rules"};
  if (!j.is_object()) throw ConfigError("rule set must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("rule set: unknown key '" + key + "'");
    }
  }
  RuleSet rules;
  try {
    for (const auto& t : j.value("prohibited_terms", json::array())) {
      rules.add_term(t.get<std::string>());
    }
    for (const auto& r : j.value("regex_rules", json::array())) {
      if (r.is_string()) {
        rules.add_regex(r.get<std::string>(), r.get<std::string>());
      } else {
        rules.add_regex(r.at("pattern").get<std::string>(),
                        r.value("description", r.at("pattern").get<std::string>()));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("rule set: ") + e.what());
  }
  return rules;
}

RuleSet RuleSet::load(const std::string& path) {
  try {
    return from_json(json::parse(read_text_file(path)));
  } catch (const json::parse_error& e) {
    throw ConfigError("rule set " + path + ": " + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
}

void RuleSet::add_term(std::string term) {
  auto folded = ascii_lower(term);
  if (folded.empty()) throw ConfigError("prohibited term is empty");
  terms_.push_back(std::move(folded));
}

void RuleSet::add_regex(std::string pattern, std::string description) {
  RegexRule rule{std::move(pattern), std::move(description), {}};
  try {
    rule.compiled = std::regex(rule.pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw ConfigError("regex rule '" + rule.pattern + "' does not compile: " + e.what());
  }
  regexes_.push_back(std::move(rule));
}

// ---------------------------------------------------------------------------

double compute_format_reward(std::string_view text, CotMode mode) {
  auto parses = [&](CotMode m) {
    try {
      parse_candidate(text, m);
      return true;
    } catch (const MalformedStructure&) {
      return false;
    }
  };
  if (mode == CotMode::HybridCot) {
    return parses(CotMode::PreCot) || parses(CotMode::PostCot) ? 1.0 : 0.0;
  }
  return parses(mode) ? 1.0 : 0.0;
}

double compute_length_reward(std::size_t y_len, std::size_t l_ref, double rho) {
  if (l_ref == 0) throw InvalidReference("reference length must be positive");
  if (!(rho > 0.0)) throw InvalidInput("rho must be positive");
  const double ref = static_cast<double>(l_ref);
  const double cache = rho * ref;
  const double len = static_cast<double>(y_len);
  if (len <= ref) return 0.0;
  if (len <= ref + cache) return -(len - ref) / cache;
  return -1.0;
}

MatchResult compute_match_reward(std::string_view answer, const RuleSet& rules) {
  MatchResult result;
  const auto folded = ascii_lower(answer);
  for (const auto& term : rules.prohibited_terms()) {
    if (folded.find(term) != std::string::npos) result.matched.push_back("term: " + term);
  }
  const std::string text(answer);
  for (const auto& rule : rules.regex_rules()) {
    if (std::regex_search(text, rule.compiled)) result.matched.push_back(rule.description);
  }
  result.value = result.matched.empty() ? 0.0 : -1.0;
  return result;
}

JudgeRewards normalize_judge_rewards(const HumanLikenessVerdict& h, const GsbVerdict& g,
                                     const RiskVerdict& k) {
  if (h.score < 1 || h.score > 5) throw InvalidInput("human-likeness score outside 1..5");
  double gsb = g.value == Gsb::Good ? 1.0 : g.value == Gsb::Same ? 0.5 : 0.0;
  return {(h.score - 1) / 4.0, gsb, k.risky ? 0.0 : 1.0};
}

std::atomic<std::uint64_t>& reward_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

double aggregate_reward(const RewardVector& c, const RewardWeights& w) {
  reward_counter().fetch_add(1, std::memory_order_relaxed);
  return w.alpha_format * c.r_format.value_or(0.0) + w.alpha_length * c.r_length.value_or(0.0) +
         w.alpha_match * c.r_match.value_or(0.0) + w.beta_human * c.r_human +
         w.beta_risk * c.r_risk + w.beta_gsb * c.r_gsb +
         w.gamma_halluc * c.r_halluc.value_or(0.0);
}

std::vector<double> compute_group_advantages(const std::vector<double>& rewards,
                                             double epsilon) {
  if (rewards.size() < 2) throw GroupTooSmall("advantage groups need at least two rewards");
  if (!(epsilon >= 0.0)) throw InvalidInput("epsilon must be non-negative");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double stddev = std::sqrt(ss / n);

  std::vector<double> out(rewards.size(), 0.0);
  bool all_equal = std::all_of(rewards.begin(), rewards.end(),
                               [&](double r) { return r == rewards.front(); });
  const double scale = std::max(stddev, epsilon);
  if (all_equal || scale == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / scale;
  return out;
}

}  // namespace csrpipe
