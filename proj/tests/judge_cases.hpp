#pragma once

#include <string>

#include "csrpipe/errors.hpp"
#include "csrpipe/judges.hpp"

namespace testing {

/// Runs the named parser and returns its verdict in the fixture's shape,
/// or the string "parse_failure".
inline csrpipe::json run_parser(const std::string& parser, const std::string& completion) {
  using namespace csrpipe;
  try {
    if (parser == "human_likeness") return {{"score", parse_human_likeness(completion).score}};
    if (parser == "gsb") return {{"value", to_string(parse_gsb(completion).value)}};
    if (parser == "risk") return {{"risky", parse_risk(completion).risky}};
    if (parser == "multiturn") return {{"passes", parse_multiturn(completion).passes}};
    if (parser == "hallucination") return to_json(parse_hallucination(completion));
    if (parser == "mining") {
      auto t = parse_mined_thought(completion);
      return {{"reasoning_process", t.reasoning_process},
              {"response_strategy", t.response_strategy}};
    }
    if (parser == "reason_optimizer") return parse_optimized_reason(completion);
  } catch (const ParseFailure&) {
    return "parse_failure";
  }
  throw InvalidInput("unknown parser " + parser);
}

}  // namespace testing
