#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <mutex>
#include <random>

#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/judges.hpp"
#include "judge_cases.hpp"
#include "support.hpp"

using namespace csrpipe;

namespace {

// Gateway with one endpoint per name, each answering through `fn`.
struct Rig {
  Gateway gateway;
  std::vector<std::string> prompts;
  std::mutex mu;

  void add(const std::string& name, std::function<std::string(const std::string&, int)> fn) {
    gateway.add_endpoint(testing::stub_profile(name),
                         std::make_shared<FunctionBackend>(
                             [this, fn](const std::string& prompt, int i) {
                               std::lock_guard lock(mu);
                               prompts.push_back(prompt);
                               return fn(prompt, i);
                             }));
  }
  void constant(const std::string& name, std::string text) {
    add(name, [text](const std::string&, int) { return text; });
  }
};

CandidatePair pair_of(std::string cot, std::string answer) {
  return {std::move(cot), std::move(answer), CotMode::PreCot, Origin::Sampled};
}

}  // namespace

TEST_CASE("builtin prompt library") {
  auto lib = PromptLibrary::builtin();
  for (auto name : {"mining", "human_likeness", "gsb", "risk", "multiturn", "hallucination",
                    "reason_optimizer", "refine", "generate", "policy"}) {
    INFO(name);
    REQUIRE(lib.contains(name));
    CHECK(lib.get(name).version == 1);
    CHECK(lib.get(name).text.rfind("@version", 0) == std::string::npos);
  }
  CHECK(lib.get("mining").text.find("[Reasoning Process]") != std::string::npos);
  CHECK(lib.get("gsb").text.find("{response_b}") != std::string::npos);
  CHECK_THROWS_AS(lib.get("nope"), ConfigError);
}

TEST_CASE("prompt template parsing and rendering") {
  auto t = PromptLibrary::parse("x", "@version 3\nHello {name}\n\n");
  CHECK(t.version == 3);
  CHECK(t.text == "Hello {name}");
  CHECK(PromptLibrary::parse("y", "no header").version == 1);
  CHECK_THROWS_AS(PromptLibrary::parse("z", "@version abc\nx"), ConfigError);

  PromptLibrary lib;
  lib.set({"t", 1, "Q: {query} / {unknown} / {query}"});
  // values are not re-scanned
  CHECK(lib.render("t", {{"query", "{query}"}}) == "Q: {query} / {unknown} / {query}");
  CHECK(lib.render("t", {{"query", "a{b}"}}) == "Q: a{b} / {unknown} / a{b}");
  lib.set({"open", 1, "brace { never closed {query"});
  CHECK(lib.render("open", {{"query", "x"}}) == "brace { never closed {query");
}

TEST_CASE("prompt directory overrides builtin templates") {
  testing::TempDir dir;
  std::ofstream(dir / "risk.txt") << "@version 2\nCustom {response}\n";
  auto lib = PromptLibrary::from_directory(dir.path());
  CHECK(lib.get("risk").version == 2);
  CHECK(lib.get("risk").text == "Custom {response}");
  CHECK(lib.contains("gsb"));
  CHECK_THROWS_AS(PromptLibrary::from_directory(dir / "missing"), ConfigError);
}

TEST_CASE("history and rag rendering") {
  auto d = testing::make_dialogue();
  CHECK(render_history(d) ==
        "User: Hi, my order is late.\nHuman Customer Service: Sorry to hear that, let me check.");
  CHECK(render_rag(d) == "[kb-1] Standard delivery takes 3-5 working days.");
  CHECK(render_dialogue(d) == render_history(d) + "\nUser: When will it arrive?");
  DialogueContext bare;
  bare.dialogue_id = "b";
  bare.query = "q";
  CHECK(render_history(bare) == "None");
  CHECK(render_rag(bare) == "None");
  CHECK(render_dialogue(bare) == "User: q");
}

TEST_CASE("hand-labeled parser cases") {
  auto cases = read_jsonl(testing::fixtures() / "judge_parsers.jsonl");
  REQUIRE(cases.size() == 60);
  std::map<std::string, int> per_parser;
  for (const auto& c : cases) {
    INFO(c["id"].get<std::string>());
    per_parser[c["parser"]]++;
    CHECK(testing::run_parser(c["parser"], c["completion"]) == c["expected"]);
  }
  CHECK(per_parser.size() == 7);
}

TEST_CASE("parser examples") {
  CHECK(parse_human_likeness("[Analysis] Natural.\n[Score] 4").score == 4);
  CHECK(parse_human_likeness("[Analysis] Natural.\n[Score] 4").analysis == "Natural.");
  CHECK_THROWS_AS(parse_human_likeness("[Score] 6"), ParseFailure);
  CHECK_THROWS_AS(parse_human_likeness("[Score] 3.5"), ParseFailure);
  CHECK(parse_gsb("[Analysis] a\n[GSB Evaluation Result] good").value == Gsb::Good);
  CHECK(parse_risk("[Analysis] a\n[Risk Judgment] Yes").risky);
  CHECK_FALSE(parse_risk("[Risk Judgment] No").risky);
  CHECK_THROWS_AS(parse_risk("[Analysis] nothing"), ParseFailure);
  CHECK(parse_multiturn("[Multi-Turn Judgment] Pass").passes);

  auto none = parse_hallucination("[Judgment Result] No Hallucination\n[Judgment Reason] None");
  CHECK(none.label == HallucinationLabel::NoHallucination);
  CHECK_FALSE(none.hallucinated());
  auto rag = parse_hallucination(
      "[Judgment Result] Improper Utilization of RAG\n[Judgment Reason] Wrong window.");
  CHECK(rag.label == HallucinationLabel::ImproperRagUse);
  CHECK(rag.reason == "Wrong window.");
  CHECK_THROWS_AS(
      parse_hallucination("[Judgment Result] No Hallucination\n[Judgment Reason] Fine."),
      ParseFailure);
}

TEST_CASE("extract_section") {
  CHECK_FALSE(extract_section("abc", "[X]", {}).has_value());
  CHECK(*extract_section("[X] a [Y] b [X] c", "[X]", {"[Y]"}) == "c");
  CHECK(*extract_section("[X]  a  [Y] b", "[X]", {"[Y]"}) == "a");
  CHECK(*extract_section("[X]", "[X]", {}) == "");
}

TEST_CASE("mining parser is independent of marker order and surrounding text") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 50; ++i) {
    std::string reasoning = "reason " + std::to_string(i);
    std::string strategy = "strategy " + std::to_string(i * 7);
    std::vector<std::string> parts = {"[Reasoning Process] " + reasoning,
                                      "[Response Strategy] " + strategy};
    if (rng() % 2) std::swap(parts[0], parts[1]);
    std::string text = (rng() % 2 ? "Preamble line.\n" : "") + parts[0] +
                       (rng() % 2 ? "\n\n" : "\n") + parts[1] + (rng() % 2 ? "\n" : "");
    auto t = parse_mined_thought(text);
    REQUIRE(t.reasoning_process == reasoning);
    REQUIRE(t.response_strategy == strategy);
  }
}

TEST_CASE("judge re-asks once with a format reminder") {
  Rig rig;
  int calls = 0;
  rig.add("j", [&](const std::string&, int) {
    return ++calls == 1 ? std::string("I think it is good") : std::string("[Score] 3");
  });
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
  auto archive_dir = testing::TempDir();
  auto writer = std::make_shared<JsonlWriter>(archive_dir / "archive.jsonl");
  suite.set_archive(writer);

  auto d = testing::make_dialogue();
  auto v = suite.judge_human_likeness(d, pair_of("", "Soon."), "j");
  CHECK(v.score == 3);
  REQUIRE(rig.prompts.size() == 2);
  CHECK(rig.prompts[1].rfind(rig.prompts[0], 0) == 0);
  CHECK(rig.prompts[1].find("# Format Reminder") != std::string::npos);
  CHECK(rig.prompts[0].find("Soon.") != std::string::npos);
  CHECK(rig.prompts[0].find("When will it arrive?") != std::string::npos);

  writer.reset();
  suite.set_archive(nullptr);
  auto rows = read_jsonl(archive_dir / "archive.jsonl");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["error"].is_string());
  CHECK(rows[0]["verdict"].is_null());
  CHECK(rows[1]["verdict"]["score"] == 3);
  CHECK(rows[1]["judge"] == "human_likeness");
  CHECK(rows[1]["fingerprint"] == request_fingerprint(rig.prompts[1]));
}

TEST_CASE("judge surfaces ParseFailure after the re-ask budget") {
  Rig rig;
  rig.constant("j", "no markers");
  auto d = testing::make_dialogue();
  {
    JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
    CHECK_THROWS_AS(suite.judge_risk(d, pair_of("", "x"), "j"), ParseFailure);
    CHECK(rig.prompts.size() == 2);
  }
  rig.prompts.clear();
  JudgeSuite strict(rig.gateway, PromptLibrary::builtin(), {"", false, 0});
  CHECK_THROWS_AS(strict.judge_multiturn(d, pair_of("", "x"), "j"), ParseFailure);
  CHECK(rig.prompts.size() == 1);
}

TEST_CASE("judges see the pre-CoT view when a trace exists") {
  Rig rig;
  rig.constant("j", "[Score] 5");
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
  auto d = testing::make_dialogue();
  suite.judge_human_likeness(d, {"why", "Soon.", CotMode::PostCot, Origin::Sampled}, "j");
  CHECK(rig.prompts.back().find("<think>why</think><answer>Soon.</answer>") != std::string::npos);
}

TEST_CASE("mine_thought requires a human CSR turn") {
  Rig rig;
  rig.constant("m", "[Reasoning Process] r\n[Response Strategy] s");
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
  auto t = suite.mine_thought(testing::make_dialogue(), "m");
  CHECK(t.trace == ThoughtTrace{"r", "s"});
  CHECK(rig.prompts[0].find("User: When will it arrive?") != std::string::npos);
  CHECK_THROWS_AS(suite.mine_thought(testing::make_dialogue("x", false), "m"), InvalidInput);
  CHECK(rig.prompts.size() == 1);
}

TEST_CASE("GSB puts the reference first and the candidate second") {
  Rig rig;
  rig.constant("j", "[GSB Evaluation Result] Good");
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
  auto d = testing::make_dialogue();
  suite.judge_gsb(d, pair_of("", "CANDIDATE"), "REFERENCE", "j");
  const auto& p = rig.prompts[0];
  CHECK(p.find("REFERENCE") < p.find("CANDIDATE"));
  CHECK_THROWS_AS(suite.judge_gsb(d, pair_of("", "x"), "  ", "j"), InvalidInput);
}

TEST_CASE("GSB swap: agreement keeps the verdict, disagreement yields Same") {
  auto d = testing::make_dialogue();
  auto run = [&](std::string forward, std::string swapped) {
    Rig rig;
    rig.add("j", [&](const std::string& prompt, int) {
      bool is_swapped = prompt.find("CANDIDATE") < prompt.find("REFERENCE");
      return "[GSB Evaluation Result] " + (is_swapped ? swapped : forward);
    });
    JudgeSuite suite(rig.gateway, PromptLibrary::builtin(), {"", true, 1});
    auto v = suite.judge_gsb(d, pair_of("", "CANDIDATE"), "REFERENCE", "j");
    CHECK(rig.prompts.size() == 2);
    return v.value;
  };
  CHECK(run("Good", "Bad") == Gsb::Good);
  CHECK(run("Bad", "Good") == Gsb::Bad);
  CHECK(run("Same", "Same") == Gsb::Same);
  CHECK(run("Good", "Good") == Gsb::Same);
  CHECK(run("Good", "Same") == Gsb::Same);
}

TEST_CASE("ensembles") {
  Rig rig;
  rig.constant("a", "[Score] 4");
  rig.constant("b", "[Score] 5");
  rig.constant("safe", "[Risk Judgment] No");
  rig.constant("risky", "[Analysis] refund promise\n[Risk Judgment] Yes");
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin(), {"No refunds.", false, 1});
  auto d = testing::make_dialogue();
  auto c = pair_of("", "x");
  CHECK(suite.ensemble_human_likeness(d, c, {"a", "b"}) == doctest::Approx(4.5));
  CHECK_FALSE(suite.ensemble_risk(d, c, {"safe", "safe"}).risky);
  auto r = suite.ensemble_risk(d, c, {"safe", "risky"});
  CHECK(r.risky);
  CHECK(r.analysis.find("[risky] refund promise") != std::string::npos);
  CHECK_THROWS_AS(suite.ensemble_risk(d, c, {}), ConfigError);
  // risk standards reach the prompt
  CHECK(rig.prompts.back().find("No refunds.") != std::string::npos);
}

TEST_CASE("hallucination judge and reason optimizer") {
  Rig rig;
  rig.constant("h", "[Judgment Result] Contradictions with Context\n[Judgment Reason] Asked twice.");
  rig.constant("o", "[Optimized Reason] The reply asks for the address already given.");
  JudgeSuite suite(rig.gateway, PromptLibrary::builtin());
  auto d = testing::make_dialogue();
  auto v = suite.judge_hallucination(d, "What is your address?", "h");
  CHECK(v.label == HallucinationLabel::ContextContradiction);
  CHECK(rig.prompts[0].find("What is your address?") != std::string::npos);
  auto reason = suite.optimize_reason(d, "What is your address?", v.reason, "o");
  CHECK(reason == "The reply asks for the address already given.");
  CHECK(rig.prompts[1].find("Asked twice.") != std::string::npos);
}

TEST_CASE("verdict JSON") {
  CHECK(to_json(GsbVerdict{Gsb::Bad, "a"})["value"] == "Bad");
  HallucinationVerdict v{HallucinationLabel::UserFeedbackHallucination, "r"};
  CHECK(hallucination_verdict_from_json(to_json(v)).label == v.label);
  CHECK_THROWS_AS(hallucination_label_from_string("weird"), InvalidInput);
  CHECK_THROWS_AS(gsb_from_string("meh"), InvalidInput);
}
