// Acceptance runner: one PASS/FAIL line per criterion, each with a pinned
// tolerance and wall-clock limit. Exits 1 if any criterion fails.

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "csrpipe/cli.hpp"
#include "csrpipe/eval.hpp"
#include "csrpipe/rewards.hpp"
#include "csrpipe/serialization.hpp"
#include "csrpipe/util.hpp"
#include "judge_cases.hpp"
#include "oracles.hpp"

using namespace csrpipe;

namespace {

struct Failed {
  std::string why;
};

void expect(bool ok, const std::string& why) {
  if (!ok) throw Failed{why};
}

void near(double got, double want, double tol, const std::string& what) {
  expect(std::abs(got - want) <= tol, fmt::format("{}: got {:.12g}, want {:.12g}", what, got, want));
}

// ---------------------------------------------------------------------------

std::string length_reward() {
  near(compute_length_reward(100, 100, 0.5), 0.0, 1e-9, "y=100");
  near(compute_length_reward(125, 100, 0.5), -0.5, 1e-9, "y=125");
  near(compute_length_reward(151, 100, 0.5), -1.0, 1e-9, "y=151");
  std::mt19937_64 rng(4);
  int points = 0;
  for (int sweep = 0; sweep < 10; ++sweep) {
    const std::size_t l_ref = 1 + rng() % 400;
    const double rho = 0.05 + 0.95 * static_cast<double>(rng() % 1000) / 1000.0;
    double prev = 1.0;
    for (std::size_t y = 0; y < 1000; ++y, ++points) {
      const double r = compute_length_reward(y, l_ref, rho);
      near(r, testing::length_oracle(static_cast<double>(y), static_cast<double>(l_ref), rho),
           1e-9, fmt::format("l={} rho={} y={}", l_ref, rho, y));
      expect(r <= prev + 1e-12, fmt::format("not monotone at l={} y={}", l_ref, y));
      // a unit step moves the reward by at most the ramp slope
      if (y > 0) {
        expect(prev - r <= 1.0 / (rho * static_cast<double>(l_ref)) + 1e-9,
               fmt::format("jump at l={} y={}", l_ref, y));
      }
      prev = r;
    }
  }
  return fmt::format("{} sweep points", points);
}

std::string reward_aggregation() {
  RewardWeights w;
  RewardVector best;
  best.r_format = 1;
  best.r_length = 0;
  best.r_match = 0;
  best.r_human = 1;
  best.r_risk = 1;
  best.r_gsb = 1;
  best.r_halluc = 0;
  near(aggregate_reward(best, w), 3.2, 1e-9, "all-best");
  auto halluc = best;
  halluc.r_halluc = -1;
  near(aggregate_reward(halluc, w), -1.8, 1e-9, "hallucinated");

  const std::array<double, 7> weights = {w.alpha_format, w.alpha_length, w.alpha_match,
                                         w.beta_human,   w.beta_risk,    w.beta_gsb,
                                         w.gamma_halluc};
  auto build = [](const std::array<double, 7>& a) {
    RewardVector v;
    v.r_format = a[0];
    v.r_length = a[1];
    v.r_match = a[2];
    v.r_human = a[3];
    v.r_risk = a[4];
    v.r_gsb = a[5];
    v.r_halluc = a[6];
    return v;
  };
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::array<double, 7> x{};
    for (auto& v : x) v = u(rng);
    const double base = aggregate_reward(build(x), w);
    const std::size_t k = static_cast<std::size_t>(trial) % 7;
    const double delta = u(rng);
    auto y = x;
    y[k] += delta;
    near(aggregate_reward(build(y), w) - base, weights[k] * delta, 1e-9,
         fmt::format("trial {} component {}", trial, k));
  }
  return "1000 linearity probes";
}

std::string rejection_oracle() {
  testing::RejectRig rig;
  std::mt19937_64 rng(2024);
  int ties = 0, filtered = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<testing::SimCandidate> cs(8);
    for (auto& c : cs) c = testing::random_sim(rng);
    if (trial % 25 == 0) {
      for (auto& c : cs) c.gsb = Gsb::Bad;  // forces AllFiltered
    }
    auto expected = testing::selection_oracle(cs);
    auto out = rig.run(cs);
    expect(out.selected_index == expected,
           fmt::format("trial {}: got {}, oracle {}", trial,
                       out.selected_index ? std::to_string(*out.selected_index) : "none",
                       expected ? std::to_string(*expected) : "none"));
    expect((out.disposition == Disposition::Selected) == expected.has_value(),
           fmt::format("trial {}: disposition", trial));
    if (!expected) {
      ++filtered;
      continue;
    }
    int at_best = 0;
    for (const auto& c : cs) {
      at_best += testing::selection_oracle({c}).has_value() && c.score == cs[*expected].score;
    }
    ties += at_best > 1;
  }
  expect(ties > 0 && filtered > 0, "trials never exercised ties or AllFiltered");
  return fmt::format("500 trials, {} with ties, {} AllFiltered", ties, filtered);
}

std::string grpo_advantages() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd(0, 3);
  for (int g = 0; g < 1000; ++g) {
    std::vector<double> r(16);
    for (auto& x : r) x = nd(rng) + static_cast<double>(g % 7);
    auto adv = compute_group_advantages(r);
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / 16.0;
    double ss = 0;
    for (double a : adv) ss += (a - mean) * (a - mean);
    expect(std::abs(mean) < 1e-9, fmt::format("group {} mean {}", g, mean));
    near(std::sqrt(ss / 16.0), 1.0, 1e-6, fmt::format("group {} std", g));
  }
  for (double v : {0.0, -1.8, 3.2}) {
    for (double a : compute_group_advantages(std::vector<double>(16, v))) {
      expect(a == 0.0, "all-equal group gave a nonzero advantage");
    }
  }
  return "1000 groups of 16";
}

std::string triage_state_machine() {
  testing::TempDir tmp;
  testing::TriageRig rig;
  std::vector<AuditRecord> log;
  std::vector<TriageCase> finals;
  {
    TriageStore store{tmp / "cases.log"};
    int n = 0;
    for (auto det : testing::kAllLabels) {
      for (auto ver : testing::kAllLabels) {
        for (bool human : {false, true}) {
          auto c = rig.drive(store, det, ver, human, "response " + std::to_string(n++));
          expect(is_terminal(c.state), fmt::format("case {} stuck in {}", n, to_string(c.state)));
          expect(c.state == testing::triage_oracle(det, ver, human),
                 fmt::format("{}/{}/{} ended in {}", to_string(det), to_string(ver), human,
                             to_string(c.state)));
        }
      }
    }
    expect(n == 32, "enumeration size");
    log = store.audit_log();
    finals = store.snapshot();
  }
  for (const auto& r : log) {
    if (r.event == "created" || r.event == "quarantined") continue;
    expect(is_legal_transition(r.from, r.to),
           fmt::format("illegal {} -> {}", to_string(r.from), to_string(r.to)));
  }
  // reopening replays the file-backed log
  TriageStore reopened{tmp / "cases.log"};
  auto replayed = reopened.snapshot();
  expect(replayed.size() == finals.size(), "replayed case count");
  for (std::size_t i = 0; i < finals.size(); ++i) {
    expect(to_json(replayed[i]) == to_json(finals[i]), "replay differs for " + finals[i].case_id);
  }
  return fmt::format("32 combinations, {} log records replayed", log.size());
}

std::string gsb_metric() {
  near(gsb_score(5, 3, 2), 0.3, 1e-12, "(5,3,2)");
  near(gsb_score(0, 9, 0), 0.0, 1e-12, "all Same");
  std::mt19937_64 rng(31);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t g = rng() % 100, s = rng() % 100, b = rng() % 100 + 1;
    near(gsb_score(g, s, b), -gsb_score(b, s, g), 1e-12, fmt::format("({},{},{})", g, s, b));
  }
  return "1000 antisymmetry triples";
}

std::string format_parse() {
  std::mt19937_64 rng(77);
  std::size_t accepted = 0;
  for (auto mode : {CotMode::PreCot, CotMode::PostCot, CotMode::HybridCot}) {
    for (int i = 0; i < 10000; ++i) {
      const auto text = testing::fuzz_record(rng);
      auto parses_as = [&](CotMode m) {
        try {
          parse_candidate(text, m);
          return true;
        } catch (const MalformedStructure&) {
          return false;
        }
      };
      // a hybrid record may use either layout
      const bool parses = mode == CotMode::HybridCot
                              ? parses_as(CotMode::PreCot) || parses_as(CotMode::PostCot)
                              : parses_as(mode);
      const double r = compute_format_reward(text, mode);
      expect(r == (parses ? 1.0 : 0.0), "format reward disagrees with parse on: " + text);
      expect(parses == testing::format_oracle(text, mode), "regex oracle disagrees on: " + text);
      accepted += parses;
    }
  }
  for (int i = 0; i < 1000; ++i) {
    auto p = testing::random_pair(rng);
    for (auto mode : {CotMode::PreCot, CotMode::PostCot}) {
      p.mode = mode;
      expect(parse_candidate(serialize_candidate(p, mode), mode) == p,
             fmt::format("round trip {} failed", i));
    }
  }
  return fmt::format("30000 fuzzed strings ({} well-formed), 1000 round trips", accepted);
}

std::string end_to_end() {
  testing::TempDir tmp;
  const auto cfg = (testing::fixtures() / "pipeline/config.json").string();
  auto run = [&](const std::string& tag) {
    auto p = [&](const std::string& name) { return (tmp / (tag + "-" + name)).string(); };
    const std::vector<std::vector<std::string>> steps = {
        {"think", "--input", (testing::fixtures() / "pipeline/dialogues.jsonl").string(),
         "--output", p("think.jsonl")},
        {"reject-sample", "--input", p("think.jsonl"), "--output", p("reject.jsonl")},
        {"refine", "--input", p("reject.jsonl"), "--output", p("refine.jsonl")},
        {"emit-sft", "--input", p("refine.jsonl"), "--output", p("sft.jsonl"), "--mode",
         "hybrid_cot"},
    };
    for (auto args : steps) {
      args.insert(args.begin(), {"--log-level", "off"});
      args.insert(args.end(), {"--config", cfg, "--seed", "11"});
      std::ostringstream out, err;
      CliHooks hooks;
      hooks.out = &out;
      hooks.err = &err;
      expect(run_cli(args, hooks) == kExitOk, args[2] + " failed: " + err.str());
    }
    return p("sft.jsonl");
  };
  const auto a = run("a");
  const auto b = run("b");
  expect(read_text_file(a) == read_text_file(b), "seeded runs differ");
  const auto records = read_jsonl(a);
  expect(!records.empty(), "no SFT records");
  for (const auto& rec : records) {
    const auto mode = cot_mode_from_string(rec.at("cot_mode").get<std::string>());
    expect(compute_format_reward(rec.at("target").get<std::string>(), mode) == 1.0,
           "record " + rec.at("dialogue_id").get<std::string>() + " has format reward 0");
  }
  return fmt::format("{} records, byte-identical", records.size());
}

std::string judge_parsers() {
  const auto cases = read_jsonl(testing::fixtures() / "judge_parsers.jsonl");
  expect(cases.size() == 60, fmt::format("fixture has {} cases", cases.size()));
  std::size_t agree = 0;
  std::string first_miss;
  for (const auto& c : cases) {
    const auto got = testing::run_parser(c.at("parser").get<std::string>(),
                                         c.at("completion").get<std::string>());
    if (got == c.at("expected")) {
      ++agree;
    } else if (first_miss.empty()) {
      first_miss = c.at("id").get<std::string>() + " -> " + got.dump();
    }
  }
  expect(agree == cases.size(), fmt::format("{}/{} agree; first miss {}", agree, cases.size(), first_miss));
  return "60/60 agree";
}

struct Criterion {
  const char* name;
  double limit_s;
  std::function<std::string()> run;
};

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::off);
  const std::vector<Criterion> criteria = {
      {"length reward exactness", 1.0, length_reward},
      {"reward aggregation", 1.0, reward_aggregation},
      {"rejection sampling oracle equivalence", 5.0, rejection_oracle},
      {"group advantages", 2.0, grpo_advantages},
      {"triage state machine", 1.0, triage_state_machine},
      {"GSB metric", 1.0, gsb_metric},
      {"format/parse equivalence", 5.0, format_parse},
      {"end-to-end dry run", 10.0, end_to_end},
      {"judge parsers", 1.0, judge_parsers},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.run();
    } catch (const Failed& f) {
      ok = false;
      detail = f.why;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && secs > c.limit_s) {
      ok = false;
      detail += "; over time limit";
    }
    failures += !ok;
    std::cout << fmt::format("{} {} ({:.3f}s / {:.0f}s limit): {}\n", ok ? "PASS" : "FAIL", c.name,
                             secs, c.limit_s, detail);
  }
  std::cout << fmt::format("{}/{} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
