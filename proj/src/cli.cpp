#include "csrpipe/cli.hpp"

#include <csignal>
#include <iostream>
#include <pthread.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/service.hpp"
#include "csrpipe/version.hpp"

namespace csrpipe {

namespace {

using Clock = std::chrono::steady_clock;

struct Options {
  std::string config;
  std::string input;
  std::string output;
  std::uint64_t seed = 0;
  std::string stage;
  std::string mode;
  int group_size = 0;
  std::string report;
  std::string compare;
  std::string store;
  std::string host;
  int port = -1;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  const CliHooks& hooks;
  bool dry_run = false;
};

void init_logging(const std::string& level) {
  static std::once_flag once;
  std::call_once(once, [] {
    auto logger = spdlog::stderr_color_mt("csrpipe");
    spdlog::set_default_logger(logger);
  });
  spdlog::set_level(spdlog::level::from_str(level));
}

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void write_manifest(const std::filesystem::path& output, const std::string& command,
                    const EngineConfig& cfg, std::optional<std::uint64_t> seed,
                    const json& counts, double ms, const std::string& input) {
  json m = {{"command", command},
            {"version", kVersion},
            {"config_hash", cfg.hash},
            {"seed", seed ? json(*seed) : json(nullptr)},
            {"input", input},
            {"output", output.string()},
            {"counts", counts},
            {"timings_ms", {{command, ms}}}};
  write_text_file(output.string() + ".manifest.json", m.dump(2) + "\n");
}

Stage parse_stage(const std::string& text, Stage fallback, std::initializer_list<Stage> allowed) {
  if (text.empty()) return fallback;
  Stage s;
  try {
    s = stage_from_string(text);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  for (auto a : allowed) {
    if (a == s) return s;
  }
  throw ConfigError(fmt::format("stage '{}' is not valid for this command", text));
}

std::size_t count_with_reference(const std::vector<DialogueContext>& dialogues) {
  std::size_t n = 0;
  for (const auto& d : dialogues) {
    if (d.reference_response && !trim(*d.reference_response).empty()) ++n;
  }
  return n;
}

Runtime wire(const Context& ctx, const EngineConfig& cfg) {
  auto rt = make_runtime(cfg);
  if (ctx.hooks.on_runtime) ctx.hooks.on_runtime(rt);
  return rt;
}

int dry_run_report(const Context& ctx, const EngineConfig& cfg, const std::string& command,
                   Stage stage, std::size_t records, std::size_t with_reference,
                   const Runtime& rt) {
  auto plan = planned_requests(cfg, command, stage, records, with_reference);
  std::size_t total = 0;
  for (const auto& [_, n] : plan) total += n;
  json out = {{"command", command},
              {"dry_run", true},
              {"stage", to_string(stage)},
              {"input_records", records},
              {"config", cfg.resolved()},
              {"planned_requests", plan},
              {"total_planned_requests", total},
              {"requests_sent", rt.gateway->request_count()}};
  ctx.out << out.dump(2) << "\n";
  return kExitOk;
}

struct RecordIn {
  DialogueContext dialogue;
  CandidatePair pair;
  std::optional<int> score;
  std::optional<Stage> stage;
};

std::vector<RecordIn> load_candidate_records(const std::filesystem::path& path) {
  std::vector<RecordIn> out;
  std::size_t line = 0;
  for (const auto& j : read_jsonl(path)) {
    ++line;
    try {
      RecordIn r;
      r.dialogue = dialogue_from_json(j.at("dialogue"));
      r.pair = candidate_from_json(j.at("candidate"));
      if (j.contains("score") && !j["score"].is_null()) r.score = j["score"].get<int>();
      if (j.contains("stage")) r.stage = stage_from_string(j["stage"].get<std::string>());
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InvalidInput(fmt::format("{} line {}: {}", path.string(), line, e.what()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_think(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  auto dialogues = load_dialogues(o.input);
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "think", Stage::Think, dialogues.size(),
                          count_with_reference(dialogues), rt);
  }
  const auto start = Clock::now();
  CurationPipeline pipe(*rt.judges, cfg.rules, cfg.weights);
  auto result = pipe.run_think_stage(dialogues, cfg.stage(Stage::Think));
  JsonlWriter sink(o.output);
  for (const auto& d : result.traced) sink.write(to_json(d));
  json skipped = json::array();
  for (const auto& s : result.skipped) {
    skipped.push_back({{"dialogue_id", s.dialogue_id}, {"reason", s.reason}});
  }
  json counts = {{"input", dialogues.size()},
                 {"traced", result.traced.size()},
                 {"ineligible", result.ineligible},
                 {"parse_failures", result.parse_failures},
                 {"skipped", skipped}};
  write_manifest(o.output, "think", cfg, o.seed, counts, elapsed_ms(start), o.input);
  ctx.out << fmt::format("think: {} traced, {} ineligible, {} failed\n", result.traced.size(),
                         result.ineligible, result.parse_failures);
  return kExitOk;
}

int cmd_reject_sample(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  const auto stage = parse_stage(o.stage, Stage::BasicReject, {Stage::BasicReject, Stage::HardReject});
  const auto sc = cfg.stage(stage);
  auto dialogues = load_dialogues(o.input);
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "reject-sample", stage, dialogues.size(),
                          count_with_reference(dialogues), rt);
  }
  const auto start = Clock::now();
  CurationPipeline pipe(*rt.judges, cfg.rules, cfg.weights);
  struct Item {
    std::optional<SelectionOutcome> outcome;
    std::string error;
  };
  auto items = parallel_map<Item>(dialogues.size(), sc.workers, [&](std::size_t i) {
    try {
      return Item{pipe.reject_sample_with_retry(dialogues[i], sc), ""};
    } catch (const Error& e) {
      spdlog::warn("reject-sample {}: {}", dialogues[i].dialogue_id, e.what());
      return Item{std::nullopt, e.what()};
    }
  });
  JsonlWriter sink(o.output);
  std::size_t selected = 0, filtered = 0, failed = 0, retried = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (!item.outcome) {
      ++failed;
      continue;
    }
    const auto& oc = *item.outcome;
    if (oc.retried) ++retried;
    if (oc.disposition != Disposition::Selected) {
      ++filtered;
      continue;
    }
    ++selected;
    sink.write({{"dialogue", to_json(dialogues[i])},
                {"candidate", to_json(*oc.selected)},
                {"score", *oc.selected_score()},
                {"generator", oc.verdicts[*oc.selected_index].generator},
                {"stage", to_string(stage)},
                {"retried", oc.retried}});
  }
  json counts = {{"input", dialogues.size()},
                 {"selected", selected},
                 {"all_filtered", filtered},
                 {"failed", failed},
                 {"retried", retried}};
  write_manifest(o.output, "reject-sample", cfg, o.seed, counts, elapsed_ms(start), o.input);
  ctx.out << fmt::format("reject-sample: {} selected, {} filtered, {} failed\n", selected,
                         filtered, failed);
  return !dialogues.empty() && failed == dialogues.size() ? kExitStageFailure : kExitOk;
}

int cmd_refine(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  const auto stage = parse_stage(o.stage, Stage::BasicRefine, {Stage::BasicRefine, Stage::HardRefine});
  const auto sc = cfg.stage(stage);
  auto records = load_candidate_records(o.input);
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "refine", stage, records.size(), records.size(), rt);
  }
  const auto start = Clock::now();
  CurationPipeline pipe(*rt.judges, cfg.rules, cfg.weights);
  struct Item {
    std::optional<RefineOutcome> outcome;
    std::string error;
  };
  auto items = parallel_map<Item>(records.size(), sc.workers, [&](std::size_t i) {
    try {
      return Item{pipe.refine(records[i].pair, records[i].dialogue, sc, records[i].score), ""};
    } catch (const Error& e) {
      spdlog::warn("refine {}: {}", records[i].dialogue.dialogue_id, e.what());
      return Item{std::nullopt, e.what()};
    }
  });
  JsonlWriter sink(o.output);
  std::size_t improved = 0, kept = 0, failed = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].outcome) {
      ++failed;
      continue;
    }
    const auto& oc = *items[i].outcome;
    oc.improved ? ++improved : ++kept;
    const int score = oc.improved ? *oc.refined_score : oc.original_score;
    sink.write({{"dialogue", to_json(records[i].dialogue)},
                {"candidate", to_json(oc.pair)},
                {"score", score},
                {"stage", to_string(stage)},
                {"refine", to_json(oc)}});
  }
  json counts = {{"input", records.size()},
                 {"improved", improved},
                 {"not_improved", kept},
                 {"failed", failed}};
  write_manifest(o.output, "refine", cfg, o.seed, counts, elapsed_ms(start), o.input);
  ctx.out << fmt::format("refine: {} improved, {} kept, {} failed\n", improved, kept, failed);
  return !records.empty() && failed == records.size() ? kExitStageFailure : kExitOk;
}

int cmd_emit_sft(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  const auto stage = parse_stage(o.stage, Stage::BasicRefine,
                                 {Stage::BasicReject, Stage::BasicRefine, Stage::HardReject,
                                  Stage::HardRefine});
  const auto sc = cfg.stage(stage);
  CotMode mode = sc.cot_mode;
  if (!o.mode.empty()) {
    try {
      mode = cot_mode_from_string(o.mode);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  auto records = load_candidate_records(o.input);
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "emit-sft", stage, records.size(), records.size(), rt);
  }
  const auto start = Clock::now();
  std::vector<SftInput> inputs;
  inputs.reserve(records.size());
  for (auto& r : records) {
    inputs.push_back({std::move(r.dialogue), std::move(r.pair), r.stage.value_or(stage)});
  }
  auto n = emit_sft_corpus(inputs, mode, o.output, rt.judges->prompts(), o.seed, sc.hybrid_ratio);
  json counts = {{"input", inputs.size()}, {"records", n}, {"cot_mode", to_string(mode)}};
  write_manifest(o.output, "emit-sft", cfg, o.seed, counts, elapsed_ms(start), o.input);
  ctx.out << fmt::format("emit-sft: {} records\n", n);
  return kExitOk;
}

int cmd_emit_rollouts(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  const auto stage = parse_stage(o.stage, Stage::BasicReject, {Stage::BasicReject, Stage::HardReject});
  const auto sc = cfg.stage(stage);
  const int group_size = o.group_size > 0 ? o.group_size : cfg.group_size;
  if (group_size < 2) throw ConfigError("group size must be at least 2");
  auto dialogues = load_dialogues(o.input);
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    auto c = cfg;
    c.group_size = group_size;
    return dry_run_report(ctx, c, "emit-rollouts", stage, dialogues.size(),
                          count_with_reference(dialogues), rt);
  }
  const auto start = Clock::now();
  CurationPipeline pipe(*rt.judges, cfg.rules, cfg.weights);
  auto results = pipe.emit_rollout_batches(dialogues, sc, group_size, o.seed);
  JsonlWriter sink(o.output);
  std::size_t groups = 0, failed = 0;
  for (const auto& r : results) {
    if (!r.group) {
      ++failed;
      continue;
    }
    ++groups;
    sink.write(to_json(*r.group));
  }
  json counts = {{"input", dialogues.size()},
                 {"groups", groups},
                 {"failed", failed},
                 {"group_size", group_size}};
  write_manifest(o.output, "emit-rollouts", cfg, o.seed, counts, elapsed_ms(start), o.input);
  ctx.out << fmt::format("emit-rollouts: {} groups, {} failed\n", groups, failed);
  return !dialogues.empty() && failed == dialogues.size() ? kExitStageFailure : kExitOk;
}

int cmd_evaluate(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  std::vector<EvalInput> inputs;
  std::size_t line = 0;
  for (const auto& j : read_jsonl(o.input)) {
    ++line;
    try {
      inputs.push_back(eval_input_from_json(j));
    } catch (const json::exception& e) {
      throw InvalidInput(fmt::format("{} line {}: {}", o.input, line, e.what()));
    }
  }
  std::size_t with_ref = 0;
  for (const auto& in : inputs) {
    if (in.reference && !trim(*in.reference).empty()) ++with_ref;
  }
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "evaluate", Stage::BasicReject, inputs.size(), with_ref, rt);
  }
  const auto start = Clock::now();
  JudgeEndpoints endpoints{cfg.judges.human_likeness, cfg.judges.gsb, cfg.judges.risk,
                           cfg.judges.hallucination};
  auto judged = judge_eval_set(*rt.judges, inputs, endpoints, cfg.workers);
  for (const auto& e : judged.errors) spdlog::warn("evaluate: {}", e);
  if (judged.records.empty()) {
    ctx.err << fmt::format("evaluate: no record could be judged ({} failures)\n", judged.failures);
    return kExitStageFailure;
  }
  auto report = evaluate_set(judged.records);
  std::filesystem::path report_path(o.report);
  write_text_file(report_path, to_json(report).dump(2) + "\n");
  const auto table = render_report_table({{report_path.stem().string(), report}});
  write_text_file(report_path.string() + ".txt", table);
  ctx.out << table;
  if (!o.compare.empty()) {
    auto baseline = eval_report_from_json(json::parse(read_text_file(o.compare)));
    ctx.out << "\n" << render_comparison(compare_models(baseline, report));
  }
  json counts = {{"input", inputs.size()},
                 {"judged", judged.records.size()},
                 {"failures", judged.failures},
                 {"failure_rate", judged.failure_rate()}};
  write_manifest(report_path, "evaluate", cfg, cfg.seed, counts, elapsed_ms(start), o.input);
  if (judged.failure_rate() > cfg.eval_failure_threshold) {
    ctx.err << fmt::format("evaluate: judge failure rate {:.3f} exceeds threshold {:.3f}\n",
                           judged.failure_rate(), cfg.eval_failure_threshold);
    return kExitStageFailure;
  }
  return kExitOk;
}

std::string store_path(const EngineConfig& cfg, const Options& o) {
  auto path = o.store.empty() ? cfg.store_path : o.store;
  if (path.empty()) throw ConfigError("no store_path configured and no --store given");
  return path;
}

int cmd_triage(const Context& ctx, const Options& o, const std::string& action) {
  auto cfg = load_config(o.config);
  if (action == "detect" && cfg.triage.detector.empty()) {
    throw ConfigError("triage needs a detector endpoint");
  }
  const auto path = store_path(cfg, o);
  std::vector<std::pair<DialogueContext, std::string>> inputs;
  if (action == "detect") {
    std::size_t line = 0;
    for (const auto& j : read_jsonl(o.input)) {
      ++line;
      try {
        const auto key = j.contains("response") ? "response" : "candidate";
        inputs.emplace_back(dialogue_from_json(j.at("dialogue")), j.at(key).get<std::string>());
      } catch (const json::exception& e) {
        throw InvalidInput(fmt::format("{} line {}: {}", o.input, line, e.what()));
      }
    }
  }
  auto rt = wire(ctx, cfg);
  if (ctx.dry_run) {
    return dry_run_report(ctx, cfg, "triage-" + action, Stage::BasicReject, inputs.size(),
                          inputs.size(), rt);
  }
  TriageStore store(path);
  TriageEngine engine(store, *rt.judges, cfg.triage);
  json counts = json::object();
  if (action == "detect") {
    std::size_t verified = 0;
    for (const auto& [dialogue, response] : inputs) {
      auto c = engine.triage_detect(dialogue, response);
      if (c.state == TriageState::AwaitingVerifier) {
        engine.triage_verify(c.case_id);
        ++verified;
      }
    }
    counts["detected"] = inputs.size();
    counts["verified"] = verified;
  } else if (action == "retry") {
    std::size_t retried = 0;
    for (const auto& c : store.snapshot()) {
      if (!c.quarantined()) continue;
      auto r = engine.retry_detect(c.case_id);
      if (r.state == TriageState::AwaitingVerifier) engine.triage_verify(r.case_id);
      ++retried;
    }
    counts["retried"] = retried;
  } else if (action == "verify") {
    std::size_t verified = 0;
    for (const auto& c : store.snapshot()) {
      if (c.state != TriageState::AwaitingVerifier) continue;
      engine.triage_verify(c.case_id);
      ++verified;
    }
    counts["verified"] = verified;
  } else if (action == "optimize") {
    std::size_t optimized = 0;
    for (const auto& c : store.snapshot()) {
      if (c.state != TriageState::VerifiedHalluc) continue;
      engine.optimize_reason(c.case_id);
      ++optimized;
    }
    counts["optimized"] = optimized;
  } else if (action == "emit") {
    auto cc = emit_curated_corpus(store.snapshot(), o.output);
    counts = {{"simple_non_hallucination", cc.simple_non_halluc},
              {"hard_non_hallucination", cc.hard_non_halluc},
              {"hallucination", cc.halluc},
              {"excluded", cc.excluded}};
  }
  json states = json::object();
  for (auto [state, n] : store.counts()) states[std::string(to_string(state))] = n;
  ctx.out << json{{"action", action}, {"counts", counts}, {"states", states}}.dump(2) << "\n";
  return kExitOk;
}

int cmd_serve(const Context& ctx, const Options& o) {
  auto cfg = load_config(o.config);
  auto service_cfg = cfg.service;
  if (!o.host.empty()) service_cfg.host = o.host;
  if (o.port >= 0) service_cfg.port = o.port;
  const auto path = store_path(cfg, o);
  if (ctx.dry_run) {
    ctx.out << json{{"command", "serve"}, {"dry_run", true}, {"config", cfg.resolved()}}.dump(2)
            << "\n";
    return kExitOk;
  }
  TriageStore store(path);
  Service service(store, service_cfg);
  const int port = service.bind();
  ctx.out << fmt::format("serving on {}:{}\n", service_cfg.host, port) << std::flush;

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::thread([&service, set] {
    int sig = 0;
    sigwait(&set, &sig);
    service.stop();
  }).detach();
  service.run();
  return kExitOk;
}

}  // namespace

std::map<std::string, std::size_t> planned_requests(const EngineConfig& config,
                                                    const std::string& command, Stage stage,
                                                    std::size_t records,
                                                    std::size_t with_reference) {
  std::map<std::string, std::size_t> plan;
  auto add = [&](const std::string& endpoint, std::size_t n) {
    if (n == 0) return;
    plan[endpoint.empty() ? "<unassigned>" : endpoint] += n;
  };
  auto sampling = [&](const std::vector<std::string>& generators, std::size_t n,
                      std::size_t prompts) {
    const auto k = generators.size();
    for (std::size_t g = 0; g < k && g < n; ++g) {
      std::size_t slots = 0;
      for (std::size_t i = g; i < n; i += k) ++slots;
      auto it = config.endpoints.find(generators[g]);
      const bool batched = it == config.endpoints.end() || it->second.supports_n;
      add(generators[g], prompts * (batched ? 1 : slots));
    }
  };
  const std::size_t gsb_calls = config.gsb_swap ? 2 : 1;
  const auto sc = config.stage(stage);
  if (command == "think") {
    add(sc.judges.mining, records);
  } else if (command == "reject-sample") {
    const auto n = static_cast<std::size_t>(sc.n_candidates);
    sampling(sc.generators, n, with_reference);
    add(sc.judges.human_likeness, n * with_reference);
    add(sc.judges.gsb, n * with_reference * gsb_calls);
    add(sc.judges.risk, n * with_reference);
  } else if (command == "refine") {
    add(sc.judges.refiner, records);
    add(sc.judges.human_likeness, records);
    if (sc.refine_criteria.count(RefineCriterion::MultiTurn)) add(sc.judges.multiturn, records);
  } else if (command == "emit-rollouts") {
    const auto n = static_cast<std::size_t>(config.group_size);
    sampling(sc.generators, n, with_reference);
    add(sc.judges.human_likeness, n * with_reference);
    add(sc.judges.gsb, n * with_reference * gsb_calls);
    add(sc.judges.risk, n * with_reference);
    if (is_hard(stage)) add(sc.judges.hallucination, n * with_reference);
  } else if (command == "evaluate") {
    add(config.judges.human_likeness, records);
    add(config.judges.gsb, with_reference * gsb_calls);
    add(config.judges.risk, records);
    add(config.judges.hallucination, records);
  } else if (command == "triage-detect") {
    add(config.triage.detector, records);
    for (const auto& v : config.triage.verifiers) add(v, records);
  }
  return plan;
}

int run_cli(const std::vector<std::string>& args, const CliHooks& hooks) {
  std::ostream& out = hooks.out ? *hooks.out : std::cout;
  std::ostream& err = hooks.err ? *hooks.err : std::cerr;

  CLI::App app{"Customer-service response curation pipeline", "csrpipe"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  bool dry_run = false;
  std::string log_level = "warn";
  app.add_flag("--dry-run", dry_run, "Print the resolved config and planned requests; send nothing");
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  Options o;
  auto common = [&](CLI::App* sub, bool seed) {
    sub->add_option("--config", o.config, "Engine config JSON")->required();
    sub->add_option("--input", o.input, "Input JSON Lines")->required();
    sub->add_option("--output", o.output, "Output JSON Lines")->required();
    if (seed) sub->add_option("--seed", o.seed, "Run seed")->required();
  };
  auto* think = app.add_subcommand("think", "Mine reasoning traces from human CSR dialogues");
  common(think, true);
  auto* reject = app.add_subcommand("reject-sample", "Sample, judge and select candidates");
  common(reject, true);
  reject->add_option("--stage", o.stage, "basic_reject|hard_reject");
  auto* refine = app.add_subcommand("refine", "Rewrite selected candidates and re-judge");
  common(refine, true);
  refine->add_option("--stage", o.stage, "basic_refine|hard_refine");
  auto* sft = app.add_subcommand("emit-sft", "Write SFT training records");
  common(sft, true);
  sft->add_option("--stage", o.stage, "Stage tag for records without one");
  sft->add_option("--mode", o.mode, "pre_cot|post_cot|hybrid_cot");
  auto* rollouts = app.add_subcommand("emit-rollouts", "Sample and score rollout groups");
  common(rollouts, true);
  rollouts->add_option("--stage", o.stage, "basic_reject|hard_reject");
  rollouts->add_option("--group-size", o.group_size, "Candidates per group");

  auto* evaluate = app.add_subcommand("evaluate", "Judge an evaluation set and write a report");
  evaluate->add_option("--input", o.input, "Eval set JSON Lines")->required();
  evaluate->add_option("--judges", o.config, "Engine config naming the judges")->required();
  evaluate->add_option("--report", o.report, "Report JSON path")->required();
  evaluate->add_option("--compare", o.compare, "Baseline report JSON to diff against");

  auto* triage = app.add_subcommand("triage", "Hallucination triage store operations");
  triage->require_subcommand(1);
  std::string triage_action;
  for (auto [name, help] : {std::pair{"detect", "Detect and verify new responses"},
                            std::pair{"retry", "Re-run detection on quarantined cases"},
                            std::pair{"verify", "Verify cases awaiting a verifier"},
                            std::pair{"optimize", "Optimize reasons of confirmed cases"},
                            std::pair{"emit", "Write the curated corpus"},
                            std::pair{"status", "Print state counts"}}) {
    auto* sub = triage->add_subcommand(name, help);
    sub->add_option("--config", o.config, "Engine config JSON")->required();
    sub->add_option("--store", o.store, "Case store path (overrides config)");
    if (std::string_view(name) == "detect") sub->add_option("--input", o.input)->required();
    if (std::string_view(name) == "emit") sub->add_option("--output", o.output)->required();
    sub->callback([&triage_action, name] { triage_action = name; });
  }

  auto* serve = app.add_subcommand("serve", "Serve the triage queue API and annotator UI");
  serve->add_option("--config", o.config, "Engine config JSON")->required();
  serve->add_option("--store", o.store, "Case store path (overrides config)");
  serve->add_option("--host", o.host, "Bind host");
  serve->add_option("--port", o.port, "Bind port (0 picks a free port)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfigError;
  }

  init_logging(log_level);
  Context ctx{out, err, hooks, dry_run};
  try {
    if (think->parsed()) return cmd_think(ctx, o);
    if (reject->parsed()) return cmd_reject_sample(ctx, o);
    if (refine->parsed()) return cmd_refine(ctx, o);
    if (sft->parsed()) return cmd_emit_sft(ctx, o);
    if (rollouts->parsed()) return cmd_emit_rollouts(ctx, o);
    if (evaluate->parsed()) return cmd_evaluate(ctx, o);
    if (triage->parsed()) return cmd_triage(ctx, o, triage_action);
    if (serve->parsed()) return cmd_serve(ctx, o);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const StoreLocked& e) {
    err << "StoreLocked: " << e.what() << "\n";
    return kExitStageFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitStageFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitStageFailure;
  }
  return kExitConfigError;
}

}  // namespace csrpipe
