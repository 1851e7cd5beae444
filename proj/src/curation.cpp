#include "csrpipe/curation.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/serialization.hpp"
#include "csrpipe/triage.hpp"

namespace csrpipe {

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::Think: return "think";
    case Stage::BasicReject: return "basic_reject";
    case Stage::BasicRefine: return "basic_refine";
    case Stage::HardReject: return "hard_reject";
    case Stage::HardRefine: return "hard_refine";
  }
  return "think";
}

Stage stage_from_string(std::string_view text) {
  for (auto s : {Stage::Think, Stage::BasicReject, Stage::BasicRefine, Stage::HardReject,
                 Stage::HardRefine}) {
    if (text == to_string(s)) return s;
  }
  throw InvalidInput("unknown stage '" + std::string(text) + "'");
}

void StageConfig::validate() const {
  if (n_candidates < 1) throw ConfigError("n_candidates must be positive");
  if (workers < 1) throw ConfigError("workers must be positive");
  if (hybrid_ratio < 0.0 || hybrid_ratio > 1.0) throw ConfigError("hybrid_ratio must lie in [0,1]");
  if (halluc_sample_rate < 0.0 || halluc_sample_rate > 1.0) {
    throw ConfigError("halluc_sample_rate must lie in [0,1]");
  }
  if (stage == Stage::BasicRefine && refine_criteria != std::set{RefineCriterion::Human}) {
    throw ConfigError("basic_refine uses exactly the human-likeness criterion");
  }
  if (stage == Stage::HardRefine &&
      refine_criteria != std::set{RefineCriterion::Human, RefineCriterion::MultiTurn}) {
    throw ConfigError("hard_refine uses the human-likeness and multi-turn criteria");
  }
}

StageConfig StageConfig::defaults_for(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  if (stage == Stage::HardRefine) {
    cfg.refine_criteria = {RefineCriterion::Human, RefineCriterion::MultiTurn};
  }
  return cfg;
}

std::string format_instruction(CotMode mode) {
  if (mode == CotMode::PostCot) {
    return "Write your reply to the user inside <answer></answer> first, then your reasoning "
           "inside <think></think>. Output nothing else.";
  }
  return "Write your reasoning inside <think></think>, then your reply to the user inside "
         "<answer></answer>. Output nothing else.";
}

std::string render_policy_prompt(const PromptLibrary& prompts, const DialogueContext& d,
                                 CotMode mode) {
  return prompts.render("policy", {{"history", render_history(d)},
                                   {"query", d.query},
                                   {"rag", render_rag(d)},
                                   {"format_instruction", format_instruction(mode)}});
}

std::string render_generation_prompt(const PromptLibrary& prompts, const DialogueContext& d) {
  std::string thought = "None";
  if (d.thought) {
    thought = "[Reasoning Process] " + d.thought->reasoning_process + "\n[Response Strategy] " +
              d.thought->response_strategy;
  }
  return prompts.render("generate", {{"thought", thought},
                                     {"history", render_history(d)},
                                     {"query", d.query},
                                     {"rag", render_rag(d)},
                                     {"format_instruction", format_instruction(CotMode::PreCot)}});
}

std::optional<int> SelectionOutcome::selected_score() const {
  if (!selected_index) return std::nullopt;
  const auto& v = verdicts.at(*selected_index);
  return v.human ? std::optional<int>(v.human->score) : std::nullopt;
}

json to_json(const SelectionOutcome& o) {
  json verdicts = json::array();
  for (const auto& v : o.verdicts) {
    json j = {{"generator", v.generator}};
    if (v.pair) j["candidate"] = to_json(*v.pair);
    if (v.human) j["human_likeness"] = to_json(*v.human);
    if (v.gsb) j["gsb"] = to_json(*v.gsb);
    if (v.risk) j["risk"] = to_json(*v.risk);
    if (!v.error.empty()) j["error"] = v.error;
    verdicts.push_back(std::move(j));
  }
  json j = {{"disposition", o.disposition == Disposition::Selected ? "selected" : "all_filtered"},
            {"retried", o.retried},
            {"verdicts", std::move(verdicts)}};
  if (o.selected) {
    j["selected"] = to_json(*o.selected);
    j["selected_index"] = *o.selected_index;
    j["score"] = o.selected_score().value_or(0);
  }
  return j;
}

json to_json(const RefineOutcome& o) {
  json j = {{"candidate", to_json(o.pair)},
            {"improved", o.improved},
            {"not_improved", !o.improved},
            {"original_score", o.original_score}};
  if (o.refined_score) j["refined_score"] = *o.refined_score;
  if (o.multiturn_passes) j["multiturn_passes"] = *o.multiturn_passes;
  if (!o.error.empty()) j["error"] = o.error;
  return j;
}

json to_json(const TrainingRecord& r) {
  return {{"dialogue_id", r.dialogue_id},
          {"rendered_prompt", r.rendered_prompt},
          {"target", r.target},
          {"stage", to_string(r.stage)},
          {"cot_mode", to_string(r.cot_mode)}};
}

json to_json(const RolloutGroup& g) {
  json components = json::array();
  for (const auto& c : g.components) components.push_back(to_json(c));
  return {{"prompt_id", g.prompt_id},
          {"candidates", g.candidates},
          {"rewards", g.rewards},
          {"advantages", g.advantages},
          {"components", std::move(components)}};
}

// ---------------------------------------------------------------------------

CurationPipeline::CurationPipeline(JudgeSuite& judges, RuleSet rules, RewardWeights weights)
    : judges_(judges), rules_(std::move(rules)), weights_(weights) {
  weights_.validate();
}

ThinkResult CurationPipeline::run_think_stage(const std::vector<DialogueContext>& corpus,
                                              const StageConfig& cfg) {
  struct Item {
    std::optional<DialogueContext> traced;
    std::optional<SkipEntry> skip;
    bool ineligible = false;
  };
  auto items = parallel_map<Item>(corpus.size(), cfg.workers, [&](std::size_t i) {
    const auto& d = corpus[i];
    if (!d.has_human_csr_turn()) {
      spdlog::info("think: skipping {}: no human CSR turn", d.dialogue_id);
      return Item{std::nullopt, SkipEntry{d.dialogue_id, "no human CSR turn"}, true};
    }
    try {
      auto mined = judges_.mine_thought(d, cfg.judges.mining);
      DialogueContext out = d;
      out.thought = std::move(mined.trace);
      return Item{std::move(out), std::nullopt, false};
    } catch (const ParseFailure& e) {
      spdlog::warn("think: {}: {}", d.dialogue_id, e.what());
      return Item{std::nullopt, SkipEntry{d.dialogue_id, e.what()}, false};
    } catch (const GatewayError& e) {
      spdlog::warn("think: {}: {}", d.dialogue_id, e.what());
      return Item{std::nullopt, SkipEntry{d.dialogue_id, e.what()}, false};
    }
  });

  ThinkResult result;
  for (auto& item : items) {
    if (item.traced) result.traced.push_back(std::move(*item.traced));
    if (item.skip) {
      result.skipped.push_back(std::move(*item.skip));
      if (item.ineligible) {
        ++result.ineligible;
      } else {
        ++result.parse_failures;
      }
    }
  }
  return result;
}

SelectionOutcome CurationPipeline::reject_sample(const DialogueContext& dialogue,
                                                 const StageConfig& cfg,
                                                 std::optional<double> temperature) {
  if (!dialogue.reference_response || trim(*dialogue.reference_response).empty()) {
    throw InvalidInput("dialogue " + dialogue.dialogue_id +
                       ": rejection sampling needs a reference_response");
  }
  if (cfg.generators.empty()) throw ConfigError("no generator endpoints configured");

  const auto n = static_cast<std::size_t>(cfg.n_candidates);
  const auto k = cfg.generators.size();
  const auto prompt = render_generation_prompt(judges_.prompts(), dialogue);

  SelectionOutcome outcome;
  outcome.verdicts.resize(n);
  std::size_t calls = 0;
  std::size_t failed_calls = 0;
  std::string last_error;
  for (std::size_t g = 0; g < k && g < n; ++g) {
    std::vector<std::size_t> slots;
    for (std::size_t i = g; i < n; i += k) slots.push_back(i);
    const auto& endpoint = cfg.generators[g];
    for (auto i : slots) outcome.verdicts[i].generator = endpoint;
    ++calls;
    try {
      CallOptions options;
      if (temperature) options.temperature = temperature;
      auto completions =
          judges_.gateway().complete(endpoint, prompt, static_cast<int>(slots.size()), options);
      for (std::size_t j = 0; j < slots.size(); ++j) {
        outcome.verdicts[slots[j]].raw = std::move(completions[j].text);
      }
    } catch (const GatewayError& e) {
      ++failed_calls;
      last_error = e.what();
      for (auto i : slots) outcome.verdicts[i].error = std::string("generation: ") + e.what();
    }
  }
  if (failed_calls == calls) {
    throw GenerationFailure("dialogue " + dialogue.dialogue_id +
                            ": every sampling call failed: " + last_error);
  }

  const auto& reference = *dialogue.reference_response;
  for (auto& v : outcome.verdicts) {
    if (!v.error.empty()) continue;
    try {
      auto pair = parse_candidate(v.raw, CotMode::PreCot);
      pair.origin = Origin::Sampled;
      v.pair = std::move(pair);
    } catch (const MalformedStructure& e) {
      v.error = std::string("format: ") + e.what();
      continue;
    }
    try {
      v.human = judges_.judge_human_likeness(dialogue, *v.pair, cfg.judges.human_likeness);
      v.gsb = judges_.judge_gsb(dialogue, *v.pair, reference, cfg.judges.gsb);
      v.risk = judges_.judge_risk(dialogue, *v.pair, cfg.judges.risk);
    } catch (const ParseFailure& e) {
      v.error = std::string("judge: ") + e.what();
    } catch (const GatewayError& e) {
      v.error = std::string("judge: ") + e.what();
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = outcome.verdicts[i];
    if (!v.passes_filter()) continue;
    // Strict > keeps the lowest index on ties.
    if (!outcome.selected_index || v.human->score > outcome.verdicts[*outcome.selected_index].human->score) {
      outcome.selected_index = i;
    }
  }
  if (outcome.selected_index) {
    outcome.selected = outcome.verdicts[*outcome.selected_index].pair;
    outcome.selected->mode = cfg.cot_mode == CotMode::PostCot ? CotMode::PostCot : CotMode::PreCot;
    outcome.disposition = Disposition::Selected;
  }
  return outcome;
}

SelectionOutcome CurationPipeline::reject_sample_with_retry(const DialogueContext& dialogue,
                                                            const StageConfig& cfg) {
  auto outcome = reject_sample(dialogue, cfg);
  if (outcome.disposition == Disposition::Selected) return outcome;
  double base = judges_.gateway().profile(cfg.generators.front()).temperature;
  double hotter = std::min(2.0, base + cfg.retry_temperature_boost);
  spdlog::info("reject-sample: {} all filtered, retrying at temperature {}", dialogue.dialogue_id,
               hotter);
  auto retry = reject_sample(dialogue, cfg, hotter);
  retry.retried = true;
  return retry;
}

namespace {

std::string criteria_text(const std::set<RefineCriterion>& criteria) {
  std::string out;
  if (criteria.count(RefineCriterion::Human)) {
    out +=
        "- Human-likeness: the reply should read like a skilled human agent at the top of the "
        "1-5 human-likeness scale. Natural and flexible wording without templates or "
        "repetition, precise understanding of the user's intent and references, proactive "
        "clarification, integration of the available information, and warm, empathetic "
        "handling of the user's emotions with a natural closing.\n";
  }
  if (criteria.count(RefineCriterion::MultiTurn)) {
    out +=
        "- Paragraphing: insert a paragraph break every one or two sentences, like a person "
        "sending short chat messages.\n"
        "- Multi-turn coherence: do not repeat content already given in the dialogue history, "
        "and stay consistent with earlier turns.\n";
  }
  return out;
}

}  // namespace

RefineOutcome CurationPipeline::refine(const CandidatePair& pair, const DialogueContext& dialogue,
                                       const StageConfig& cfg, std::optional<int> original_score) {
  if (pair.answer.empty() || contains_tag_literal(pair.cot) || contains_tag_literal(pair.answer)) {
    throw InvalidInput("refine needs a parseable candidate");
  }
  RefineOutcome outcome;
  outcome.pair = pair;
  outcome.original_score = original_score
                               ? *original_score
                               : judges_.judge_human_likeness(dialogue, pair,
                                                              cfg.judges.human_likeness).score;

  auto prompt = judges_.prompts().render("refine", {{"criteria", criteria_text(cfg.refine_criteria)},
                                                    {"history", render_history(dialogue)},
                                                    {"query", dialogue.query},
                                                    {"rag", render_rag(dialogue)},
                                                    {"cot", pair.cot},
                                                    {"response", pair.answer}});
  CandidatePair rewritten;
  try {
    auto text = judges_.gateway().complete(cfg.judges.refiner, prompt, 1).at(0).text;
    rewritten = parse_candidate(text, CotMode::PreCot);
  } catch (const MalformedStructure& e) {
    outcome.error = std::string("rewrite: ") + e.what();
    return outcome;
  } catch (const GatewayError& e) {
    outcome.error = std::string("rewrite: ") + e.what();
    return outcome;
  }
  rewritten.mode = pair.mode;
  rewritten.origin = Origin::Refined;

  try {
    outcome.refined_score =
        judges_.judge_human_likeness(dialogue, rewritten, cfg.judges.human_likeness).score;
    if (cfg.refine_criteria.count(RefineCriterion::MultiTurn)) {
      outcome.multiturn_passes =
          judges_.judge_multiturn(dialogue, rewritten, cfg.judges.multiturn).passes;
    }
  } catch (const ParseFailure& e) {
    outcome.error = std::string("rejudge: ") + e.what();
    return outcome;
  } catch (const GatewayError& e) {
    outcome.error = std::string("rejudge: ") + e.what();
    return outcome;
  }

  bool accepted = *outcome.refined_score >= outcome.original_score &&
                  outcome.multiturn_passes.value_or(true);
  if (accepted) {
    outcome.pair = std::move(rewritten);
    outcome.improved = true;
  }
  return outcome;
}

// ---------------------------------------------------------------------------

RolloutGroup CurationPipeline::score_group(const DialogueContext& dialogue,
                                           const StageConfig& cfg, int group_size,
                                           std::uint64_t seed) {
  if (cfg.generators.empty()) throw ConfigError("no generator endpoints configured");
  const bool hard = is_hard(cfg.stage);
  if (!dialogue.reference_response || trim(*dialogue.reference_response).empty()) {
    throw InvalidInput("dialogue " + dialogue.dialogue_id +
                       ": GSB reward needs a reference_response");
  }
  const CotMode request_mode = cfg.cot_mode == CotMode::HybridCot
                                   ? record_mode(cfg.cot_mode, seed, 0, cfg.hybrid_ratio)
                                   : cfg.cot_mode;
  const auto prompt = render_policy_prompt(judges_.prompts(), dialogue, request_mode);

  RolloutGroup group;
  group.prompt_id = dialogue.dialogue_id;
  const auto k = cfg.generators.size();
  group.candidates.resize(static_cast<std::size_t>(group_size));
  for (std::size_t g = 0; g < k && g < group.candidates.size(); ++g) {
    std::vector<std::size_t> slots;
    for (std::size_t i = g; i < group.candidates.size(); i += k) slots.push_back(i);
    auto completions = judges_.gateway().complete(cfg.generators[g], prompt,
                                                  static_cast<int>(slots.size()));
    for (std::size_t j = 0; j < slots.size(); ++j) {
      group.candidates[slots[j]] = std::move(completions[j].text);
    }
  }

  Rng rng(seed);
  const auto l_ref = dialogue.effective_reference_length();
  for (const auto& text : group.candidates) {
    RewardVector v;
    std::optional<CandidatePair> parsed;
    for (auto m : {CotMode::PreCot, CotMode::PostCot}) {
      if (cfg.cot_mode != CotMode::HybridCot && m != cfg.cot_mode) continue;
      try {
        parsed = parse_candidate(text, m);
        break;
      } catch (const MalformedStructure&) {
      }
    }
    // Unparseable rollouts are judged on their raw text.
    CandidatePair pair = parsed.value_or(CandidatePair{"", text, request_mode, Origin::Sampled});

    try {
      v.r_human = (judges_.judge_human_likeness(dialogue, pair, cfg.judges.human_likeness).score - 1) / 4.0;
    } catch (const ParseFailure& e) {
      spdlog::warn("rollout {}: human-likeness judge failed, r_human=0: {}", dialogue.dialogue_id, e.what());
    }
    try {
      auto risk = judges_.judge_risk(dialogue, pair, cfg.judges.risk);
      v.r_risk = risk.risky ? 0.0 : 1.0;
    } catch (const ParseFailure& e) {
      spdlog::warn("rollout {}: risk judge failed, r_risk=0: {}", dialogue.dialogue_id, e.what());
    }
    try {
      auto gsb = judges_.judge_gsb(dialogue, pair, *dialogue.reference_response, cfg.judges.gsb);
      v.r_gsb = gsb.value == Gsb::Good ? 1.0 : gsb.value == Gsb::Same ? 0.5 : 0.0;
    } catch (const ParseFailure& e) {
      spdlog::warn("rollout {}: GSB judge failed, r_gsb=0: {}", dialogue.dialogue_id, e.what());
    }

    if (hard) {
      v.r_format = compute_format_reward(text, cfg.cot_mode);
      if (l_ref && *l_ref > 0) {
        v.r_length = compute_length_reward(default_length_fn()(pair.answer), *l_ref, weights_.rho);
      }
      v.r_match = compute_match_reward(pair.answer, rules_).value;
      if (rng.bernoulli(cfg.halluc_sample_rate)) {
        v.r_halluc = hallucination_reward(judges_, dialogue, pair.answer, cfg.judges.hallucination);
      }
    }
    v.total = aggregate_reward(v, weights_);
    group.rewards.push_back(v.total);
    group.components.push_back(std::move(v));
  }
  group.advantages = compute_group_advantages(group.rewards);
  return group;
}

std::vector<RolloutResult> CurationPipeline::emit_rollout_batches(
    const std::vector<DialogueContext>& dialogues, const StageConfig& cfg, int group_size,
    std::uint64_t seed) {
  if (group_size < 2) throw GroupTooSmall("rollout groups need at least two candidates");
  return parallel_map<RolloutResult>(dialogues.size(), cfg.workers, [&](std::size_t i) {
    const auto& d = dialogues[i];
    try {
      return RolloutResult{d.dialogue_id, score_group(d, cfg, group_size, derive_seed(seed, i)), ""};
    } catch (const Error& e) {
      spdlog::warn("rollout {}: {}", d.dialogue_id, e.what());
      return RolloutResult{d.dialogue_id, std::nullopt, e.what()};
    }
  });
}

// ---------------------------------------------------------------------------

CotMode record_mode(CotMode mode, std::uint64_t seed, std::size_t index, double hybrid_ratio) {
  if (mode != CotMode::HybridCot) return mode;
  Rng rng(derive_seed(seed, index));
  return rng.bernoulli(hybrid_ratio) ? CotMode::PreCot : CotMode::PostCot;
}

std::size_t emit_sft_corpus(const std::vector<SftInput>& inputs, CotMode mode,
                            const std::filesystem::path& sink, const PromptLibrary& prompts,
                            std::uint64_t seed, double hybrid_ratio) {
  JsonlWriter writer(sink);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    TrainingRecord record;
    record.dialogue_id = in.dialogue.dialogue_id;
    record.stage = in.stage;
    record.cot_mode = record_mode(mode, seed, i, hybrid_ratio);
    record.rendered_prompt = render_policy_prompt(prompts, in.dialogue, record.cot_mode);
    record.target = serialize_candidate(in.pair, record.cot_mode);
    if (compute_format_reward(record.target, record.cot_mode) != 1.0) {
      throw InvalidInput("record " + record.dialogue_id + " fails the format check");
    }
    writer.write(to_json(record));
  }
  return writer.count();
}

}  // namespace csrpipe
