#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/judges.hpp"
#include "csrpipe/rewards.hpp"

namespace csrpipe {

enum class Stage { Think, BasicReject, BasicRefine, HardReject, HardRefine };

std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view text);
inline bool is_hard(Stage stage) {
  return stage == Stage::HardReject || stage == Stage::HardRefine;
}

enum class RefineCriterion { Human, MultiTurn };

/// Endpoint names for each judging role.
struct JudgeAssignment {
  std::string mining;
  std::string human_likeness;
  std::string gsb;
  std::string risk;
  std::string multiturn;
  std::string hallucination;
  std::string refiner;
  std::string reason_optimizer;
};

struct StageConfig {
  Stage stage = Stage::BasicReject;
  int n_candidates = 8;
  std::vector<std::string> generators;
  JudgeAssignment judges;
  CotMode cot_mode = CotMode::PreCot;
  std::set<RefineCriterion> refine_criteria = {RefineCriterion::Human};
  double hybrid_ratio = 0.5;
  // Added to the generator temperature for the one AllFiltered retry pass.
  double retry_temperature_boost = 0.3;
  // Fraction of rollouts scored by the hallucination detector.
  double halluc_sample_rate = 1.0;
  int workers = 4;

  /// BasicRefine must use {Human}; HardRefine must use {Human, MultiTurn}.
  void validate() const;
  static StageConfig defaults_for(Stage stage);
};

/// Prompt rendering shared by sampling and SFT emission.
std::string format_instruction(CotMode mode);
std::string render_policy_prompt(const PromptLibrary& prompts, const DialogueContext& dialogue,
                                 CotMode mode);
std::string render_generation_prompt(const PromptLibrary& prompts,
                                     const DialogueContext& dialogue);

// ---------------------------------------------------------------------------

struct SkipEntry {
  std::string dialogue_id;
  std::string reason;
};

struct ThinkResult {
  std::vector<DialogueContext> traced;  // each carries `thought`
  std::vector<SkipEntry> skipped;
  std::size_t ineligible = 0;
  std::size_t parse_failures = 0;
};

struct CandidateVerdicts {
  std::string generator;
  std::string raw;
  std::optional<CandidatePair> pair;
  std::optional<HumanLikenessVerdict> human;
  std::optional<GsbVerdict> gsb;
  std::optional<RiskVerdict> risk;
  std::string error;

  bool passes_filter() const {
    return pair && human && gsb && risk && gsb->value == Gsb::Good && !risk->risky;
  }
};

enum class Disposition { Selected, AllFiltered };

struct SelectionOutcome {
  std::optional<CandidatePair> selected;
  std::optional<std::size_t> selected_index;
  std::vector<CandidateVerdicts> verdicts;
  Disposition disposition = Disposition::AllFiltered;
  bool retried = false;

  std::optional<int> selected_score() const;
};

json to_json(const SelectionOutcome& outcome);

struct RefineOutcome {
  CandidatePair pair;
  bool improved = false;
  int original_score = 0;
  std::optional<int> refined_score;
  std::optional<bool> multiturn_passes;
  std::string error;
};

json to_json(const RefineOutcome& outcome);

struct SftInput {
  DialogueContext dialogue;
  CandidatePair pair;
  Stage stage = Stage::BasicRefine;
};

struct TrainingRecord {
  std::string dialogue_id;
  std::string rendered_prompt;
  std::string target;
  Stage stage = Stage::BasicRefine;
  CotMode cot_mode = CotMode::PreCot;
};

json to_json(const TrainingRecord& record);

struct RolloutGroup {
  std::string prompt_id;
  std::vector<std::string> candidates;  // raw sampled completions
  std::vector<RewardVector> components;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

json to_json(const RolloutGroup& group);

struct RolloutResult {
  std::string prompt_id;
  std::optional<RolloutGroup> group;
  std::string error;
};

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads. Results come
/// back in index order.
template <typename T>
std::vector<T> parallel_map(std::size_t n, int workers, const std::function<T(std::size_t)>& fn);

/// Pipeline stages over one judge suite. Stateless across calls; every
/// random draw is derived from the run seed and the record index.
class CurationPipeline {
public:
  CurationPipeline(JudgeSuite& judges, RuleSet rules = {}, RewardWeights weights = {});

  ThinkResult run_think_stage(const std::vector<DialogueContext>& corpus,
                              const StageConfig& cfg);

  /// Samples cfg.n_candidates pairs round-robin over cfg.generators, judges
  /// each, and keeps the highest human-likeness survivor of the Good and
  /// not-risky filter (lowest index on ties).
  SelectionOutcome reject_sample(const DialogueContext& dialogue, const StageConfig& cfg,
                                 std::optional<double> temperature = std::nullopt);

  /// reject_sample plus one re-sampling pass at a higher temperature when
  /// nothing survives.
  SelectionOutcome reject_sample_with_retry(const DialogueContext& dialogue,
                                            const StageConfig& cfg);

  RefineOutcome refine(const CandidatePair& pair, const DialogueContext& dialogue,
                       const StageConfig& cfg, std::optional<int> original_score = std::nullopt);

  std::vector<RolloutResult> emit_rollout_batches(const std::vector<DialogueContext>& dialogues,
                                                  const StageConfig& cfg, int group_size,
                                                  std::uint64_t seed);

  JudgeSuite& judges() { return judges_; }
  const RewardWeights& weights() const { return weights_; }

private:
  RolloutGroup score_group(const DialogueContext& dialogue, const StageConfig& cfg,
                           int group_size, std::uint64_t seed);

  JudgeSuite& judges_;
  RuleSet rules_;
  RewardWeights weights_;
};

/// Writes TrainingRecords as JSON Lines. HybridCot draws PreCot with
/// probability `hybrid_ratio` per record from derive_seed(seed, index).
/// Throws SinkUnwritable, or InvalidInput when a pair cannot be serialized.
std::size_t emit_sft_corpus(const std::vector<SftInput>& inputs, CotMode mode,
                            const std::filesystem::path& sink, const PromptLibrary& prompts,
                            std::uint64_t seed, double hybrid_ratio = 0.5);

/// The record layout used for index `index` under `mode`.
CotMode record_mode(CotMode mode, std::uint64_t seed, std::size_t index, double hybrid_ratio);

}  // namespace csrpipe

#include "csrpipe/detail/parallel.hpp"
