#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csrpipe/curation.hpp"
#include "csrpipe/eval.hpp"
#include "csrpipe/gateway.hpp"
#include "csrpipe/judges.hpp"
#include "csrpipe/rewards.hpp"
#include "csrpipe/triage.hpp"

namespace csrpipe {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  // Empty disables auth on annotation endpoints.
  std::string bearer_token;
  std::string ui_dir;
  int lease_ttl_s = 600;
};

struct EngineConfig {
  std::filesystem::path source;
  // Hash of the canonical document before env interpolation, so secrets
  // never reach manifests.
  std::string hash;
  json document;

  std::optional<std::uint64_t> seed;
  int workers = 4;
  RewardWeights weights;
  std::map<std::string, EndpointProfile> endpoints;
  std::map<std::string, StubScript> stub_scripts;
  JudgeAssignment judges;
  std::vector<std::string> generators;
  std::map<Stage, json> stage_overrides;
  std::string ruleset_path;
  RuleSet rules;
  std::string store_path;
  std::string prompt_dir;
  std::string risk_standards;
  bool gsb_swap = false;
  int reask_limit = 1;
  int group_size = 16;
  std::string archive_path;
  double eval_failure_threshold = 0.0;
  TriageEndpoints triage;
  ServiceConfig service;

  /// Stage defaults overlaid with the document's `stages.<name>` block and
  /// the top-level generators, judges and worker count.
  StageConfig stage(Stage stage) const;
  /// Resolved view with secrets redacted.
  json resolved() const;
};

/// Replaces `${NAME}` in every string value with the environment variable.
/// Throws ConfigError when a variable is unset.
json interpolate_env(const json& document);

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir`. Throws ConfigError.
EngineConfig parse_config(const json& document, const std::filesystem::path& base_dir = {});
EngineConfig load_config(const std::filesystem::path& path);

/// Gateway plus judge suite wired from a config.
struct Runtime {
  std::unique_ptr<Gateway> gateway;
  std::unique_ptr<JudgeSuite> judges;
};

Runtime make_runtime(const EngineConfig& config);

}  // namespace csrpipe
