#include "csrpipe/config.hpp"

#include <cstdlib>
#include <regex>
#include <set>

#include <fmt/format.h>

#include "csrpipe/errors.hpp"

namespace csrpipe {

namespace {

void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed,
                    std::string_view where) {
  if (!obj.is_object()) throw ConfigError(fmt::format("{} must be an object", where));
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->get<T>();
}

std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_absolute()) return p;
  return (base / path).lexically_normal().string();
}

RewardWeights parse_weights(const json& j) {
  reject_unknown(j,
                 {"alpha_format", "alpha_length", "alpha_match", "beta_human", "beta_risk",
                  "beta_gsb", "gamma_halluc", "rho"},
                 "weights");
  RewardWeights w;
  read(j, "alpha_format", w.alpha_format);
  read(j, "alpha_length", w.alpha_length);
  read(j, "alpha_match", w.alpha_match);
  read(j, "beta_human", w.beta_human);
  read(j, "beta_risk", w.beta_risk);
  read(j, "beta_gsb", w.beta_gsb);
  read(j, "gamma_halluc", w.gamma_halluc);
  read(j, "rho", w.rho);
  w.validate();
  return w;
}

JudgeAssignment parse_judges(const json& j, JudgeAssignment a) {
  reject_unknown(j,
                 {"mining", "human_likeness", "gsb", "risk", "multiturn", "hallucination",
                  "refiner", "reason_optimizer"},
                 "judges");
  read(j, "mining", a.mining);
  read(j, "human_likeness", a.human_likeness);
  read(j, "gsb", a.gsb);
  read(j, "risk", a.risk);
  read(j, "multiturn", a.multiturn);
  read(j, "hallucination", a.hallucination);
  read(j, "refiner", a.refiner);
  read(j, "reason_optimizer", a.reason_optimizer);
  return a;
}

void check_stage_block(const json& j, std::string_view where) {
  reject_unknown(j,
                 {"n_candidates", "generators", "judges", "cot_mode", "refine_criteria",
                  "hybrid_ratio", "retry_temperature_boost", "halluc_sample_rate", "workers"},
                 where);
}

const std::regex& env_pattern() {
  static const std::regex re(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
  return re;
}

}  // namespace

json interpolate_env(const json& document) {
  if (document.is_string()) {
    const auto& s = document.get_ref<const std::string&>();
    std::string out;
    auto begin = std::sregex_iterator(s.begin(), s.end(), env_pattern());
    std::size_t last = 0;
    for (auto it = begin; it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      out.append(s, last, static_cast<std::size_t>(m.position(0)) - last);
      const auto name = m[1].str();
      const char* value = std::getenv(name.c_str());
      if (value == nullptr) {
        throw ConfigError(fmt::format("environment variable {} is not set", name));
      }
      out += value;
      last = static_cast<std::size_t>(m.position(0) + m.length(0));
    }
    out.append(s, last);
    return out;
  }
  if (document.is_object()) {
    json out = json::object();
    for (const auto& [k, v] : document.items()) out[k] = interpolate_env(v);
    return out;
  }
  if (document.is_array()) {
    json out = json::array();
    for (const auto& v : document) out.push_back(interpolate_env(v));
    return out;
  }
  return document;
}

EngineConfig parse_config(const json& raw, const std::filesystem::path& base_dir) {
  EngineConfig c;
  c.document = raw;
  c.hash = hex64(fnv1a64(raw.dump()));
  try {
    reject_unknown(raw,
                   {"seed", "workers", "weights", "endpoints", "stub_scripts", "judges",
                    "generators", "stages", "ruleset", "store_path", "prompt_dir",
                    "risk_standards", "gsb_swap", "reask_limit", "group_size", "archive",
                    "eval", "triage", "service"},
                   "config");
    const json j = interpolate_env(raw);
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    read(j, "workers", c.workers);
    if (c.workers < 1) throw ConfigError("workers must be at least 1");
    if (j.contains("weights")) c.weights = parse_weights(j.at("weights"));

    if (j.contains("stub_scripts")) {
      for (const auto& [name, script] : j.at("stub_scripts").items()) {
        c.stub_scripts.emplace(name, StubScript::from_json(script));
      }
    }
    if (j.contains("endpoints")) {
      for (const auto& [name, profile] : j.at("endpoints").items()) {
        auto p = profile_from_json(name, profile);
        if (p.kind == BackendKind::Stub && !c.stub_scripts.count(p.stub)) {
          throw ConfigError(
              fmt::format("endpoint '{}' names unknown stub script '{}'", name, p.stub));
        }
        c.endpoints.emplace(name, std::move(p));
      }
    }
    if (j.contains("judges")) c.judges = parse_judges(j.at("judges"), {});
    read(j, "generators", c.generators);

    if (j.contains("stages")) {
      const auto& stages = j.at("stages");
      if (!stages.is_object()) throw ConfigError("stages must be an object");
      for (const auto& [name, block] : stages.items()) {
        const Stage stage = stage_from_string(name);
        check_stage_block(block, fmt::format("stages.{}", name));
        c.stage_overrides[stage] = block;
      }
    }

    read(j, "ruleset", c.ruleset_path);
    c.ruleset_path = resolve_path(c.ruleset_path, base_dir);
    if (!c.ruleset_path.empty()) c.rules = RuleSet::load(c.ruleset_path);
    read(j, "store_path", c.store_path);
    c.store_path = resolve_path(c.store_path, base_dir);
    read(j, "prompt_dir", c.prompt_dir);
    c.prompt_dir = resolve_path(c.prompt_dir, base_dir);
    read(j, "risk_standards", c.risk_standards);
    read(j, "gsb_swap", c.gsb_swap);
    read(j, "reask_limit", c.reask_limit);
    if (c.reask_limit < 0) throw ConfigError("reask_limit must be non-negative");
    read(j, "group_size", c.group_size);
    if (c.group_size < 2) throw ConfigError("group_size must be at least 2");
    read(j, "archive", c.archive_path);
    c.archive_path = resolve_path(c.archive_path, base_dir);

    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"failure_threshold"}, "eval");
      read(e, "failure_threshold", c.eval_failure_threshold);
      if (c.eval_failure_threshold < 0.0 || c.eval_failure_threshold > 1.0) {
        throw ConfigError("eval.failure_threshold must be in [0, 1]");
      }
    }
    c.triage.detector = c.judges.hallucination;
    c.triage.optimizer = c.judges.reason_optimizer;
    if (j.contains("triage")) {
      const auto& t = j.at("triage");
      reject_unknown(t, {"detector", "verifiers", "optimizer"}, "triage");
      read(t, "detector", c.triage.detector);
      read(t, "verifiers", c.triage.verifiers);
      read(t, "optimizer", c.triage.optimizer);
    }
    if (j.contains("service")) {
      const auto& s = j.at("service");
      reject_unknown(s, {"host", "port", "bearer_token", "ui_dir", "lease_ttl_s"}, "service");
      read(s, "host", c.service.host);
      read(s, "port", c.service.port);
      read(s, "bearer_token", c.service.bearer_token);
      read(s, "ui_dir", c.service.ui_dir);
      c.service.ui_dir = resolve_path(c.service.ui_dir, base_dir);
      read(s, "lease_ttl_s", c.service.lease_ttl_s);
      if (c.service.port < 0 || c.service.port > 65535) throw ConfigError("service.port out of range");
      if (c.service.lease_ttl_s < 1) throw ConfigError("service.lease_ttl_s must be positive");
    }

    // Every named endpoint must exist.
    auto need = [&](const std::string& name, std::string_view role) {
      if (!name.empty() && !c.endpoints.count(name)) {
        throw ConfigError(fmt::format("{} refers to unknown endpoint '{}'", role, name));
      }
    };
    for (const auto& g : c.generators) need(g, "generators");
    need(c.judges.mining, "judges.mining");
    need(c.judges.human_likeness, "judges.human_likeness");
    need(c.judges.gsb, "judges.gsb");
    need(c.judges.risk, "judges.risk");
    need(c.judges.multiturn, "judges.multiturn");
    need(c.judges.hallucination, "judges.hallucination");
    need(c.judges.refiner, "judges.refiner");
    need(c.judges.reason_optimizer, "judges.reason_optimizer");
    need(c.triage.detector, "triage.detector");
    for (const auto& v : c.triage.verifiers) need(v, "triage.verifiers");
    need(c.triage.optimizer, "triage.optimizer");
    for (const auto& [stage, block] : c.stage_overrides) {
      auto cfg = c.stage(stage);
      for (const auto& g : cfg.generators) need(g, "stage generators");
      need(cfg.judges.human_likeness, "stage judges");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config type error: {}", e.what()));
  }
  return c;
}

StageConfig EngineConfig::stage(Stage s) const {
  auto cfg = StageConfig::defaults_for(s);
  cfg.generators = generators;
  cfg.judges = judges;
  cfg.workers = workers;
  if (auto it = stage_overrides.find(s); it != stage_overrides.end()) {
    const auto& b = it->second;
    read(b, "n_candidates", cfg.n_candidates);
    read(b, "generators", cfg.generators);
    if (b.contains("judges")) cfg.judges = parse_judges(b.at("judges"), cfg.judges);
    if (b.contains("cot_mode")) cfg.cot_mode = cot_mode_from_string(b.at("cot_mode").get<std::string>());
    if (b.contains("refine_criteria")) {
      cfg.refine_criteria.clear();
      for (const auto& name : b.at("refine_criteria")) {
        const auto n = name.get<std::string>();
        if (n == "human") {
          cfg.refine_criteria.insert(RefineCriterion::Human);
        } else if (n == "multiturn") {
          cfg.refine_criteria.insert(RefineCriterion::MultiTurn);
        } else {
          throw ConfigError(fmt::format("unknown refine criterion '{}'", n));
        }
      }
    }
    read(b, "hybrid_ratio", cfg.hybrid_ratio);
    read(b, "retry_temperature_boost", cfg.retry_temperature_boost);
    read(b, "halluc_sample_rate", cfg.halluc_sample_rate);
    read(b, "workers", cfg.workers);
  }
  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(fmt::format("stage {}: {}", to_string(s), e.what()));
  }
  return cfg;
}

json EngineConfig::resolved() const {
  json endpoints_j = json::object();
  for (const auto& [name, p] : endpoints) endpoints_j[name] = to_json(p);
  json stages_j = json::object();
  for (auto s : {Stage::Think, Stage::BasicReject, Stage::BasicRefine, Stage::HardReject,
                 Stage::HardRefine}) {
    auto cfg = stage(s);
    json criteria = json::array();
    for (auto c : cfg.refine_criteria) {
      criteria.push_back(c == RefineCriterion::Human ? "human" : "multiturn");
    }
    stages_j[std::string(to_string(s))] = {{"n_candidates", cfg.n_candidates},
                                           {"generators", cfg.generators},
                                           {"cot_mode", to_string(cfg.cot_mode)},
                                           {"refine_criteria", criteria},
                                           {"hybrid_ratio", cfg.hybrid_ratio},
                                           {"retry_temperature_boost", cfg.retry_temperature_boost},
                                           {"halluc_sample_rate", cfg.halluc_sample_rate},
                                           {"workers", cfg.workers}};
  }
  return {{"config_hash", hash},
          {"seed", seed ? json(*seed) : json(nullptr)},
          {"workers", workers},
          {"weights",
           {{"alpha_format", weights.alpha_format},
            {"alpha_length", weights.alpha_length},
            {"alpha_match", weights.alpha_match},
            {"beta_human", weights.beta_human},
            {"beta_risk", weights.beta_risk},
            {"beta_gsb", weights.beta_gsb},
            {"gamma_halluc", weights.gamma_halluc},
            {"rho", weights.rho}}},
          {"endpoints", endpoints_j},
          {"judges",
           {{"mining", judges.mining},
            {"human_likeness", judges.human_likeness},
            {"gsb", judges.gsb},
            {"risk", judges.risk},
            {"multiturn", judges.multiturn},
            {"hallucination", judges.hallucination},
            {"refiner", judges.refiner},
            {"reason_optimizer", judges.reason_optimizer}}},
          {"stages", stages_j},
          {"ruleset", ruleset_path},
          {"store_path", store_path},
          {"prompt_dir", prompt_dir},
          {"gsb_swap", gsb_swap},
          {"reask_limit", reask_limit},
          {"group_size", group_size},
          {"eval", {{"failure_threshold", eval_failure_threshold}}},
          {"triage",
           {{"detector", triage.detector},
            {"verifiers", triage.verifiers},
            {"optimizer", triage.optimizer}}},
          {"service",
           {{"host", service.host},
            {"port", service.port},
            {"bearer_token", service.bearer_token.empty() ? "" : "<redacted>"},
            {"ui_dir", service.ui_dir},
            {"lease_ttl_s", service.lease_ttl_s}}}};
}

EngineConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(fmt::format("cannot read config {}: {}", path.string(), e.what()));
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config {} is not valid JSON: {}", path.string(), e.what()));
  }
  try {
    auto c = parse_config(doc, path.parent_path());
    c.source = path;
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

Runtime make_runtime(const EngineConfig& config) {
  Runtime rt;
  rt.gateway = std::make_unique<Gateway>();
  for (const auto& [name, script] : config.stub_scripts) rt.gateway->add_stub_script(name, script);
  for (const auto& [name, profile] : config.endpoints) rt.gateway->add_endpoint(profile);
  auto prompts = config.prompt_dir.empty() ? PromptLibrary::builtin()
                                           : PromptLibrary::from_directory(config.prompt_dir);
  JudgeOptions opts;
  opts.risk_standards = config.risk_standards;
  opts.gsb_swap = config.gsb_swap;
  opts.reask_limit = config.reask_limit;
  rt.judges = std::make_unique<JudgeSuite>(*rt.gateway, std::move(prompts), opts);
  if (!config.archive_path.empty()) {
    rt.judges->set_archive(std::make_shared<JsonlWriter>(config.archive_path, true));
  }
  return rt;
}

}  // namespace csrpipe
