#include "csrpipe/dialogue_io.hpp"

#include "csrpipe/errors.hpp"

namespace csrpipe {

namespace {

const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw InvalidInput(std::string("missing field '") + key + "'");
  return *it;
}

std::string require_string(const json& j, const char* key) {
  const auto& v = require(j, key);
  if (!v.is_string()) throw InvalidInput(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace

json to_json(const ThoughtTrace& trace) {
  return {{"reasoning_process", trace.reasoning_process},
          {"response_strategy", trace.response_strategy}};
}

ThoughtTrace thought_from_json(const json& j) {
  return {require_string(j, "reasoning_process"), require_string(j, "response_strategy")};
}

json to_json(const DialogueContext& d) {
  json history = json::array();
  for (const auto& turn : d.history) {
    history.push_back({{"role", to_string(turn.role)}, {"text", turn.text}});
  }
  json snippets = json::array();
  for (const auto& s : d.snippets) snippets.push_back({{"id", s.id}, {"content", s.content}});
  json j = {{"dialogue_id", d.dialogue_id},
            {"history", std::move(history)},
            {"query", d.query},
            {"snippets", std::move(snippets)}};
  if (d.reference_response) j["reference_response"] = *d.reference_response;
  if (d.reference_length) j["reference_length"] = *d.reference_length;
  if (d.thought) j["thought"] = to_json(*d.thought);
  return j;
}

DialogueContext dialogue_from_json(const json& j) {
  if (!j.is_object()) throw InvalidInput("dialogue record must be a JSON object");
  DialogueContext d;
  d.dialogue_id = require_string(j, "dialogue_id");
  d.query = require_string(j, "query");
  if (auto it = j.find("history"); it != j.end()) {
    std::uint32_t index = 0;
    for (const auto& turn : *it) {
      d.history.push_back({role_from_string(require_string(turn, "role")),
                           require_string(turn, "text"), index++});
    }
  }
  if (auto it = j.find("snippets"); it != j.end()) {
    for (const auto& s : *it) {
      d.snippets.push_back({require_string(s, "id"), require_string(s, "content")});
    }
  }
  if (auto it = j.find("reference_response"); it != j.end() && !it->is_null()) {
    d.reference_response = it->get<std::string>();
  }
  if (auto it = j.find("reference_length"); it != j.end() && !it->is_null()) {
    if (!it->is_number_unsigned()) throw InvalidInput("reference_length must be a positive integer");
    d.reference_length = it->get<std::size_t>();
  }
  if (auto it = j.find("thought"); it != j.end() && !it->is_null()) {
    d.thought = thought_from_json(*it);
  }
  validate(d);
  return d;
}

json to_json(const CandidatePair& pair) {
  return {{"cot", pair.cot},
          {"answer", pair.answer},
          {"mode", to_string(pair.mode)},
          {"origin", to_string(pair.origin)}};
}

CandidatePair candidate_from_json(const json& j) {
  CandidatePair pair;
  pair.cot = require_string(j, "cot");
  pair.answer = require_string(j, "answer");
  if (auto it = j.find("mode"); it != j.end()) pair.mode = cot_mode_from_string(it->get<std::string>());
  if (auto it = j.find("origin"); it != j.end()) {
    pair.origin = origin_from_string(it->get<std::string>());
  }
  if (pair.answer.empty()) throw InvalidInput("candidate answer is empty");
  return pair;
}

std::vector<DialogueContext> load_dialogues(const std::filesystem::path& path) {
  std::vector<DialogueContext> out;
  std::size_t n = 0;
  for (const auto& record : read_jsonl(path)) {
    ++n;
    try {
      out.push_back(dialogue_from_json(record));
    } catch (const json::exception& e) {
      throw InvalidInput(path.string() + " record " + std::to_string(n) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput(path.string() + " record " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace csrpipe
