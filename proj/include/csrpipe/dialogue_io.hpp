#pragma once

#include <filesystem>
#include <vector>

#include "csrpipe/core.hpp"
#include "csrpipe/util.hpp"

namespace csrpipe {

// Corpus wire format: `dialogue_id, history[{role,text}], query,
// snippets[{id,content}], reference_response`, plus the optional
// `reference_length` and `thought` fields added by pipeline stages.
json to_json(const DialogueContext& dialogue);
DialogueContext dialogue_from_json(const json& j);

json to_json(const ThoughtTrace& trace);
ThoughtTrace thought_from_json(const json& j);

json to_json(const CandidatePair& pair);
CandidatePair candidate_from_json(const json& j);

std::vector<DialogueContext> load_dialogues(const std::filesystem::path& path);

}  // namespace csrpipe
