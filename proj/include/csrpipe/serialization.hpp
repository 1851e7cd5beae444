#pragma once

#include <string>
#include <string_view>

#include "csrpipe/core.hpp"

namespace csrpipe {

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

bool contains_tag_literal(std::string_view text);

/// Renders a pair in record mode `mode` (PreCot or PostCot).
/// Throws InvalidInput for HybridCot, an empty answer, or payloads that
/// contain tag literals.
std::string serialize_candidate(const CandidatePair& pair, CotMode mode);

/// Inverse of serialize_candidate. Whitespace is allowed around and between
/// the two segments; any other stray text, a missing, duplicated, nested or
/// misordered tag, or an empty answer raises MalformedStructure.
/// The returned pair has origin External and the given mode.
CandidatePair parse_candidate(std::string_view text, CotMode mode);

}  // namespace csrpipe
