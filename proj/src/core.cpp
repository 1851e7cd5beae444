#include "csrpipe/core.hpp"

#include <algorithm>
#include <cctype>

#include "csrpipe/errors.hpp"

namespace csrpipe {

namespace {

bool is_blank(std::string_view text) {
  return std::all_of(text.begin(), text.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::HumanCsr: return "human_csr";
  }
  return "user";
}

Role role_from_string(std::string_view text) {
  if (text == "user") return Role::User;
  if (text == "assistant") return Role::Assistant;
  if (text == "human_csr") return Role::HumanCsr;
  throw InvalidInput("unknown role '" + std::string(text) + "'");
}

std::string_view to_string(CotMode mode) {
  switch (mode) {
    case CotMode::PreCot: return "pre_cot";
    case CotMode::PostCot: return "post_cot";
    case CotMode::HybridCot: return "hybrid_cot";
  }
  return "pre_cot";
}

CotMode cot_mode_from_string(std::string_view text) {
  if (text == "pre_cot") return CotMode::PreCot;
  if (text == "post_cot") return CotMode::PostCot;
  if (text == "hybrid_cot") return CotMode::HybridCot;
  throw InvalidInput("unknown cot mode '" + std::string(text) + "'");
}

std::string_view to_string(Origin origin) {
  switch (origin) {
    case Origin::Sampled: return "sampled";
    case Origin::Refined: return "refined";
    case Origin::External: return "external";
  }
  return "external";
}

Origin origin_from_string(std::string_view text) {
  if (text == "sampled") return Origin::Sampled;
  if (text == "refined") return Origin::Refined;
  if (text == "external") return Origin::External;
  throw InvalidInput("unknown origin '" + std::string(text) + "'");
}

std::size_t utf8_length(std::string_view text) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < text.size();) {
    auto lead = static_cast<unsigned char>(text[i]);
    std::size_t width = 1;
    if (lead >= 0xF0 && lead < 0xF8) {
      width = 4;
    } else if (lead >= 0xE0) {
      width = lead < 0xF0 ? 3 : 1;
    } else if (lead >= 0xC0) {
      width = 2;
    }
    // Truncated sequences count their remaining bytes as one scalar.
    i += std::min(width, text.size() - i);
    ++count;
  }
  return count;
}

const LengthFn& default_length_fn() {
  static const LengthFn fn = [](std::string_view text) { return utf8_length(text); };
  return fn;
}

bool DialogueContext::has_human_csr_turn() const {
  return std::any_of(history.begin(), history.end(),
                     [](const Turn& t) { return t.role == Role::HumanCsr; });
}

std::optional<std::size_t> DialogueContext::effective_reference_length(
    const LengthFn& length) const {
  if (reference_length) return reference_length;
  if (reference_response) return length(*reference_response);
  return std::nullopt;
}

void validate(DialogueContext& dialogue, const LengthFn& length) {
  if (dialogue.dialogue_id.empty()) throw InvalidInput("dialogue_id is empty");
  if (is_blank(dialogue.query)) {
    throw InvalidInput("dialogue " + dialogue.dialogue_id + ": query is empty");
  }
  for (std::size_t i = 0; i < dialogue.history.size(); ++i) {
    const auto& turn = dialogue.history[i];
    if (is_blank(turn.text)) {
      throw InvalidInput("dialogue " + dialogue.dialogue_id + ": turn " +
                         std::to_string(i) + " has empty text");
    }
    if (i > 0 && turn.index <= dialogue.history[i - 1].index) {
      throw InvalidInput("dialogue " + dialogue.dialogue_id +
                         ": turn indices must be strictly increasing");
    }
  }
  for (std::size_t i = 0; i < dialogue.snippets.size(); ++i) {
    for (std::size_t j = i + 1; j < dialogue.snippets.size(); ++j) {
      if (dialogue.snippets[i].id == dialogue.snippets[j].id) {
        throw InvalidInput("dialogue " + dialogue.dialogue_id + ": duplicate snippet id '" +
                           dialogue.snippets[i].id + "'");
      }
    }
  }
  if (dialogue.reference_length && *dialogue.reference_length == 0) {
    throw InvalidInput("dialogue " + dialogue.dialogue_id + ": reference_length must be positive");
  }
  if (!dialogue.reference_length && dialogue.reference_response) {
    dialogue.reference_length = length(*dialogue.reference_response);
  }
}

void RewardWeights::validate() const {
  for (double w : {alpha_format, alpha_length, alpha_match, beta_human, beta_risk, beta_gsb,
                   gamma_halluc}) {
    if (!(w >= 0.0)) throw InvalidInput("reward weights must be non-negative");
  }
  if (!(rho > 0.0)) throw InvalidInput("rho must be positive");
}

}  // namespace csrpipe
