#pragma once

// Byte-level vocabulary and the instruction-prompting function.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grace/errors.hpp"

namespace grace {

using TokenId = int;

/// 256 byte ids followed by the special ids.
struct Vocab {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr int kSize = 259;

  static constexpr bool is_byte(TokenId id) { return id >= 0 && id < 256; }
  static constexpr bool is_special(TokenId id) { return id >= 256 && id < kSize; }
};

inline std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

/// Inverse of encode(). Special ids are skipped.
inline std::string decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (Vocab::is_byte(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

enum class SourceRole { kQuery, kPositive, kNegative, kUnsupervised };

inline const char* role_name(SourceRole r) {
  switch (r) {
    case SourceRole::kQuery: return "query";
    case SourceRole::kPositive: return "positive";
    case SourceRole::kNegative: return "negative";
    case SourceRole::kUnsupervised: return "unsupervised";
  }
  return "?";
}

inline constexpr const char* kDefaultInstruction =
    "Analyze and explain the meaning of the following text:";

/// Instruction text per role. Roles without an entry use `fallback`.
struct InstructionTemplate {
  std::string fallback = kDefaultInstruction;
  std::map<SourceRole, std::string> per_role;

  std::string render(SourceRole role) const {
    auto it = per_role.find(role);
    const std::string& s = it != per_role.end() ? it->second : fallback;
    if (s.empty()) throw ConfigError("instruction template is empty");
    // Separate the instruction from the text it introduces.
    return s + "\n";
  }
};

struct PromptedInput {
  std::vector<TokenId> token_ids;
  std::size_t sys_len = 0;  // BOS plus instruction tokens
  SourceRole role = SourceRole::kQuery;
  std::string raw_text;     // text actually present after sys_len
  bool truncated = false;

  std::span<const TokenId> text_ids() const {
    return std::span<const TokenId>(token_ids).subspan(sys_len);
  }
};

/// BOS + instruction + text, right-truncating the text so the whole prompt
/// fits in max_prompt_len tokens.
inline PromptedInput wrap(std::string_view text, SourceRole role,
                          const InstructionTemplate& tmpl,
                          std::size_t max_prompt_len) {
  PromptedInput p;
  p.role = role;
  p.token_ids.push_back(Vocab::kBos);
  const std::vector<TokenId> instr = encode(tmpl.render(role));
  p.token_ids.insert(p.token_ids.end(), instr.begin(), instr.end());
  p.sys_len = p.token_ids.size();
  if (p.sys_len > max_prompt_len) {
    throw ConfigError("instruction (" + std::to_string(p.sys_len) +
                      " tokens) exceeds max_prompt_len " +
                      std::to_string(max_prompt_len));
  }
  const std::size_t room = max_prompt_len - p.sys_len;
  std::string_view kept = text;
  if (kept.size() > room) {
    kept = kept.substr(0, room);
    p.truncated = true;
  }
  p.raw_text = std::string(kept);
  const std::vector<TokenId> body = encode(kept);
  p.token_ids.insert(p.token_ids.end(), body.begin(), body.end());
  return p;
}

}  // namespace grace
