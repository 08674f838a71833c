#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace crc {

inline constexpr std::string_view kReflectionCodecVersion = "crc-reflection/1";
inline constexpr std::string_view kEnvelopeSeparator = "###";
inline constexpr std::string_view kConsistentSuggestion = "none";

// Declaration order is the canonical serialization order.
enum class InconsistencyType { UserProfile, DialogueHistory, DomainKnowledge, Subgoal };

using InconsistencySet = std::set<InconsistencyType>;

std::string_view code_of(InconsistencyType t);
std::optional<InconsistencyType> type_from_code(std::string_view code);

// "UP,DK" style, or "NONE" for the empty set.
std::string types_code(const InconsistencySet& types);

// Inverse of types_code. Tolerates surrounding spaces and any order; throws
// ReflectionFormatError on unknown codes or NONE mixed with other codes.
InconsistencySet parse_types_code(std::string_view field, bool case_insensitive = false);

// The reflection triple c = (response, types, suggestion).
struct ReflectionResult {
  std::string response;
  InconsistencySet types;
  std::string suggestion = std::string(kConsistentSuggestion);

  bool consistent() const { return types.empty(); }
  bool operator==(const ReflectionResult&) const = default;
};

// Empty string when `r` is a valid, serializable result; otherwise the reason.
std::string check_reflection(const ReflectionResult& r);

// response###TYPES:###suggestion. Throws ReflectionFormatError when the
// result violates its invariants or the suggestion would make the envelope
// ambiguous.
std::string serialize_c(const ReflectionResult& r);

// Splits on the last two separators, so responses may contain "###".
ReflectionResult parse_c(std::string_view text);

struct AnnotatorVerdict {
  InconsistencySet types;
  std::string suggestion;
  // Free-form text above the verdict line.
  std::string analysis;
};

// Finds the last `VERDICT: <types>|<suggestion>` line of an annotator reply.
AnnotatorVerdict parse_annotator_reply(std::string_view text);

}  // namespace crc
