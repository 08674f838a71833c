#include "crc/reflection.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <vector>

#include "crc/errors.hpp"

namespace crc {
namespace {

constexpr std::array<std::pair<InconsistencyType, std::string_view>, 4> kCodes = {{
    {InconsistencyType::UserProfile, "UP"},
    {InconsistencyType::DialogueHistory, "DH"},
    {InconsistencyType::DomainKnowledge, "DK"},
    {InconsistencyType::Subgoal, "SG"},
}};

constexpr std::string_view kNoneCode = "NONE";
constexpr std::string_view kVerdictTag = "VERDICT:";

std::string_view trim(std::string_view s, std::string_view chars = " \t\r\n") {
  const auto b = s.find_first_not_of(chars);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(chars);
  return s.substr(b, e - b + 1);
}

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::toupper(c));
  });
  return out;
}

}  // namespace

std::string_view code_of(InconsistencyType t) {
  for (const auto& [type, code] : kCodes) {
    if (type == t) return code;
  }
  return {};
}

std::optional<InconsistencyType> type_from_code(std::string_view code) {
  for (const auto& [type, c] : kCodes) {
    if (c == code) return type;
  }
  return std::nullopt;
}

std::string types_code(const InconsistencySet& types) {
  if (types.empty()) return std::string(kNoneCode);
  std::string out;
  for (auto t : types) {
    if (!out.empty()) out += ',';
    out += code_of(t);
  }
  return out;
}

InconsistencySet parse_types_code(std::string_view field, bool case_insensitive) {
  InconsistencySet types;
  bool saw_none = false;
  std::size_t pos = 0;
  while (true) {
    const auto comma = field.find(',', pos);
    auto raw = trim(field.substr(pos, comma == std::string_view::npos
                                          ? std::string_view::npos
                                          : comma - pos));
    const std::string code = case_insensitive ? upper(raw) : std::string(raw);
    if (code == kNoneCode) {
      saw_none = true;
    } else if (auto t = type_from_code(code)) {
      types.insert(*t);
    } else {
      throw ReflectionFormatError("unknown inconsistency type code \"" +
                                  std::string(raw) + "\"");
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (saw_none && !types.empty()) {
    throw ReflectionFormatError("NONE cannot be combined with other type codes");
  }
  return types;
}

std::string check_reflection(const ReflectionResult& r) {
  if (r.response.empty()) return "empty response";
  if (r.types.empty() && r.suggestion != kConsistentSuggestion) {
    return "consistent reflection must carry the \"none\" suggestion";
  }
  if (r.suggestion.empty()) return "empty suggestion";
  if (r.suggestion.find(kEnvelopeSeparator) != std::string::npos) {
    return "suggestion contains \"###\"";
  }
  if (r.suggestion.front() == '#') return "suggestion starts with '#'";
  return {};
}

std::string serialize_c(const ReflectionResult& r) {
  if (auto why = check_reflection(r); !why.empty()) {
    throw ReflectionFormatError("cannot serialize reflection: " + why);
  }
  std::string out = r.response;
  out += kEnvelopeSeparator;
  out += types_code(r.types);
  out += ':';
  out += kEnvelopeSeparator;
  out += r.suggestion;
  return out;
}

ReflectionResult parse_c(std::string_view text) {
  const auto last = text.rfind(kEnvelopeSeparator);
  if (last == std::string_view::npos || last == 0) {
    throw ReflectionFormatError("malformed reflection envelope: fewer than two \"###\"");
  }
  const auto first = text.rfind(kEnvelopeSeparator, last - 1);
  if (first == std::string_view::npos) {
    throw ReflectionFormatError("malformed reflection envelope: fewer than two \"###\"");
  }
  if (first + kEnvelopeSeparator.size() > last) {
    throw ReflectionFormatError("malformed reflection envelope: overlapping separators");
  }
  const auto field = text.substr(first + kEnvelopeSeparator.size(),
                                 last - first - kEnvelopeSeparator.size());
  if (field.empty() || field.back() != ':') {
    throw ReflectionFormatError("malformed reflection envelope: missing ':' after type field");
  }

  ReflectionResult r;
  r.response = std::string(text.substr(0, first));
  r.types = parse_types_code(field.substr(0, field.size() - 1));
  r.suggestion = std::string(text.substr(last + kEnvelopeSeparator.size()));
  if (r.response.empty()) {
    throw ReflectionFormatError("malformed reflection envelope: empty response");
  }
  if (r.types.empty()) {
    r.suggestion = std::string(kConsistentSuggestion);
  } else if (r.suggestion.empty()) {
    throw ReflectionFormatError("malformed reflection envelope: empty suggestion");
  }
  return r;
}

AnnotatorVerdict parse_annotator_reply(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    lines.push_back(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos
                                                                   : nl - pos));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }

  for (std::size_t i = lines.size(); i-- > 0;) {
    // Chat models like to decorate the envelope with markdown emphasis.
    const auto line = trim(lines[i], " \t\r*`>");
    if (line.size() < kVerdictTag.size() ||
        upper(line.substr(0, kVerdictTag.size())) != kVerdictTag) {
      continue;
    }
    const auto body = trim(trim(line.substr(kVerdictTag.size())), " \t*`");
    const auto bar = body.find('|');
    if (bar == std::string_view::npos) {
      throw ReflectionFormatError("malformed verdict line: missing '|'");
    }
    AnnotatorVerdict v;
    v.types = parse_types_code(body.substr(0, bar), /*case_insensitive=*/true);
    v.suggestion = std::string(trim(body.substr(bar + 1)));
    if (v.types.empty()) {
      v.suggestion = std::string(kConsistentSuggestion);
    } else if (v.suggestion.empty()) {
      throw ReflectionFormatError("verdict reports inconsistencies without a suggestion");
    }
    std::string analysis;
    for (std::size_t k = 0; k < i; ++k) {
      analysis += lines[k];
      if (k + 1 < i) analysis += '\n';
    }
    v.analysis = std::string(trim(analysis));
    return v;
  }
  throw ReflectionFormatError("annotator reply has no VERDICT line");
}

}  // namespace crc
