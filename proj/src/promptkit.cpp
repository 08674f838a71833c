#include "crc/promptkit.hpp"

#include <algorithm>
#include <cctype>

#include <yaml-cpp/yaml.h>

#include "crc/errors.hpp"
#include "crc/utf8.hpp"

namespace crc {
namespace {

constexpr std::string_view kExperienceInstruction =
    "Respond to user utterances based on domain knowledge, user profile, "
    "dialogue history, and the current dialogue goal.";
constexpr std::string_view kReflectionInstruction =
    "Respond to user utterances based on domain knowledge, user profile, "
    "dialogue history, and the current dialogue goal, and annotate the response "
    "with the types of inconsistencies compared to predefined information, along "
    "with suggestions for generating better responses.";
constexpr std::string_view kCorrectionInstruction =
    "Correct the pre-response and respond to user utterances based on domain "
    "knowledge, user profile, dialogue history, current dialogue goal, "
    "pre-response, types of inconsistencies between the pre-response and "
    "predefined information, and suggestions for generating a better response.";

constexpr std::string_view kAnnotationPreamble =
    "Currently, the prediction task is performed: respond to user utterances "
    "based on information such as user profile, domain knowledge, dialogue "
    "history, and domain and current dialogue subgoal. However, there may be "
    "situations where the response is inconsistent with the four predefined "
    "elements above. For a dialogue, you need to analyze the AI Assistant's "
    "response from the perspective of whether the response is consistent with "
    "the four predefined elements above, and identifies inconsistency types and "
    "correction suggestions. The consistency requirements of the response with "
    "the four predefined elements are:\n"
    "(1) Is user profile information applied?\n"
    "(2) Is the consistency with the dialogue history maintained?\n"
    "(3) Is domain knowledge information applied?\n"
    "(4) Is the current dialogue subgoal achieved?\n";

constexpr std::string_view kVerdictFooter =
    "After your analysis, end your answer with exactly one final line of the form\n"
    "VERDICT: <types>|<suggestion>\n"
    "where <types> is a comma-separated list of the violated elements using the "
    "codes UP (user profile), DH (dialogue history), DK (domain knowledge) and "
    "SG (subgoal), or NONE if the response is consistent with all four elements. "
    "<suggestion> is the correction suggestion on a single line without \"###\"; "
    "leave it empty for NONE.\n"
    "Example: VERDICT: DK|The director of the movie is the person named in the "
    "domain knowledge.";

constexpr std::string_view kReminder =
    "\n\nYour previous answer did not end with a valid VERDICT line. Answer again "
    "and make the last line exactly `VERDICT: <types>|<suggestion>`.";

std::size_t stage_slot(Stage s) { return static_cast<std::size_t>(s); }

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

template <typename Range, typename Fn>
std::string join(const Range& items, std::string_view sep, Fn render) {
  std::string out;
  bool first = true;
  for (const auto& item : items) {
    if (!first) out += sep;
    first = false;
    out += render(item);
  }
  return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::vector<std::string_view> split_all(std::string_view text, std::string_view delim) {
  std::vector<std::string_view> parts;
  std::size_t pos = 0;
  while (true) {
    const auto at = text.find(delim, pos);
    if (at == std::string_view::npos) {
      parts.push_back(text.substr(pos));
      return parts;
    }
    parts.push_back(text.substr(pos, at - pos));
    pos = at + delim.size();
  }
}

void check_collision(std::string_view block, std::string_view name,
                     const DelimiterScheme& delims) {
  if (!delims.separable()) return;
  if (block.find(delims.delimiter) != std::string_view::npos) {
    throw DelimiterCollisionError("delimiter \"" + delims.delimiter +
                                  "\" occurs inside the " + std::string(name) +
                                  " block");
  }
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Experience:
      return "experience";
    case Stage::Reflection:
      return "reflection";
    case Stage::Correction:
      return "correction";
  }
  return "experience";
}

std::string_view to_string(TemplateStyle s) {
  return s == TemplateStyle::Bare ? "bare" : "instructed";
}

Stage stage_from_string(std::string_view s) {
  const auto v = lower(s);
  if (v == "experience") return Stage::Experience;
  if (v == "reflection") return Stage::Reflection;
  if (v == "correction") return Stage::Correction;
  throw PromptError("unknown stage \"" + std::string(s) + "\"");
}

TemplateStyle style_from_string(std::string_view s) {
  const auto v = lower(s);
  if (v == "bare") return TemplateStyle::Bare;
  if (v == "instructed") return TemplateStyle::Instructed;
  throw PromptError("unknown template style \"" + std::string(s) + "\"");
}

bool DelimiterScheme::separable() const {
  return std::any_of(delimiter.begin(), delimiter.end(),
                     [](unsigned char c) { return !std::isspace(c); });
}

TemplateRegistry::TemplateRegistry() {
  add_scheme({"sep", "[SEP]"});
  add_scheme({"eos", "</s>"});
  add_scheme({"endoftext", "<|endoftext|>"});
  add_scheme({"space", " "});
  instructions_[stage_slot(Stage::Experience)] = kExperienceInstruction;
  instructions_[stage_slot(Stage::Reflection)] = kReflectionInstruction;
  instructions_[stage_slot(Stage::Correction)] = kCorrectionInstruction;
}

TemplateRegistry TemplateRegistry::from_file(const std::string& path) {
  TemplateRegistry reg;
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw PromptError("cannot read template registry " + path + ": " + e.what());
  }
  try {
    if (auto delims = root["delimiters"]) {
      for (const auto& kv : delims) {
        reg.add_scheme({kv.first.as<std::string>(), kv.second.as<std::string>()});
      }
    }
    if (auto instr = root["instructions"]) {
      for (const auto& kv : instr) {
        reg.set_instruction(stage_from_string(kv.first.as<std::string>()),
                            kv.second.as<std::string>());
      }
    }
  } catch (const YAML::Exception& e) {
    throw PromptError("malformed template registry " + path + ": " + e.what());
  }
  return reg;
}

const DelimiterScheme& TemplateRegistry::lookup(std::string_view name) const {
  auto it = schemes_.find(name);
  if (it == schemes_.end()) {
    throw UnknownSchemeError("unknown delimiter scheme \"" + std::string(name) + "\"");
  }
  return it->second;
}

void TemplateRegistry::add_scheme(DelimiterScheme scheme) {
  if (scheme.name.empty()) throw PromptError("delimiter scheme needs a name");
  if (scheme.delimiter.empty()) {
    throw PromptError("delimiter scheme \"" + scheme.name + "\" has an empty delimiter");
  }
  auto name = scheme.name;
  schemes_.insert_or_assign(std::move(name), std::move(scheme));
}

void TemplateRegistry::set_instruction(Stage stage, std::string text) {
  if (text.empty()) throw PromptError("empty instruction for stage " + std::string(to_string(stage)));
  instructions_[stage_slot(stage)] = std::move(text);
}

const std::string& TemplateRegistry::instruction(Stage stage) const {
  return instructions_[stage_slot(stage)];
}

StageTemplate TemplateRegistry::make_template(Stage stage, TemplateStyle style) const {
  StageTemplate t;
  t.stage = stage;
  t.style = style;
  if (style == TemplateStyle::Instructed) {
    t.instruction = instruction(stage);
  } else if (stage == Stage::Reflection) {
    t.stage_marker = kReflectionMarker;
  } else if (stage == Stage::Correction) {
    t.stage_marker = kCorrectionMarker;
  }
  return t;
}

std::vector<std::string> TemplateRegistry::scheme_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : schemes_) names.push_back(name);
  return names;
}

DelimiterScheme registry_lookup(std::string_view name) {
  static const TemplateRegistry builtin;
  return builtin.lookup(name);
}

std::string render_history(const std::vector<DialogueTurn>& turns) {
  return join(turns, "\n", [](const DialogueTurn& t) {
    return (t.speaker == Speaker::User ? "[USER] " : "[System] ") + t.text;
  });
}

ContextBlocks render_blocks(const TurnContext& ctx) {
  ContextBlocks b;
  b.dk = join(ctx.knowledge, "; ", [](const KnowledgeTriple& t) {
    return "<" + t.head + ", " + t.relation + ", " + t.tail + ">";
  });
  b.sg = "Action: " + ctx.subgoal.action + "; Topic: " + ctx.subgoal.topic;
  b.up = join(ctx.profile, "; ",
              [](const ProfileEntry& p) { return p.key + ": " + p.value; });
  b.dh = render_history(ctx.history);
  return b;
}

namespace {

std::string layout(const ContextBlocks& b, const StageTemplate& tmpl,
                   const DelimiterScheme& d, const std::string* c) {
  const auto& sep = d.delimiter;
  std::string out;
  if (tmpl.style == TemplateStyle::Instructed) {
    out += tmpl.instruction;
    out += ' ';
  }
  out += b.dk + sep + b.sg + sep + b.up + sep + b.dh;
  if (tmpl.style == TemplateStyle::Bare) {
    if (tmpl.stage == Stage::Reflection) {
      out += sep + tmpl.stage_marker;
    } else if (tmpl.stage == Stage::Correction) {
      out += sep + *c + tmpl.stage_marker;
    }
  } else if (tmpl.stage == Stage::Correction) {
    out += sep + *c;
  }
  return out;
}

}  // namespace

AssembledInput assemble_stage_input_ex(const TurnContext& ctx, const StageTemplate& tmpl,
                                       const DelimiterScheme& delims,
                                       const std::optional<ReflectionResult>& reflection,
                                       std::size_t char_budget) {
  if (delims.delimiter.empty()) throw PromptError("empty delimiter");
  const bool correction = tmpl.stage == Stage::Correction;
  if (correction && !reflection) {
    throw PromptError("correction input requires a reflection result");
  }
  if (!correction && reflection) {
    throw PromptError("reflection result supplied for the " +
                      std::string(to_string(tmpl.stage)) + " stage");
  }
  if (tmpl.style == TemplateStyle::Instructed && tmpl.instruction.empty()) {
    throw PromptError("instructed template without instruction text");
  }
  if (tmpl.style == TemplateStyle::Bare && tmpl.stage != Stage::Experience &&
      tmpl.stage_marker.empty()) {
    throw PromptError("bare template without stage marker");
  }

  std::string c;
  if (reflection) c = serialize_c(*reflection);

  ContextBlocks blocks = render_blocks(ctx);
  AssembledInput result;
  result.text = layout(blocks, tmpl, delims, reflection ? &c : nullptr);
  if (char_budget > 0) {
    std::size_t keep_from = 0;
    while (utf8::length(result.text) > char_budget && keep_from < ctx.history.size()) {
      ++keep_from;
      blocks.dh = render_history(std::vector<DialogueTurn>(
          ctx.history.begin() + static_cast<std::ptrdiff_t>(keep_from), ctx.history.end()));
      result.text = layout(blocks, tmpl, delims, reflection ? &c : nullptr);
    }
    result.dropped_turns = keep_from;
    result.over_budget = utf8::length(result.text) > char_budget;
  }

  check_collision(blocks.dk, "DK", delims);
  check_collision(blocks.sg, "SG", delims);
  check_collision(blocks.up, "UP", delims);
  check_collision(blocks.dh, "DH", delims);
  if (reflection) check_collision(c, "reflection", delims);
  return result;
}

std::string assemble_stage_input(const TurnContext& ctx, const StageTemplate& tmpl,
                                 const DelimiterScheme& delims,
                                 const std::optional<ReflectionResult>& reflection) {
  return assemble_stage_input_ex(ctx, tmpl, delims, reflection).text;
}

ParsedStageInput parse_stage_input(std::string_view text, const StageTemplate& tmpl,
                                   const DelimiterScheme& delims) {
  if (!delims.separable()) {
    throw PromptError("inputs joined by a whitespace delimiter cannot be re-parsed");
  }
  if (tmpl.style == TemplateStyle::Instructed) {
    const std::string prefix = tmpl.instruction + " ";
    if (text.substr(0, prefix.size()) != prefix) {
      throw PromptError("stage input does not start with the instruction text");
    }
    text.remove_prefix(prefix.size());
  } else if (!tmpl.stage_marker.empty()) {
    if (!ends_with(text, tmpl.stage_marker)) {
      throw PromptError("stage input does not end with " + tmpl.stage_marker);
    }
    text.remove_suffix(tmpl.stage_marker.size());
    if (tmpl.stage == Stage::Reflection) {
      if (!ends_with(text, delims.delimiter)) {
        throw PromptError("missing delimiter before the stage marker");
      }
      text.remove_suffix(delims.delimiter.size());
    }
  }

  const auto parts = split_all(text, delims.delimiter);
  const std::size_t expected = tmpl.stage == Stage::Correction ? 5 : 4;
  if (parts.size() != expected) {
    throw PromptError("expected " + std::to_string(expected) + " delimited fields, found " +
                      std::to_string(parts.size()));
  }
  ParsedStageInput parsed;
  parsed.blocks = {std::string(parts[0]), std::string(parts[1]), std::string(parts[2]),
                   std::string(parts[3])};
  if (expected == 5) parsed.reflection = std::string(parts[4]);
  return parsed;
}

AnnotationPrompt build_annotation_prompt(const TurnContext& ctx, std::string_view response) {
  if (response.empty()) throw PromptError("annotation needs a non-empty response");
  const auto blocks = render_blocks(ctx);
  for (std::string_view content : {std::string_view(blocks.dk), std::string_view(blocks.sg),
                                   std::string_view(blocks.up), std::string_view(blocks.dh),
                                   response}) {
    for (auto marker : {kPredefinedStart, kPredefinedEnd, kResponseStart, kResponseEnd}) {
      if (content.find(marker) != std::string_view::npos) {
        throw PromptError("annotation content contains the section marker " +
                          std::string(marker));
      }
    }
  }

  std::string out(kAnnotationPreamble);
  out += "\n";
  out += kPredefinedStart;
  out += "\nUser Profile: " + blocks.up;
  out += "\nDialogue History:\n" + blocks.dh;
  out += "\nDomain Knowledge: " + blocks.dk;
  out += "\nSubgoal: " + blocks.sg;
  out += "\n";
  out += kPredefinedEnd;
  out += "\n\n";
  out += kResponseStart;
  out += "\n";
  out += response;
  out += "\n";
  out += kResponseEnd;
  out += "\n\n";
  out += kVerdictFooter;
  return {std::move(out)};
}

std::string_view annotation_reminder() { return kReminder; }

}  // namespace crc
