#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crc/corpus.hpp"
#include "crc/reflection.hpp"

namespace crc {

// Versions of the block renderings and stage layouts. Bump whenever any
// rendered byte changes, since exported training files depend on them.
inline constexpr std::string_view kBlockFormatVersion = "crc-blocks/1";
inline constexpr std::string_view kTemplateVersion = "crc-templates/1";

inline constexpr std::string_view kReflectionMarker = "###stage2_R";
inline constexpr std::string_view kCorrectionMarker = "###stage3_C";

enum class Stage { Experience, Reflection, Correction };
enum class TemplateStyle { Bare, Instructed };

std::string_view to_string(Stage s);
std::string_view to_string(TemplateStyle s);
Stage stage_from_string(std::string_view s);
TemplateStyle style_from_string(std::string_view s);

struct DelimiterScheme {
  std::string name;
  std::string delimiter;

  // Whitespace delimiters cannot be distinguished from block text, so the
  // collision check and re-parsing do not apply to them.
  bool separable() const;
};

struct StageTemplate {
  Stage stage = Stage::Experience;
  TemplateStyle style = TemplateStyle::Bare;
  std::string instruction;   // empty for Bare
  std::string stage_marker;  // Bare Reflection/Correction only
};

// Delimiter schemes and per-stage instructions. The built-ins cover the
// separators used by the common seq2seq and decoder-only model families.
class TemplateRegistry {
 public:
  TemplateRegistry();

  // Reads a YAML override file with optional `delimiters:` (name -> token)
  // and `instructions:` (experience/reflection/correction -> text) maps.
  static TemplateRegistry from_file(const std::string& path);

  const DelimiterScheme& lookup(std::string_view name) const;
  void add_scheme(DelimiterScheme scheme);
  void set_instruction(Stage stage, std::string text);
  const std::string& instruction(Stage stage) const;

  StageTemplate make_template(Stage stage, TemplateStyle style) const;

  std::vector<std::string> scheme_names() const;

 private:
  std::map<std::string, DelimiterScheme, std::less<>> schemes_;
  std::array<std::string, 3> instructions_;
};

// Built-in registry lookup.
DelimiterScheme registry_lookup(std::string_view name);

struct ContextBlocks {
  std::string dk;
  std::string sg;
  std::string up;
  std::string dh;
};

ContextBlocks render_blocks(const TurnContext& ctx);
std::string render_history(const std::vector<DialogueTurn>& turns);

struct AssembledInput {
  std::string text;
  // Oldest history turns removed to fit the character budget.
  std::size_t dropped_turns = 0;
  bool over_budget = false;
};

// Joins DK, SG, UP, DH with the delimiter and applies the stage layout.
// `char_budget` counts code points; 0 disables truncation. Only history is
// ever truncated, oldest turn first.
AssembledInput assemble_stage_input_ex(const TurnContext& ctx,
                                       const StageTemplate& tmpl,
                                       const DelimiterScheme& delims,
                                       const std::optional<ReflectionResult>& reflection,
                                       std::size_t char_budget = 0);

std::string assemble_stage_input(const TurnContext& ctx, const StageTemplate& tmpl,
                                 const DelimiterScheme& delims,
                                 const std::optional<ReflectionResult>& reflection = {});

struct ParsedStageInput {
  ContextBlocks blocks;
  std::optional<std::string> reflection;  // serialized c, Correction only
};

// Inverse of assemble_stage_input for separable delimiters.
ParsedStageInput parse_stage_input(std::string_view text, const StageTemplate& tmpl,
                                   const DelimiterScheme& delims);

inline constexpr std::string_view kPredefinedStart = "[Start of Predefined Elements]";
inline constexpr std::string_view kPredefinedEnd = "[End of Predefined Elements]";
inline constexpr std::string_view kResponseStart = "[Start of the Assistant's Response]";
inline constexpr std::string_view kResponseEnd = "[End of the Assistant's Response]";

struct AnnotationPrompt {
  std::string rendered;
};

// Consistency-audit prompt for the annotator, ending with the VERDICT
// envelope instructions understood by parse_annotator_reply.
AnnotationPrompt build_annotation_prompt(const TurnContext& ctx, std::string_view response);

// Appended when an annotator reply lacked a verdict and is asked again.
std::string_view annotation_reminder();

}  // namespace crc
