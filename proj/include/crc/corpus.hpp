#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace crc {

inline constexpr std::string_view kCorpusFormat = "crc-corpus/1";

struct ProfileEntry {
  std::string key;
  std::string value;

  bool operator==(const ProfileEntry&) const = default;
};

struct KnowledgeTriple {
  std::string head;
  std::string relation;
  std::string tail;

  bool operator==(const KnowledgeTriple&) const = default;
};

enum class Speaker { User, System };

std::string_view to_string(Speaker s);

struct DialogueTurn {
  Speaker speaker = Speaker::User;
  std::string text;

  bool operator==(const DialogueTurn&) const = default;
};

struct Subgoal {
  std::string action;
  std::string topic;

  bool operator==(const Subgoal&) const = default;
};

// How the goal path lines up with the turn sequence. Detected from lengths
// when an example is loaded or validated.
enum class GoalAlignment { PerTurn, PerSystemTurn, Unaligned };

std::string_view to_string(GoalAlignment a);

struct DialogueExample {
  std::string id;
  std::vector<ProfileEntry> profile;
  std::vector<KnowledgeTriple> knowledge;
  std::vector<DialogueTurn> turns;
  std::vector<Subgoal> goals;
  GoalAlignment alignment = GoalAlignment::Unaligned;

  std::size_t system_turn_count() const;
};

GoalAlignment detect_alignment(const DialogueExample& example);

// True for actions that carry no topic (greetings, farewells, thanks).
bool is_social_action(std::string_view action);

struct Finding {
  std::string code;
  std::string message;
};

struct ValidationReport {
  std::vector<Finding> findings;

  bool ok() const { return findings.empty(); }
};

ValidationReport validate_example(const DialogueExample& example);

struct LoadOptions {
  // When set, any validation finding aborts the load with a CorpusError.
  // Schema violations and duplicate ids are always fatal.
  bool strict = true;
};

std::vector<DialogueExample> load_corpus(const std::string& path,
                                         const LoadOptions& options = {});

// Parses one record; `record_no` is used in error messages only.
DialogueExample parse_example(const nlohmann::json& record,
                              std::size_t record_no);

nlohmann::json to_json(const DialogueExample& example);

void save_corpus(const std::string& path,
                 const std::vector<DialogueExample>& corpus);

struct TrainSplit {
  std::vector<DialogueExample> experience;
  std::vector<DialogueExample> reflection;
};

// Deterministic dialogue-level partition; experience receives
// round-half-up(ratio * N) dialogues. Both halves keep corpus order.
TrainSplit split_train(const std::vector<DialogueExample>& corpus,
                       double ratio, std::uint64_t seed);

std::size_t experience_count(std::size_t n, double ratio);

struct ContextRef {
  std::string example_id;
  std::size_t turn_index = 0;

  auto operator<=>(const ContextRef&) const = default;
};

std::string to_string(const ContextRef& ref);
nlohmann::json to_json(const ContextRef& ref);
ContextRef context_ref_from_json(const nlohmann::json& j);

struct TurnContext {
  std::string example_id;
  std::size_t turn_index = 0;
  std::vector<ProfileEntry> profile;
  std::vector<KnowledgeTriple> knowledge;
  std::vector<DialogueTurn> history;
  Subgoal subgoal;
  std::string gold_response;
  // Set when this turn's subgoal is the dialogue's final target.
  bool final_target = false;

  ContextRef ref() const { return {example_id, turn_index}; }
};

std::vector<TurnContext> iterate_contexts(const DialogueExample& example);

std::vector<TurnContext> iterate_contexts(
    const std::vector<DialogueExample>& corpus);

}  // namespace crc
