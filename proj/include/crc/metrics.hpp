#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crc/corpus.hpp"

namespace crc {

inline constexpr std::string_view kMetricsVersion = "crc-metrics/1";
inline constexpr double kBleuEpsilon = 1e-9;

enum class TokenMode { Auto, Word, Char };

std::string_view to_string(TokenMode m);
TokenMode token_mode_from_string(std::string_view s);

struct TokenizationPolicy {
  TokenMode mode = TokenMode::Auto;
  bool lowercase = true;
  bool strip_punct = true;

  std::string fingerprint() const;
};

// Auto: strings whose letters are mostly CJK are split into characters;
// otherwise CJK runs become single-character tokens and everything else is
// split into words. Punctuation separates tokens when strip_punct is set.
std::vector<std::string> tokenize(std::string_view text, const TokenizationPolicy& policy);

// Tokens joined by single spaces.
std::string normalize(std::string_view text, const TokenizationPolicy& policy);

bool is_cjk(char32_t cp);
bool is_punctuation(char32_t cp);

// Multiset token F1 in [0, 1]. Throws MetricError on an empty reference.
double word_f1(std::string_view hyp, std::string_view ref, const TokenizationPolicy& policy);

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped, per order 1..max_n
  std::vector<std::size_t> totals;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

BleuStats bleu_stats(const std::vector<std::vector<std::string>>& hyps,
                     const std::vector<std::vector<std::string>>& refs, int max_n);
double bleu_from_stats(const BleuStats& stats);

// Corpus BLEU with uniform weights and the standard brevity penalty; a zero
// precision is replaced by epsilon / total.
double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
            const TokenizationPolicy& policy, int max_n = 2);

double distinct_n(const std::vector<std::string>& hyps, const TokenizationPolicy& policy,
                  int n = 2);

// Entity-token F1 against the knowledge triples. nullopt when the reference
// mentions no triple head/tail (the context is skipped, not scored 0).
std::optional<double> knowledge_f1(std::string_view hyp, std::string_view ref,
                                   const std::vector<KnowledgeTriple>& triples,
                                   const TokenizationPolicy& policy);

// nullopt for vacuous subgoals (empty topic).
std::optional<bool> subgoal_achieved(std::string_view prediction, const Subgoal& goal,
                                     const TokenizationPolicy& policy);

struct GoalSuccess {
  double rate = 0.0;  // fraction of dialogues
  std::size_t succeeded = 0;
  std::size_t dialogues = 0;
};

GoalSuccess goal_success(const std::vector<std::string>& predictions,
                         const std::vector<TurnContext>& contexts,
                         const TokenizationPolicy& policy);

double subgoal_failure_rate(const std::vector<std::string>& predictions,
                            const std::vector<TurnContext>& contexts,
                            const TokenizationPolicy& policy);

struct ExampleScore {
  ContextRef ref;
  double word_f1 = 0.0;
  std::optional<double> knowledge_f1;
  std::optional<bool> subgoal_achieved;
};

struct EvalReport {
  // Percentages for the F1, success and failure values; fractions for BLEU
  // and Distinct, matching how result tables usually print them.
  double word_f1 = 0.0;
  double bleu2 = 0.0;
  double dist2 = 0.0;
  double knowledge_f1 = 0.0;
  double goal_success = 0.0;
  double subgoal_failure = 0.0;
  std::size_t scored_contexts = 0;
  std::size_t knowledge_scored = 0;
  std::size_t goal_dialogues = 0;
  std::vector<ExampleScore> per_example;
  std::string policy_fingerprint;
};

struct Prediction {
  ContextRef ref;
  std::string text;
};

EvalReport evaluate(const std::vector<Prediction>& predictions,
                    const std::vector<TurnContext>& contexts, const TokenizationPolicy& policy);

nlohmann::json to_json(const EvalReport& report);

// Method column plus W F1, BLEU-2, Dist-2, K F1 and Succ.
std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

}  // namespace crc
