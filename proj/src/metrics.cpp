#include "crc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <unordered_map>

#include "crc/errors.hpp"
#include "crc/hash.hpp"
#include "crc/utf8.hpp"

namespace crc {

using nlohmann::json;

std::string_view to_string(TokenMode m) {
  switch (m) {
    case TokenMode::Auto:
      return "auto";
    case TokenMode::Word:
      return "word";
    case TokenMode::Char:
      return "char";
  }
  return "auto";
}

TokenMode token_mode_from_string(std::string_view s) {
  if (s == "auto") return TokenMode::Auto;
  if (s == "word") return TokenMode::Word;
  if (s == "char") return TokenMode::Char;
  throw MetricError("unknown tokenization mode \"" + std::string(s) + "\"");
}

std::string TokenizationPolicy::fingerprint() const {
  const json j = {{"version", kMetricsVersion},
                  {"mode", to_string(mode)},
                  {"lowercase", lowercase},
                  {"strip_punct", strip_punct}};
  return sha256_hex(j.dump()).substr(0, 16);
}

bool is_cjk(char32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
         (cp >= 0x20000 && cp <= 0x2EBEF) || (cp >= 0xF900 && cp <= 0xFAFF) ||
         (cp >= 0x3040 && cp <= 0x30FF) || (cp >= 0x31F0 && cp <= 0x31FF) ||
         (cp >= 0xAC00 && cp <= 0xD7AF);
}

bool is_punctuation(char32_t cp) {
  return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
         (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E) ||
         (cp >= 0xA1 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 ||
         (cp >= 0x2010 && cp <= 0x205E) || (cp >= 0x3001 && cp <= 0x303F) ||
         (cp >= 0xFF01 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20) ||
         (cp >= 0xFF3B && cp <= 0xFF40) || (cp >= 0xFF5B && cp <= 0xFF65);
}

namespace {

bool is_space(char32_t cp) {
  return (cp >= 0x09 && cp <= 0x0D) || cp == 0x20 || cp == 0x85 || cp == 0xA0 ||
         cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200B) || cp == 0x2028 || cp == 0x2029 ||
         cp == 0x202F || cp == 0x205F || cp == 0x3000 || cp == 0xFEFF;
}

// Simple case folding for Latin, Latin-1, Greek and Cyrillic capitals.
char32_t fold(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 32;
  if (cp >= 0x410 && cp <= 0x42F) return cp + 32;
  if (cp >= 0x400 && cp <= 0x40F) return cp + 80;
  return cp;
}

bool contains_sequence(const std::vector<std::string>& haystack,
                       const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

double set_f1(const std::set<std::string>& gold, const std::set<std::string>& pred) {
  if (gold.empty() || pred.empty()) return 0.0;
  std::size_t overlap = 0;
  for (const auto& t : pred) overlap += gold.count(t);
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const std::vector<std::string>& toks, int n) {
  std::map<Ngram, std::size_t> counts;
  const auto order = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + order <= toks.size(); ++i) {
    ++counts[Ngram(toks.begin() + static_cast<std::ptrdiff_t>(i),
                   toks.begin() + static_cast<std::ptrdiff_t>(i + order))];
  }
  return counts;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text, const TokenizationPolicy& policy) {
  auto cps = utf8::decode(text);
  if (policy.lowercase) {
    for (auto& cp : cps) cp = fold(cp);
  }
  const auto separator = [&](char32_t cp) {
    return is_space(cp) || (policy.strip_punct && is_punctuation(cp));
  };

  TokenMode mode = policy.mode;
  bool split_cjk = false;
  if (mode == TokenMode::Auto) {
    std::size_t cjk = 0;
    std::size_t letters = 0;
    for (auto cp : cps) {
      if (is_space(cp) || is_punctuation(cp)) continue;
      ++letters;
      if (is_cjk(cp)) ++cjk;
    }
    if (letters > 0 && cjk * 2 > letters) {
      mode = TokenMode::Char;
    } else {
      mode = TokenMode::Word;
      split_cjk = true;
    }
  }

  std::vector<std::string> tokens;
  std::string current;
  const auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (auto cp : cps) {
    if (separator(cp)) {
      flush();
    } else if (mode == TokenMode::Char || (split_cjk && is_cjk(cp))) {
      flush();
      utf8::append(current, cp);
      flush();
    } else {
      utf8::append(current, cp);
    }
  }
  flush();
  return tokens;
}

std::string normalize(std::string_view text, const TokenizationPolicy& policy) {
  std::string out;
  for (const auto& t : tokenize(text, policy)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

double word_f1(std::string_view hyp, std::string_view ref, const TokenizationPolicy& policy) {
  const auto ref_toks = tokenize(ref, policy);
  if (ref_toks.empty()) throw MetricError("word_f1: reference is empty after tokenization");
  const auto hyp_toks = tokenize(hyp, policy);
  if (hyp_toks.empty()) return 0.0;

  std::unordered_map<std::string, std::size_t> ref_counts;
  for (const auto& t : ref_toks) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : hyp_toks) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(hyp_toks.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref_toks.size());
  return 2.0 * p * r / (p + r);
}

BleuStats bleu_stats(const std::vector<std::vector<std::string>>& hyps,
                     const std::vector<std::vector<std::string>>& refs, int max_n) {
  if (hyps.size() != refs.size()) {
    throw MetricError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                      std::to_string(refs.size()) + " references");
  }
  if (max_n < 1) throw MetricError("bleu: max_n must be >= 1");
  BleuStats s;
  s.matches.assign(static_cast<std::size_t>(max_n), 0);
  s.totals.assign(static_cast<std::size_t>(max_n), 0);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    s.hyp_length += hyps[i].size();
    s.ref_length += refs[i].size();
    for (int n = 1; n <= max_n; ++n) {
      const auto h = ngram_counts(hyps[i], n);
      const auto r = ngram_counts(refs[i], n);
      for (const auto& [gram, count] : h) {
        s.totals[n - 1] += count;
        if (auto it = r.find(gram); it != r.end()) s.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < s.matches.size(); ++k) {
    double p;
    if (s.matches[k] == 0) {
      p = kBleuEpsilon / static_cast<double>(std::max<std::size_t>(s.totals[k], 1));
    } else {
      p = static_cast<double>(s.matches[k]) / static_cast<double>(s.totals[k]);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(s.hyp_length);
  const double r = static_cast<double>(s.ref_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(s.matches.size()));
}

double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
            const TokenizationPolicy& policy, int max_n) {
  if (hyps.size() != refs.size()) {
    throw MetricError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                      std::to_string(refs.size()) + " references");
  }
  if (refs.empty()) throw MetricError("bleu: empty reference list");
  std::vector<std::vector<std::string>> h;
  std::vector<std::vector<std::string>> r;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    h.push_back(tokenize(hyps[i], policy));
    r.push_back(tokenize(refs[i], policy));
  }
  return bleu_from_stats(bleu_stats(h, r, max_n));
}

double distinct_n(const std::vector<std::string>& hyps, const TokenizationPolicy& policy,
                  int n) {
  if (hyps.empty()) throw MetricError("distinct_n: empty hypothesis list");
  if (n < 1) throw MetricError("distinct_n: n must be >= 1");
  std::set<Ngram> unique;
  std::size_t total = 0;
  for (const auto& h : hyps) {
    for (const auto& [gram, count] : ngram_counts(tokenize(h, policy), n)) {
      unique.insert(gram);
      total += count;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::optional<double> knowledge_f1(std::string_view hyp, std::string_view ref,
                                   const std::vector<KnowledgeTriple>& triples,
                                   const TokenizationPolicy& policy) {
  std::set<std::string> entities;
  for (const auto& t : triples) {
    entities.insert(t.head);
    entities.insert(t.tail);
  }
  const auto ref_toks = tokenize(ref, policy);
  const auto hyp_toks = tokenize(hyp, policy);
  std::set<std::string> gold;
  std::set<std::string> pred;
  for (const auto& e : entities) {
    const auto toks = tokenize(e, policy);
    if (contains_sequence(ref_toks, toks)) gold.insert(toks.begin(), toks.end());
    if (contains_sequence(hyp_toks, toks)) pred.insert(toks.begin(), toks.end());
  }
  if (gold.empty()) return std::nullopt;
  return set_f1(gold, pred);
}

std::optional<bool> subgoal_achieved(std::string_view prediction, const Subgoal& goal,
                                     const TokenizationPolicy& policy) {
  const auto topic = tokenize(goal.topic, policy);
  if (topic.empty()) return std::nullopt;
  return contains_sequence(tokenize(prediction, policy), topic);
}

namespace {

void check_alignment(const std::vector<std::string>& predictions,
                     const std::vector<TurnContext>& contexts) {
  if (predictions.size() != contexts.size()) {
    throw MetricError("goal metrics: " + std::to_string(predictions.size()) +
                      " predictions for " + std::to_string(contexts.size()) + " contexts");
  }
}

}  // namespace

GoalSuccess goal_success(const std::vector<std::string>& predictions,
                         const std::vector<TurnContext>& contexts,
                         const TokenizationPolicy& policy) {
  check_alignment(predictions, contexts);
  // example id -> all final-target contexts achieved so far
  std::map<std::string, bool> dialogues;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    if (!contexts[i].final_target) continue;
    const bool ok = subgoal_achieved(predictions[i], contexts[i].subgoal, policy).value_or(true);
    auto [it, inserted] = dialogues.try_emplace(contexts[i].example_id, ok);
    if (!inserted) it->second = it->second && ok;
  }
  GoalSuccess out;
  out.dialogues = dialogues.size();
  for (const auto& [_, ok] : dialogues) out.succeeded += ok ? 1 : 0;
  if (out.dialogues > 0) {
    out.rate = static_cast<double>(out.succeeded) / static_cast<double>(out.dialogues);
  }
  return out;
}

double subgoal_failure_rate(const std::vector<std::string>& predictions,
                            const std::vector<TurnContext>& contexts,
                            const TokenizationPolicy& policy) {
  check_alignment(predictions, contexts);
  std::size_t total = 0;
  std::size_t achieved = 0;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    if (auto a = subgoal_achieved(predictions[i], contexts[i].subgoal, policy)) {
      ++total;
      achieved += *a ? 1 : 0;
    }
  }
  if (total == 0) return 0.0;
  return 1.0 - static_cast<double>(achieved) / static_cast<double>(total);
}

EvalReport evaluate(const std::vector<Prediction>& predictions,
                    const std::vector<TurnContext>& contexts, const TokenizationPolicy& policy) {
  if (predictions.empty()) throw MetricError("evaluate: no predictions");
  std::map<ContextRef, std::size_t> position;
  for (std::size_t i = 0; i < contexts.size(); ++i) position.emplace(contexts[i].ref(), i);

  std::vector<std::pair<std::size_t, const Prediction*>> resolved;
  std::set<ContextRef> seen;
  for (const auto& p : predictions) {
    auto it = position.find(p.ref);
    if (it == position.end()) {
      throw MetricError("evaluate: unresolved context_ref " + to_string(p.ref));
    }
    if (!seen.insert(p.ref).second) {
      throw MetricError("evaluate: duplicate prediction for " + to_string(p.ref));
    }
    resolved.emplace_back(it->second, &p);
  }
  std::sort(resolved.begin(), resolved.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  std::vector<TurnContext> scored;
  EvalReport report;
  double wf1_sum = 0.0;
  double kf1_sum = 0.0;
  for (const auto& [idx, pred] : resolved) {
    const auto& ctx = contexts[idx];
    ExampleScore s;
    s.ref = ctx.ref();
    s.word_f1 = word_f1(pred->text, ctx.gold_response, policy);
    s.knowledge_f1 = knowledge_f1(pred->text, ctx.gold_response, ctx.knowledge, policy);
    s.subgoal_achieved = subgoal_achieved(pred->text, ctx.subgoal, policy);
    wf1_sum += s.word_f1;
    if (s.knowledge_f1) {
      kf1_sum += *s.knowledge_f1;
      ++report.knowledge_scored;
    }
    report.per_example.push_back(std::move(s));
    hyps.push_back(pred->text);
    refs.push_back(ctx.gold_response);
    scored.push_back(ctx);
  }

  const auto n = static_cast<double>(resolved.size());
  report.scored_contexts = resolved.size();
  report.word_f1 = 100.0 * wf1_sum / n;
  report.bleu2 = bleu(hyps, refs, policy, 2);
  report.dist2 = distinct_n(hyps, policy, 2);
  report.knowledge_f1 =
      report.knowledge_scored > 0
          ? 100.0 * kf1_sum / static_cast<double>(report.knowledge_scored)
          : 0.0;
  const auto succ = goal_success(hyps, scored, policy);
  report.goal_success = 100.0 * succ.rate;
  report.goal_dialogues = succ.dialogues;
  report.subgoal_failure = 100.0 * subgoal_failure_rate(hyps, scored, policy);
  report.policy_fingerprint = policy.fingerprint();
  return report;
}

json to_json(const EvalReport& r) {
  json per = json::array();
  for (const auto& s : r.per_example) {
    json e = {{"context_ref", to_json(s.ref)}, {"word_f1", s.word_f1}};
    e["knowledge_f1"] = s.knowledge_f1 ? json(*s.knowledge_f1) : json(nullptr);
    e["subgoal_achieved"] = s.subgoal_achieved ? json(*s.subgoal_achieved) : json(nullptr);
    per.push_back(std::move(e));
  }
  return {{"metrics_version", kMetricsVersion},
          {"policy_fingerprint", r.policy_fingerprint},
          {"word_f1", r.word_f1},
          {"bleu2", r.bleu2},
          {"dist2", r.dist2},
          {"knowledge_f1", r.knowledge_f1},
          {"goal_success", r.goal_success},
          {"subgoal_failure", r.subgoal_failure},
          {"scored_contexts", r.scored_contexts},
          {"knowledge_scored", r.knowledge_scored},
          {"goal_dialogues", r.goal_dialogues},
          {"per_example", std::move(per)}};
}

std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t width = 6;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  const auto pad = [&](std::string s) {
    s.resize(width, ' ');
    return s;
  };
  std::string out = pad("Method") + "  W F1    BLEU-2  Dist-2  K F1    Succ    SubFail\n";
  out += std::string(width + 50, '-') + "\n";
  char buf[128];
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "  %-6.2f  %-6.3f  %-6.3f  %-6.2f  %-6.2f  %.2f\n", r.word_f1,
                  r.bleu2, r.dist2, r.knowledge_f1, r.goal_success, r.subgoal_failure);
    out += pad(name) + buf;
  }
  return out;
}

}  // namespace crc
