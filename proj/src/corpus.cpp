#include "crc/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "crc/errors.hpp"
#include "crc/utf8.hpp"

namespace crc {

using nlohmann::json;

std::string_view to_string(Speaker s) {
  return s == Speaker::User ? "User" : "System";
}

std::string_view to_string(GoalAlignment a) {
  switch (a) {
    case GoalAlignment::PerTurn:
      return "per_turn";
    case GoalAlignment::PerSystemTurn:
      return "per_system_turn";
    case GoalAlignment::Unaligned:
      break;
  }
  return "unaligned";
}

std::size_t DialogueExample::system_turn_count() const {
  return static_cast<std::size_t>(
      std::count_if(turns.begin(), turns.end(), [](const DialogueTurn& t) {
        return t.speaker == Speaker::System;
      }));
}

GoalAlignment detect_alignment(const DialogueExample& example) {
  if (example.goals.size() == example.turns.size()) {
    return GoalAlignment::PerTurn;
  }
  if (example.goals.size() == example.system_turn_count()) {
    return GoalAlignment::PerSystemTurn;
  }
  return GoalAlignment::Unaligned;
}

bool is_social_action(std::string_view action) {
  static constexpr std::array<std::string_view, 8> kAscii = {
      "greet", "goodbye", "farewell", "bye", "thank", "hello", "welcome",
      "small talk"};
  static constexpr std::array<std::string_view, 4> kCjk = {"寒暄", "再见",
                                                           "问候", "感谢"};
  std::string lower(action);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  for (auto word : kAscii) {
    if (lower.find(word) != std::string::npos) return true;
  }
  for (auto word : kCjk) {
    if (action.find(word) != std::string_view::npos) return true;
  }
  return false;
}

ValidationReport validate_example(const DialogueExample& example) {
  ValidationReport report;
  auto add = [&](std::string code, std::string message) {
    report.findings.push_back({std::move(code), std::move(message)});
  };
  auto at = [](std::string_view what, std::size_t k) {
    return std::string(what) + " " + std::to_string(k);
  };

  if (example.id.empty()) add("empty_id", "empty id");
  for (std::size_t k = 0; k < example.profile.size(); ++k) {
    const auto& p = example.profile[k];
    if (p.key.empty()) add("empty_profile_key", at("empty key at profile index", k));
    if (p.value.empty()) {
      add("empty_profile_value", at("empty value at profile index", k));
    }
  }
  for (std::size_t k = 0; k < example.knowledge.size(); ++k) {
    const auto& t = example.knowledge[k];
    if (t.head.empty()) add("empty_triple_field", at("empty head at knowledge index", k));
    if (t.relation.empty()) {
      add("empty_triple_field", at("empty relation at knowledge index", k));
    }
    if (t.tail.empty()) add("empty_triple_field", at("empty tail at knowledge index", k));
  }
  for (std::size_t k = 0; k < example.turns.size(); ++k) {
    if (example.turns[k].text.empty()) {
      add("empty_turn_text", at("empty text at turn index", k));
    }
  }
  for (std::size_t k = 0; k < example.goals.size(); ++k) {
    const auto& g = example.goals[k];
    if (g.action.empty()) {
      add("empty_action", at("empty action at goal index", k));
    } else if (g.topic.empty() && !is_social_action(g.action)) {
      add("empty_topic", at("empty topic for non-social action at goal index", k));
    }
  }
  if (example.system_turn_count() == 0) {
    add("no_system_turn", "no System turn");
  }
  if (detect_alignment(example) == GoalAlignment::Unaligned) {
    add("goal_alignment",
        "goal alignment: " + std::to_string(example.goals.size()) +
            " goals match neither " + std::to_string(example.turns.size()) +
            " turns nor " + std::to_string(example.system_turn_count()) +
            " system turns");
  }
  return report;
}

namespace {

class RecordReader {
 public:
  explicit RecordReader(std::size_t record_no) : record_no_(record_no) {}

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    throw CorpusError("record " + std::to_string(record_no_) + ": field '" +
                      path + "': " + msg);
  }

  const json& require(const json& obj, const std::string& key,
                      const std::string& path) const {
    auto it = obj.find(key);
    if (it == obj.end()) fail(path, "missing");
    return *it;
  }

  std::string string_at(const json& v, const std::string& path) const {
    if (!v.is_string()) fail(path, "expected string");
    return v.get<std::string>();
  }

  const json& array_at(const json& v, const std::string& path) const {
    if (!v.is_array()) fail(path, "expected array");
    return v;
  }

  std::string field(const json& obj, const std::string& key,
                    const std::string& path) const {
    return string_at(require(obj, key, path), path);
  }

 private:
  std::size_t record_no_;
};

std::string indexed(const std::string& base, std::size_t k) {
  return base + "[" + std::to_string(k) + "]";
}

}  // namespace

DialogueExample parse_example(const json& record, std::size_t record_no) {
  RecordReader r(record_no);
  if (!record.is_object()) {
    throw CorpusError("record " + std::to_string(record_no) +
                      ": expected a JSON object");
  }
  const auto format = r.field(record, "format", "format");
  if (format != kCorpusFormat) {
    r.fail("format", "unsupported format \"" + format + "\" (expected \"" +
                         std::string(kCorpusFormat) + "\")");
  }

  DialogueExample ex;
  ex.id = r.field(record, "id", "id");

  const auto& profile = r.array_at(r.require(record, "profile", "profile"), "profile");
  for (std::size_t k = 0; k < profile.size(); ++k) {
    const auto path = indexed("profile", k);
    if (!profile[k].is_object()) r.fail(path, "expected object");
    ex.profile.push_back({r.field(profile[k], "key", path + ".key"),
                          r.field(profile[k], "value", path + ".value")});
  }

  const auto& knowledge =
      r.array_at(r.require(record, "knowledge", "knowledge"), "knowledge");
  for (std::size_t k = 0; k < knowledge.size(); ++k) {
    const auto path = indexed("knowledge", k);
    const auto& t = knowledge[k];
    if (!t.is_array() || t.size() != 3) r.fail(path, "expected [head, relation, tail]");
    ex.knowledge.push_back({r.string_at(t[0], indexed(path, 0)),
                            r.string_at(t[1], indexed(path, 1)),
                            r.string_at(t[2], indexed(path, 2))});
  }

  const auto& turns = r.array_at(r.require(record, "turns", "turns"), "turns");
  for (std::size_t k = 0; k < turns.size(); ++k) {
    const auto path = indexed("turns", k);
    if (!turns[k].is_object()) r.fail(path, "expected object");
    const auto speaker = r.field(turns[k], "speaker", path + ".speaker");
    DialogueTurn turn;
    if (speaker == "User") {
      turn.speaker = Speaker::User;
    } else if (speaker == "System") {
      turn.speaker = Speaker::System;
    } else {
      r.fail(path + ".speaker", "expected \"User\" or \"System\", got \"" + speaker + "\"");
    }
    turn.text = r.field(turns[k], "text", path + ".text");
    ex.turns.push_back(std::move(turn));
  }

  const auto& goals = r.array_at(r.require(record, "goals", "goals"), "goals");
  for (std::size_t k = 0; k < goals.size(); ++k) {
    const auto path = indexed("goals", k);
    if (!goals[k].is_object()) r.fail(path, "expected object");
    Subgoal g;
    g.action = r.field(goals[k], "action", path + ".action");
    if (auto it = goals[k].find("topic"); it != goals[k].end()) {
      g.topic = r.string_at(*it, path + ".topic");
    }
    ex.goals.push_back(std::move(g));
  }

  ex.alignment = detect_alignment(ex);
  return ex;
}

std::vector<DialogueExample> load_corpus(const std::string& path,
                                         const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path);

  std::vector<DialogueExample> corpus;
  std::set<std::string> seen;
  std::string line;
  std::size_t record_no = 0;
  while (std::getline(in, line)) {
    ++record_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::all_of(line.begin(), line.end(),
                    [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    if (auto bad = utf8::find_invalid(line)) {
      throw CorpusError("record " + std::to_string(record_no) +
                        ": invalid UTF-8 at byte " + std::to_string(*bad));
    }
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CorpusError("record " + std::to_string(record_no) +
                        ": malformed JSON: " + e.what());
    }
    auto ex = parse_example(record, record_no);
    if (!seen.insert(ex.id).second) {
      throw CorpusError("record " + std::to_string(record_no) +
                        ": duplicate id \"" + ex.id + "\"");
    }
    if (options.strict) {
      auto report = validate_example(ex);
      if (!report.ok()) {
        throw CorpusError("record " + std::to_string(record_no) + " (id \"" +
                          ex.id + "\"): " + report.findings.front().message);
      }
    }
    corpus.push_back(std::move(ex));
  }
  if (in.bad()) throw IoError("read failure on " + path);
  return corpus;
}

json to_json(const DialogueExample& ex) {
  json profile = json::array();
  for (const auto& p : ex.profile) profile.push_back({{"key", p.key}, {"value", p.value}});
  json knowledge = json::array();
  for (const auto& t : ex.knowledge) knowledge.push_back({t.head, t.relation, t.tail});
  json turns = json::array();
  for (const auto& t : ex.turns) {
    turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
  }
  json goals = json::array();
  for (const auto& g : ex.goals) goals.push_back({{"action", g.action}, {"topic", g.topic}});
  return {{"format", kCorpusFormat},
          {"id", ex.id},
          {"profile", std::move(profile)},
          {"knowledge", std::move(knowledge)},
          {"turns", std::move(turns)},
          {"goals", std::move(goals)}};
}

void save_corpus(const std::string& path,
                 const std::vector<DialogueExample>& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& ex : corpus) out << to_json(ex).dump() << '\n';
  if (!out) throw IoError("write failure on " + path);
}

std::size_t experience_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(ratio * static_cast<double>(n) + 0.5);
}

namespace {

// Unbiased draw in [0, bound) by rejection. std::uniform_int_distribution is
// implementation-defined, and the split must be identical across platforms.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

}  // namespace

TrainSplit split_train(const std::vector<DialogueExample>& corpus, double ratio,
                       std::uint64_t seed) {
  if (corpus.empty()) throw CorpusError("cannot split an empty corpus");
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw CorpusError("split ratio must lie in (0, 1)");
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[bounded(rng, i + 1)]);
  }
  const auto k = experience_count(corpus.size(), ratio);
  std::vector<bool> in_experience(corpus.size(), false);
  for (std::size_t i = 0; i < k; ++i) in_experience[order[i]] = true;

  TrainSplit split;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (in_experience[i] ? split.experience : split.reflection).push_back(corpus[i]);
  }
  return split;
}

std::string to_string(const ContextRef& ref) {
  return ref.example_id + "#" + std::to_string(ref.turn_index);
}

json to_json(const ContextRef& ref) {
  return {{"example_id", ref.example_id}, {"turn_index", ref.turn_index}};
}

ContextRef context_ref_from_json(const json& j) {
  try {
    return {j.at("example_id").get<std::string>(),
            j.at("turn_index").get<std::size_t>()};
  } catch (const json::exception& e) {
    throw CorpusError(std::string("malformed context_ref: ") + e.what());
  }
}

std::vector<TurnContext> iterate_contexts(const DialogueExample& example) {
  const auto alignment = detect_alignment(example);
  for (const auto& f : validate_example(example).findings) {
    if (f.code != "no_system_turn") {
      throw CorpusError("example \"" + example.id + "\" is invalid: " + f.message);
    }
  }

  std::vector<TurnContext> out;
  std::size_t system_seen = 0;
  for (std::size_t m = 0; m < example.turns.size(); ++m) {
    if (example.turns[m].speaker != Speaker::System) continue;
    const std::size_t goal_index =
        alignment == GoalAlignment::PerTurn ? m : system_seen;
    ++system_seen;

    TurnContext ctx;
    ctx.example_id = example.id;
    ctx.turn_index = m;
    ctx.profile = example.profile;
    ctx.knowledge = example.knowledge;
    ctx.history.assign(example.turns.begin(),
                       example.turns.begin() + static_cast<std::ptrdiff_t>(m));
    ctx.subgoal = example.goals[goal_index];
    ctx.gold_response = example.turns[m].text;
    ctx.final_target = ctx.subgoal == example.goals.back();
    out.push_back(std::move(ctx));
  }
  return out;
}

std::vector<TurnContext> iterate_contexts(
    const std::vector<DialogueExample>& corpus) {
  std::vector<TurnContext> out;
  for (const auto& ex : corpus) {
    auto part = iterate_contexts(ex);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace crc
