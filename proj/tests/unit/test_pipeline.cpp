#include <doctest.h>

#include <atomic>
#include <set>

#include "crc/errors.hpp"
#include "crc/pipeline.hpp"
#include "support/support.hpp"

using namespace crc;
using crc::testing::ScratchDir;
using crc::testing::make_dialogue;

namespace {

// Answers with a fixed chat completion until `budget` calls are spent, then
// refuses connections.
class BudgetTransport : public HttpTransport {
 public:
  explicit BudgetTransport(int budget) : budget_(budget) {}
  HttpResponse post(const std::string&, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>&,
                    std::chrono::milliseconds) override {
    if (calls++ >= budget_) throw TransportFailure("connection refused");
    const auto prompt = nlohmann::json::parse(body)["messages"][0]["content"].get<std::string>();
    return {200, nlohmann::json{{"choices", {{{"message", {{"content", "gen " + std::to_string(prompt.size())}}}}}}}.dump(), std::nullopt};
  }
  std::atomic<int> calls{0};

 private:
  int budget_;
};

BackendConfig flaky_http() {
  BackendConfig c;
  c.kind = BackendKind::Http;
  c.endpoint = "http://127.0.0.1:9/v1/chat/completions";
  c.max_retries = 0;
  return c;
}

std::vector<TurnContext> contexts_for(std::size_t dialogues, std::size_t turns_each) {
  std::vector<DialogueExample> corpus;
  for (std::size_t i = 0; i < dialogues; ++i) corpus.push_back(make_dialogue("d" + std::to_string(i), turns_each));
  return iterate_contexts(corpus);
}

PromptSettings settings() { return PromptSettings{}; }

AnnotatedRecord annotated(const TurnContext& ctx, ReflectionResult r) {
  AnnotatedRecord a;
  a.record.ref = ctx.ref();
  a.record.output = r.response;
  a.result = std::move(r);
  return a;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("parallel_for rethrows the lowest failing index") {
  std::atomic<int> ran{0};
  try {
    parallel_for(50, 8, [&](std::size_t i) {
      ++ran;
      if (i == 7 || i == 30) throw std::runtime_error("boom " + std::to_string(i));
    });
    FAIL("expected exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "boom 7");
  }
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i]++; });
  CHECK(std::count(hit.begin(), hit.end(), 1) == 100);
  parallel_for(0, 4, [&](std::size_t) { FAIL("no work expected"); });
}

TEST_CASE("run_experience generates one record per context") {
  const auto ctx = contexts_for(5, 2);
  Backend gen(mock_script({}));
  const auto recs = run_experience(ctx, gen, settings(), 4);
  REQUIRE(recs.size() == 10);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].ref == ctx[i].ref());
    CHECK(recs[i].output.rfind("mock-echo ", 0) == 0);
    CHECK(recs[i].provenance["dropped_history_turns"] == 0);
  }
  CHECK(run_experience({}, gen, settings()).empty());
}

TEST_CASE("run_experience resumes from the cache after an interruption") {
  ScratchDir dir("resume");
  const auto ctx = contexts_for(5, 2);
  {
    GenerationCache cache(dir.str("gen.log"));
    auto t = std::make_shared<BudgetTransport>(5);
    Backend gen(flaky_http(), &cache, std::make_shared<VirtualClock>(), t);
    CHECK_THROWS_WITH_AS(run_experience(ctx, gen, settings(), 1), doctest::Contains("d2#3"),
                         PipelineError);
    CHECK(cache.size() == 5);
  }
  GenerationCache cache(dir.str("gen.log"));
  auto t = std::make_shared<BudgetTransport>(100);
  Backend gen(flaky_http(), &cache, std::make_shared<VirtualClock>(), t);
  const auto recs = run_experience(ctx, gen, settings(), 1);
  CHECK(recs.size() == 10);
  CHECK(t->calls == 5);
  CHECK(gen.stats().cache_hits == 5);
}

TEST_CASE("oversized contexts are truncated and recorded") {
  auto ex = make_dialogue("big", 20);
  for (auto& t : ex.turns) t.text += std::string(100, 'x');
  const auto ctx = iterate_contexts(ex);
  auto s = settings();
  s.char_budget = 600;
  Backend gen(mock_script({}));
  const auto recs = run_experience({ctx.back()}, gen, s);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].provenance["dropped_history_turns"].get<int>() > 0);
  const auto parsed = parse_stage_input(recs[0].input, s.template_for(Stage::Experience), s.delimiter);
  const auto blocks = render_blocks(ctx.back());
  CHECK(parsed.blocks.dk == blocks.dk);
  CHECK(parsed.blocks.sg == blocks.sg);
  CHECK(parsed.blocks.up == blocks.up);
}

TEST_CASE("run_annotation parses verdicts and quarantines unusable replies") {
  const auto ctx = contexts_for(3, 1);
  const ContextIndex index(ctx);
  std::vector<StageRecord> recs(3);
  recs[0] = {ctx[0].ref(), "in0", "", "the star is Zhu", {}};
  recs[1] = {ctx[1].ref(), "in1", "", "hello there", {}};
  recs[2] = {ctx[2].ref(), "in2", "", "rambling", {}};
  Backend annotator(mock_script({{"the star is Zhu", "analysis\nVERDICT: DK|fix director"},
                                 {"hello there", "fine\nVERDICT: NONE|"},
                                 {"rambling", "I have thoughts but no verdict."}}));
  const auto out = run_annotation(recs, index, annotator, 2);
  REQUIRE(out.annotated.size() == 2);
  CHECK(out.annotated[0].result.types == InconsistencySet{InconsistencyType::DomainKnowledge});
  CHECK(out.annotated[0].result.suggestion == "fix director");
  CHECK(out.annotated[0].result.response == "the star is Zhu");
  CHECK(out.annotated[0].analysis == "analysis");
  CHECK(out.annotated[1].result.consistent());
  REQUIRE(out.rejects.size() == 1);
  CHECK(out.rejects[0].ref == ctx[2].ref());
  // one reply per good record, two (initial + reminder) for the rejected one
  CHECK(annotator.stats().calls == 4);
}

TEST_CASE("exports") {
  const auto ctx = contexts_for(2, 2);
  const ContextIndex index(ctx);
  std::vector<AnnotatedRecord> pairs = {
      annotated(ctx[0], {"Sure.", {InconsistencyType::DomainKnowledge}, "Yanping Zhu is the director"}),
      annotated(ctx[1], {"Hi.", {}, "none"}),
      annotated(ctx[2], {"Ok.", {InconsistencyType::Subgoal}, "bad ### suggestion"}),
      annotated(ctx[3], {"Fine.", {InconsistencyType::UserProfile}, "use the name"})};

  const auto refl = export_reflection_training(pairs, index, settings());
  CHECK(refl.examples.size() == 3);
  CHECK(refl.quarantined.size() == 1);
  CHECK(refl.quarantined[0].ref == ctx[2].ref());
  CHECK(refl.examples[0].target == "Sure.###DK:###Yanping Zhu is the director");
  CHECK(refl.examples[0].input.size() > 11);
  CHECK(refl.examples[0].input.substr(refl.examples[0].input.size() - 11) == "###stage2_R");

  const auto dropped = export_reflection_training(pairs, index, settings(), false);
  CHECK(dropped.examples.size() == 2);
  CHECK(dropped.dropped_consistent == 1);

  const auto corr = export_correction_training(pairs, index, settings());
  CHECK(corr.examples.size() == refl.examples.size());
  CHECK(corr.quarantined.size() == 1);
  for (const auto& e : corr.examples) {
    const auto& c = index.at(e.ref);
    CHECK(e.target == c.gold_response);
    CHECK(e.input.substr(e.input.size() - 11) == "###stage3_C");
  }
  CHECK(corr.examples[0].input.find("Sure.###DK:###Yanping Zhu is the director###stage3_C") != std::string::npos);

  const auto exp = export_experience_training(ctx, settings());
  CHECK(exp.examples.size() == 4);
  CHECK(exp.examples[1].target == ctx[1].gold_response);
}

TEST_CASE("two-pass inference") {
  const auto ctx = contexts_for(1, 1)[0];
  const std::string c = "The leading actor is Yanping Zhu.###DK:###Yanping Zhu is the director";
  Backend reflector(mock_script({{"###stage2_R", c}}));
  Backend corrector(mock_script({{"###stage3_C", "Have you seen Grandpa's Love?"}}));
  const auto r = infer_crc(ctx, reflector, corrector, settings());
  REQUIRE(r.first_pass.has_value());
  CHECK(r.first_pass->types == InconsistencySet{InconsistencyType::DomainKnowledge});
  CHECK(r.correction_input.find(c) != std::string::npos);
  CHECK(r.final_response == "Have you seen Grandpa's Love?");
  CHECK_FALSE(r.fallback);

  Backend consistent(mock_script({{"default", "Ok.###NONE:###none"}}));
  Backend counting(mock_script({{"default", "final"}}));
  const auto r2 = infer_crc(ctx, consistent, counting, settings());
  CHECK(counting.stats().calls == 1);
  CHECK(r2.final_response == "final");

  Backend broken(mock_script({{"default", "no envelope"}}));
  try {
    infer_crc(ctx, broken, corrector, settings(), FirstPassPolicy::Fail);
    FAIL("expected InferenceError");
  } catch (const InferenceError& e) {
    CHECK(e.raw_output() == "no envelope");
    CHECK(e.ref() == ctx.ref());
  }
  const auto fb = infer_crc(ctx, broken, corrector, settings(), FirstPassPolicy::Fallback);
  CHECK(fb.fallback);
  CHECK(fb.final_response == "no envelope");
  CHECK_FALSE(fb.first_pass.has_value());
}

TEST_CASE("batch inference is order-stable across worker counts") {
  const auto ctx = contexts_for(3, 3);
  ScratchDir dir("batch");
  std::vector<std::string> dumps;
  for (int workers : {1, 8}) {
    Backend reflector(mock_script({{"default", "Ok.###SG:###mention the topic"}}));
    Backend corrector(mock_script({}));
    const auto results = run_batch_inference(ctx, reflector, corrector, settings(), FirstPassPolicy::Fail, workers);
    CHECK(results.size() == 9);
    std::vector<nlohmann::json> rows;
    for (const auto& r : results) rows.push_back(to_json(r, "infer-x"));
    const auto path = dir.str("p" + std::to_string(workers) + ".jsonl");
    write_jsonl(path, rows);
    dumps.push_back(crc::testing::read_file(path));
    const auto preds = load_predictions(path);
    CHECK(preds.size() == 9);
    CHECK(preds[0].ref == ctx[0].ref());
  }
  CHECK(dumps[0] == dumps[1]);

  Backend reflector(mock_script({{"default", "bad"}}));
  Backend corrector(mock_script({}));
  CHECK_THROWS_WITH_AS(run_batch_inference(ctx, reflector, corrector, settings()),
                       doctest::Contains("9 of 9"), PipelineError);
  CHECK(run_batch_inference({}, reflector, corrector, settings()).empty());
}

TEST_CASE("records round-trip through json") {
  StageRecord r{{"a", 3}, "in", "tgt", "out", {{"k", 1}}};
  const auto back = stage_record_from_json(to_json(r, "m"));
  CHECK(back.ref == r.ref);
  CHECK(back.input == "in");
  CHECK(back.output == "out");
  CHECK(back.provenance == r.provenance);

  AnnotatedRecord a;
  a.record = r;
  a.result = {"resp", {InconsistencyType::UserProfile, InconsistencyType::Subgoal}, "s"};
  a.analysis = "why";
  const auto ab = annotated_record_from_json(to_json(a, "m"));
  CHECK(ab.result == a.result);
  CHECK(ab.analysis == "why");
  CHECK(first_pass_policy_from_string(to_string(FirstPassPolicy::Fallback)) == FirstPassPolicy::Fallback);
  CHECK_THROWS_AS(first_pass_policy_from_string("maybe"), ConfigError);
}

}  // TEST_SUITE
