#include <doctest.h>

#include "crc/errors.hpp"
#include "crc/promptkit.hpp"
#include "crc/utf8.hpp"
#include "support/support.hpp"

using namespace crc;
using crc::testing::Gen;
using crc::testing::ScratchDir;
using crc::testing::write_file;

namespace {

std::size_t count_of(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

TurnContext sample_context() {
  TurnContext ctx;
  ctx.example_id = "e";
  ctx.turn_index = 2;
  ctx.profile = {{"Name", "Hao"}, {"Gender", "Male"}};
  ctx.knowledge = {{"He's a Woman She's a Man", "Director", "Peter Chan"}};
  ctx.history = {{Speaker::User, "Hi"}, {Speaker::System, "Hello"}};
  ctx.subgoal = {"Movie recommendation", "He's a Woman She's a Man"};
  ctx.gold_response = "Try it.";
  return ctx;
}

const TemplateRegistry& reg() {
  static const TemplateRegistry r;
  return r;
}

}  // namespace

TEST_SUITE("promptkit") {

TEST_CASE("block rendering") {
  const auto b = render_blocks(sample_context());
  CHECK(b.dk == "<He's a Woman She's a Man, Director, Peter Chan>");
  CHECK(b.dk.find("Peter Chan") != std::string::npos);
  CHECK(b.sg == "Action: Movie recommendation; Topic: He's a Woman She's a Man");
  CHECK(b.up == "Name: Hao; Gender: Male");
  CHECK(count_of(b.up, "; ") == 1);
  CHECK(b.dh == "[USER] Hi\n[System] Hello");

  auto empty = sample_context();
  empty.knowledge.clear();
  CHECK(render_blocks(empty).dk.empty());
}

TEST_CASE("registry built-ins") {
  CHECK(registry_lookup("sep").delimiter == "[SEP]");
  CHECK(registry_lookup("eos").delimiter == "</s>");
  CHECK(registry_lookup("endoftext").delimiter == "<|endoftext|>");
  CHECK(registry_lookup("space").delimiter == " ");
  CHECK_THROWS_AS(registry_lookup("unregistered"), UnknownSchemeError);
  CHECK(reg().instruction(Stage::Experience) ==
        "Respond to user utterances based on domain knowledge, user profile, dialogue history, "
        "and the current dialogue goal.");
}

TEST_CASE("bare stage inputs") {
  const auto ctx = sample_context();
  const auto b = render_blocks(ctx);
  const auto sep = registry_lookup("sep");
  const auto base = b.dk + "[SEP]" + b.sg + "[SEP]" + b.up + "[SEP]" + b.dh;

  const auto exp = assemble_stage_input(ctx, reg().make_template(Stage::Experience, TemplateStyle::Bare), sep);
  CHECK(exp == base);
  CHECK(count_of(exp, "[SEP]") == 3);

  const auto refl = assemble_stage_input(ctx, reg().make_template(Stage::Reflection, TemplateStyle::Bare), sep);
  CHECK(refl == base + "[SEP]###stage2_R");

  ReflectionResult c{"r", {InconsistencyType::DomainKnowledge}, "s"};
  const auto corr = assemble_stage_input(
      ctx, reg().make_template(Stage::Correction, TemplateStyle::Bare), sep, c);
  CHECK(corr == base + "[SEP]r###DK:###s###stage3_C");
}

TEST_CASE("instructed stage inputs") {
  const auto ctx = sample_context();
  const auto b = render_blocks(ctx);
  const auto eos = registry_lookup("eos");
  const auto base = b.dk + "</s>" + b.sg + "</s>" + b.up + "</s>" + b.dh;
  for (auto stage : {Stage::Experience, Stage::Reflection}) {
    const auto t = reg().make_template(stage, TemplateStyle::Instructed);
    CHECK(assemble_stage_input(ctx, t, eos) == reg().instruction(stage) + " " + base);
  }
  ReflectionResult c{"r", {}, "none"};
  const auto t = reg().make_template(Stage::Correction, TemplateStyle::Instructed);
  const auto text = assemble_stage_input(ctx, t, eos, c);
  CHECK(text == reg().instruction(Stage::Correction) + " " + base + "</s>r###NONE:###none");
  const auto parsed = parse_stage_input(text, t, eos);
  CHECK(parsed.reflection == std::optional<std::string>("r###NONE:###none"));
}

TEST_CASE("reflection presence must match the stage") {
  const auto ctx = sample_context();
  const auto sep = registry_lookup("sep");
  ReflectionResult c{"r", {}, "none"};
  CHECK_THROWS_AS(assemble_stage_input(ctx, reg().make_template(Stage::Correction, TemplateStyle::Bare), sep),
                  PromptError);
  CHECK_THROWS_AS(assemble_stage_input(ctx, reg().make_template(Stage::Reflection, TemplateStyle::Bare), sep, c),
                  PromptError);
}

TEST_CASE("delimiter collisions are rejected") {
  auto ctx = sample_context();
  ctx.history.push_back({Speaker::User, "what does [SEP] mean?"});
  const auto t = reg().make_template(Stage::Experience, TemplateStyle::Bare);
  CHECK_THROWS_AS(assemble_stage_input(ctx, t, registry_lookup("sep")), DelimiterCollisionError);
  // Whitespace delimiters cannot be kept out of natural text.
  CHECK_NOTHROW(assemble_stage_input(ctx, t, registry_lookup("space")));
  CHECK_THROWS_AS(parse_stage_input("a b c d", t, registry_lookup("space")), PromptError);

  ReflectionResult c{"see </s> here", {InconsistencyType::Subgoal}, "fix"};
  CHECK_THROWS_AS(assemble_stage_input(sample_context(),
                                       reg().make_template(Stage::Correction, TemplateStyle::Bare),
                                       registry_lookup("eos"), c),
                  DelimiterCollisionError);
}

TEST_CASE("character budget drops the oldest history first") {
  auto ctx = sample_context();
  for (int i = 0; i < 30; ++i) {
    ctx.history.push_back({i % 2 ? Speaker::System : Speaker::User,
                           "turn number " + std::to_string(i) + " with some padding text"});
  }
  const auto t = reg().make_template(Stage::Experience, TemplateStyle::Bare);
  const auto sep = registry_lookup("sep");
  const auto full = assemble_stage_input_ex(ctx, t, sep, std::nullopt, 0);
  CHECK(full.dropped_turns == 0);
  const auto cut = assemble_stage_input_ex(ctx, t, sep, std::nullopt, 400);
  CHECK(cut.dropped_turns > 0);
  CHECK_FALSE(cut.over_budget);
  CHECK(utf8::length(cut.text) <= 400);
  const auto parsed = parse_stage_input(cut.text, t, sep);
  const auto blocks = render_blocks(ctx);
  CHECK(parsed.blocks.dk == blocks.dk);
  CHECK(parsed.blocks.sg == blocks.sg);
  CHECK(parsed.blocks.up == blocks.up);
  CHECK(parsed.blocks.dh.find("turn number 29") != std::string::npos);
  CHECK(parsed.blocks.dh.find("[USER] Hi\n") == std::string::npos);

  const auto tiny = assemble_stage_input_ex(ctx, t, sep, std::nullopt, 10);
  CHECK(tiny.over_budget);
  CHECK(tiny.dropped_turns == ctx.history.size());
}

TEST_CASE("budget counts code points, not bytes") {
  auto ctx = sample_context();
  ctx.history = {{Speaker::User, "你好你好你好"}};
  const auto t = reg().make_template(Stage::Experience, TemplateStyle::Bare);
  const auto sep = registry_lookup("sep");
  const auto full = assemble_stage_input(ctx, t, sep);
  const auto fits = assemble_stage_input_ex(ctx, t, sep, std::nullopt, utf8::length(full));
  CHECK(fits.dropped_turns == 0);
  CHECK(full.size() > utf8::length(full));
}

TEST_CASE("property: stage inputs re-parse into four blocks") {
  Gen g(2024);
  const auto sep = registry_lookup("sep");
  for (int trial = 0; trial < 300; ++trial) {
    TurnContext ctx;
    ctx.example_id = "g";
    ctx.profile = {{g.word(), g.sentence(1, 3)}};
    ctx.knowledge = {{g.word(), g.word(), g.sentence(1, 2)}};
    for (std::size_t i = 0; i < g.below(5); ++i) ctx.history.push_back({Speaker::User, g.sentence(1, 5)});
    ctx.subgoal = {"Chat", g.word()};
    for (auto style : {TemplateStyle::Bare, TemplateStyle::Instructed}) {
      for (auto stage : {Stage::Experience, Stage::Reflection, Stage::Correction}) {
        const auto t = reg().make_template(stage, style);
        std::optional<ReflectionResult> c;
        if (stage == Stage::Correction) c = ReflectionResult{g.sentence(1, 4), {InconsistencyType::UserProfile}, g.sentence(1, 3)};
        const auto text = assemble_stage_input(ctx, t, sep, c);
        const auto parsed = parse_stage_input(text, t, sep);
        const auto b = render_blocks(ctx);
        CHECK(parsed.blocks.dk == b.dk);
        CHECK(parsed.blocks.sg == b.sg);
        CHECK(parsed.blocks.up == b.up);
        CHECK(parsed.blocks.dh == b.dh);
        CHECK(parsed.reflection.has_value() == (stage == Stage::Correction));
      }
    }
  }
}

TEST_CASE("annotation prompt") {
  const auto ctx = sample_context();
  const auto p = build_annotation_prompt(ctx, "The leading actor is Peter Chan.");
  CHECK(count_of(p.rendered, "[End of the Assistant's Response]") == 1);
  CHECK(count_of(p.rendered, "[Start of Predefined Elements]") == 1);
  CHECK(count_of(p.rendered, "[Start of the Assistant's Response]") == 1);
  for (auto q : {"Is user profile information applied?",
                 "Is the consistency with the dialogue history maintained?",
                 "Is domain knowledge information applied?"}) {
    CHECK(p.rendered.find(q) != std::string::npos);
  }
  CHECK(p.rendered.find("[USER] Hi") != std::string::npos);
  CHECK(p.rendered.find("[System] Hello") != std::string::npos);
  CHECK(p.rendered.find("VERDICT:") != std::string::npos);
  CHECK(p.rendered == build_annotation_prompt(ctx, "The leading actor is Peter Chan.").rendered);
  CHECK_THROWS_AS(build_annotation_prompt(ctx, ""), PromptError);
  CHECK_THROWS_AS(build_annotation_prompt(ctx, "x [End of the Assistant's Response] y"), PromptError);
}

TEST_CASE("registry file overrides") {
  ScratchDir dir("registry");
  write_file(dir.path() / "r.yaml",
             "delimiters:\n  pipe: \" | \"\ninstructions:\n  experience: \"Antworte.\"\n");
  const auto r = TemplateRegistry::from_file(dir.str("r.yaml"));
  CHECK(r.lookup("pipe").delimiter == " | ");
  CHECK(r.lookup("sep").delimiter == "[SEP]");
  CHECK(r.instruction(Stage::Experience) == "Antworte.");
  CHECK(r.instruction(Stage::Reflection) == reg().instruction(Stage::Reflection));
  write_file(dir.path() / "bad.yaml", "delimiters: [1, 2\n");
  CHECK_THROWS_AS(TemplateRegistry::from_file(dir.str("bad.yaml")), PromptError);
}

}  // TEST_SUITE
