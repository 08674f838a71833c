#include "crc/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <thread>

#include "crc/errors.hpp"

namespace crc {

using nlohmann::json;

json to_json(const StageRecord& r, const std::string& manifest_ref) {
  json j = {{"context_ref", to_json(r.ref)},
            {"input", r.input},
            {"provenance", r.provenance},
            {"manifest_ref", manifest_ref}};
  if (!r.target.empty()) j["target"] = r.target;
  j["output"] = r.output;
  return j;
}

StageRecord stage_record_from_json(const json& j) {
  try {
    StageRecord r;
    r.ref = context_ref_from_json(j.at("context_ref"));
    r.input = j.at("input").get<std::string>();
    r.output = j.value("output", std::string());
    r.target = j.value("target", std::string());
    r.provenance = j.value("provenance", json::object());
    return r;
  } catch (const json::exception& e) {
    throw PipelineError(std::string("malformed stage record: ") + e.what());
  }
}

ContextIndex::ContextIndex(const std::vector<TurnContext>& contexts) {
  for (const auto& c : contexts) index_.emplace(c.ref(), c);
}

const TurnContext& ContextIndex::at(const ContextRef& ref) const {
  auto it = index_.find(ref);
  if (it == index_.end()) throw PipelineError("unknown context " + to_string(ref));
  return it->second;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const auto threads = static_cast<std::size_t>(std::clamp<long long>(workers, 1, static_cast<long long>(n)));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  const auto work = [&] {
    while (!failed.load()) {
      const auto i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed.store(true);
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

template <typename T>
void sort_by_ref(std::vector<T>& items) {
  std::stable_sort(items.begin(), items.end(),
                   [](const T& a, const T& b) { return a.ref < b.ref; });
}

[[noreturn]] void rethrow_with_ref(const ContextRef& ref, const std::exception& e) {
  throw PipelineError(to_string(ref) + ": " + e.what());
}

}  // namespace

std::vector<StageRecord> run_experience(const std::vector<TurnContext>& contexts,
                                        Backend& generator, const PromptSettings& settings,
                                        int workers) {
  std::vector<StageRecord> out(contexts.size());
  const auto tmpl = settings.template_for(Stage::Experience);
  parallel_for(contexts.size(), workers, [&](std::size_t i) {
    const auto& ctx = contexts[i];
    try {
      const auto in = assemble_stage_input_ex(ctx, tmpl, settings.delimiter, std::nullopt,
                                              settings.char_budget);
      const auto rec = generator.generate(in.text);
      StageRecord r;
      r.ref = ctx.ref();
      r.input = in.text;
      r.output = rec.output;
      r.provenance = {{"dropped_history_turns", in.dropped_turns},
                      {"over_budget", in.over_budget},
                      {"cache_key", rec.cache_key}};
      out[i] = std::move(r);
    } catch (const Error& e) {
      rethrow_with_ref(ctx.ref(), e);
    }
  });
  sort_by_ref(out);
  return out;
}

json to_json(const QuarantinedRecord& q, const std::string& manifest_ref) {
  return {{"context_ref", to_json(q.ref)},
          {"input", q.input},
          {"target", q.target},
          {"error", q.error},
          {"manifest_ref", manifest_ref}};
}

json to_json(const AnnotatedRecord& a, const std::string& manifest_ref) {
  json types = json::array();
  for (auto t : a.result.types) types.push_back(code_of(t));
  return {{"context_ref", to_json(a.record.ref)},
          {"input", a.record.input},
          {"response", a.result.response},
          {"types", std::move(types)},
          {"suggestion", a.result.suggestion},
          {"analysis", a.analysis},
          {"experience_input", a.record.provenance.value("experience_input", std::string())},
          {"manifest_ref", manifest_ref}};
}

AnnotatedRecord annotated_record_from_json(const json& j) {
  try {
    AnnotatedRecord a;
    a.record.ref = context_ref_from_json(j.at("context_ref"));
    a.record.input = j.at("input").get<std::string>();
    a.record.output = j.at("response").get<std::string>();
    a.result.response = a.record.output;
    for (const auto& code : j.at("types")) {
      auto t = type_from_code(code.get<std::string>());
      if (!t) throw PipelineError("unknown type code in annotation record");
      a.result.types.insert(*t);
    }
    a.result.suggestion = j.at("suggestion").get<std::string>();
    a.analysis = j.value("analysis", std::string());
    return a;
  } catch (const json::exception& e) {
    throw PipelineError(std::string("malformed annotation record: ") + e.what());
  }
}

AnnotationOutcome run_annotation(const std::vector<StageRecord>& records,
                                 const ContextIndex& contexts, Backend& annotator,
                                 int workers) {
  struct Slot {
    std::optional<AnnotatedRecord> annotated;
    std::optional<QuarantinedRecord> reject;
  };
  std::vector<Slot> slots(records.size());

  parallel_for(records.size(), workers, [&](std::size_t i) {
    const auto& rec = records[i];
    const auto& ctx = contexts.at(rec.ref);
    if (rec.output.empty()) {
      slots[i].reject = QuarantinedRecord{rec.ref, rec.input, "", "empty generated response"};
      return;
    }
    std::string prompt;
    try {
      prompt = build_annotation_prompt(ctx, rec.output).rendered;
    } catch (const PromptError& e) {
      slots[i].reject = QuarantinedRecord{rec.ref, rec.input, rec.output, e.what()};
      return;
    }

    std::string last_reply;
    std::string last_error;
    for (int attempt = 0; attempt < 2; ++attempt) {
      const auto full = attempt == 0 ? prompt : prompt + std::string(annotation_reminder());
      try {
        last_reply = annotator.generate(full).output;
      } catch (const Error& e) {
        rethrow_with_ref(rec.ref, e);
      }
      try {
        auto verdict = parse_annotator_reply(last_reply);
        AnnotatedRecord a;
        a.record = rec;
        a.record.input = full;
        a.record.provenance["experience_input"] = rec.input;
        a.result.response = rec.output;
        a.result.types = std::move(verdict.types);
        a.result.suggestion = std::move(verdict.suggestion);
        a.analysis = std::move(verdict.analysis);
        slots[i].annotated = std::move(a);
        return;
      } catch (const ReflectionFormatError& e) {
        last_error = e.what();
      }
    }
    slots[i].reject = QuarantinedRecord{rec.ref, prompt, last_reply,
                                        "annotator reply unusable after retry: " + last_error};
  });

  AnnotationOutcome out;
  for (auto& s : slots) {
    if (s.annotated) out.annotated.push_back(std::move(*s.annotated));
    if (s.reject) out.rejects.push_back(std::move(*s.reject));
  }
  std::stable_sort(out.annotated.begin(), out.annotated.end(),
                   [](const auto& a, const auto& b) { return a.record.ref < b.record.ref; });
  sort_by_ref(out.rejects);
  return out;
}

json to_json(const TrainingExample& e, const std::string& manifest_ref) {
  return {{"context_ref", to_json(e.ref)},
          {"input", e.input},
          {"target", e.target},
          {"manifest_ref", manifest_ref}};
}

ExportResult export_experience_training(const std::vector<TurnContext>& contexts,
                                        const PromptSettings& settings) {
  ExportResult out;
  const auto tmpl = settings.template_for(Stage::Experience);
  for (const auto& ctx : contexts) {
    try {
      if (ctx.gold_response.empty()) throw PipelineError("empty gold response");
      auto in = assemble_stage_input_ex(ctx, tmpl, settings.delimiter, std::nullopt,
                                        settings.char_budget);
      out.examples.push_back({ctx.ref(), std::move(in.text), ctx.gold_response});
    } catch (const Error& e) {
      out.quarantined.push_back({ctx.ref(), "", ctx.gold_response, e.what()});
    }
  }
  sort_by_ref(out.examples);
  sort_by_ref(out.quarantined);
  return out;
}

ExportResult export_reflection_training(const std::vector<AnnotatedRecord>& pairs,
                                        const ContextIndex& contexts,
                                        const PromptSettings& settings,
                                        bool include_consistent) {
  ExportResult out;
  const auto tmpl = settings.template_for(Stage::Reflection);
  for (const auto& pair : pairs) {
    if (!include_consistent && pair.result.consistent()) {
      ++out.dropped_consistent;
      continue;
    }
    const auto& ctx = contexts.at(pair.record.ref);
    std::string input;
    try {
      input = assemble_stage_input_ex(ctx, tmpl, settings.delimiter, std::nullopt,
                                      settings.char_budget)
                  .text;
      out.examples.push_back({ctx.ref(), input, serialize_c(pair.result)});
    } catch (const Error& e) {
      out.quarantined.push_back({ctx.ref(), input, pair.result.response, e.what()});
    }
  }
  sort_by_ref(out.examples);
  sort_by_ref(out.quarantined);
  return out;
}

ExportResult export_correction_training(const std::vector<AnnotatedRecord>& pairs,
                                        const ContextIndex& contexts,
                                        const PromptSettings& settings) {
  ExportResult out;
  const auto tmpl = settings.template_for(Stage::Correction);
  for (const auto& pair : pairs) {
    const auto& ctx = contexts.at(pair.record.ref);
    try {
      if (ctx.gold_response.empty()) throw PipelineError("empty gold response");
      auto in = assemble_stage_input_ex(ctx, tmpl, settings.delimiter, pair.result,
                                        settings.char_budget);
      out.examples.push_back({ctx.ref(), std::move(in.text), ctx.gold_response});
    } catch (const Error& e) {
      out.quarantined.push_back({ctx.ref(), "", ctx.gold_response, e.what()});
    }
  }
  sort_by_ref(out.examples);
  sort_by_ref(out.quarantined);
  return out;
}

std::string_view to_string(FirstPassPolicy p) {
  return p == FirstPassPolicy::Fail ? "fail" : "fallback";
}

FirstPassPolicy first_pass_policy_from_string(std::string_view s) {
  if (s == "fail") return FirstPassPolicy::Fail;
  if (s == "fallback") return FirstPassPolicy::Fallback;
  throw ConfigError("unknown first-pass policy \"" + std::string(s) + "\"");
}

InferenceResult infer_crc(const TurnContext& ctx, Backend& reflector, Backend& corrector,
                          const PromptSettings& settings, FirstPassPolicy policy) {
  InferenceResult out;
  out.ref = ctx.ref();
  out.reflection_input = assemble_stage_input_ex(ctx, settings.template_for(Stage::Reflection),
                                                 settings.delimiter, std::nullopt,
                                                 settings.char_budget)
                             .text;
  out.first_pass_raw = reflector.generate(out.reflection_input).output;

  try {
    auto c = parse_c(out.first_pass_raw);
    out.correction_input =
        assemble_stage_input_ex(ctx, settings.template_for(Stage::Correction),
                                settings.delimiter, c, settings.char_budget)
            .text;
    out.first_pass = std::move(c);
  } catch (const Error& e) {
    if (policy == FirstPassPolicy::Fail) {
      throw InferenceError(to_string(out.ref) + ": unusable first-pass output: " + e.what(),
                           out.ref, out.first_pass_raw);
    }
    out.first_pass.reset();
    out.correction_input.clear();
    out.fallback = true;
    out.final_response = out.first_pass_raw;
    return out;
  }
  out.final_response = corrector.generate(out.correction_input).output;
  return out;
}

std::vector<InferenceResult> run_batch_inference(const std::vector<TurnContext>& contexts,
                                                 Backend& reflector, Backend& corrector,
                                                 const PromptSettings& settings,
                                                 FirstPassPolicy policy, int workers) {
  std::vector<InferenceResult> results(contexts.size());
  std::vector<std::string> failures(contexts.size());
  parallel_for(contexts.size(), workers, [&](std::size_t i) {
    try {
      results[i] = infer_crc(contexts[i], reflector, corrector, settings, policy);
    } catch (const InferenceError& e) {
      failures[i] = e.what();
    } catch (const Error& e) {
      failures[i] = to_string(contexts[i].ref()) + ": " + e.what();
    }
  });
  std::string aggregated;
  std::size_t failed = 0;
  for (const auto& f : failures) {
    if (f.empty()) continue;
    ++failed;
    aggregated += "\n  " + f;
  }
  if (failed > 0) {
    throw PipelineError("inference failed for " + std::to_string(failed) + " of " +
                        std::to_string(contexts.size()) + " contexts:" + aggregated);
  }
  sort_by_ref(results);
  return results;
}

json to_json(const InferenceResult& r, const std::string& manifest_ref) {
  return {{"context_ref", to_json(r.ref)},
          {"first_pass", r.first_pass ? serialize_c(*r.first_pass) : r.first_pass_raw},
          {"final", r.final_response},
          {"fallback", r.fallback},
          {"manifest_ref", manifest_ref}};
}

std::vector<Prediction> load_predictions(const std::string& path) {
  std::vector<Prediction> out;
  for (const auto& row : read_jsonl(path)) {
    try {
      out.push_back({context_ref_from_json(row.at("context_ref")),
                     row.at("final").get<std::string>()});
    } catch (const json::exception& e) {
      throw PipelineError("malformed prediction in " + path + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<json>& rows) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& row : rows) out << row.dump() << '\n';
  if (!out) throw IoError("write failure on " + path);
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw PipelineError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace crc
