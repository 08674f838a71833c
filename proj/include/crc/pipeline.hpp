#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crc/backend.hpp"
#include "crc/corpus.hpp"
#include "crc/errors.hpp"
#include "crc/metrics.hpp"
#include "crc/promptkit.hpp"
#include "crc/reflection.hpp"

namespace crc {

inline constexpr std::string_view kCorrectionTargetNote =
    "correction training targets are the corpus gold responses";

struct PromptSettings {
  TemplateRegistry registry;
  TemplateStyle style = TemplateStyle::Bare;
  DelimiterScheme delimiter = registry_lookup("sep");
  std::size_t char_budget = 0;  // code points; 0 = unlimited

  StageTemplate template_for(Stage stage) const {
    return registry.make_template(stage, style);
  }
};

struct StageRecord {
  ContextRef ref;
  std::string input;
  std::string target;  // training exports
  std::string output;  // generations
  nlohmann::json provenance = nlohmann::json::object();
};

nlohmann::json to_json(const StageRecord& r, const std::string& manifest_ref);
StageRecord stage_record_from_json(const nlohmann::json& j);

class ContextIndex {
 public:
  ContextIndex() = default;
  explicit ContextIndex(const std::vector<TurnContext>& contexts);

  const TurnContext& at(const ContextRef& ref) const;
  bool contains(const ContextRef& ref) const { return index_.count(ref) != 0; }

 private:
  std::map<ContextRef, TurnContext> index_;
};

// Runs fn(0..n-1) on up to `workers` threads. If any call throws, the
// exception of the lowest failing index is rethrown after all work stops.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// Generates r for each context with the experience-stage input. Generations
// go through the backend cache, so an interrupted run resumes where it
// stopped.
std::vector<StageRecord> run_experience(const std::vector<TurnContext>& contexts,
                                        Backend& generator, const PromptSettings& settings,
                                        int workers = 1);

struct AnnotatedRecord {
  StageRecord record;
  ReflectionResult result;
  std::string analysis;
};

struct QuarantinedRecord {
  ContextRef ref;
  std::string input;
  std::string target;
  std::string error;
};

nlohmann::json to_json(const QuarantinedRecord& q, const std::string& manifest_ref);

struct AnnotationOutcome {
  std::vector<AnnotatedRecord> annotated;
  std::vector<QuarantinedRecord> rejects;
};

nlohmann::json to_json(const AnnotatedRecord& a, const std::string& manifest_ref);
AnnotatedRecord annotated_record_from_json(const nlohmann::json& j);

// Asks the annotator to audit each generated response. A reply without a
// usable verdict is retried once with a reminder, then quarantined.
AnnotationOutcome run_annotation(const std::vector<StageRecord>& records,
                                 const ContextIndex& contexts, Backend& annotator,
                                 int workers = 1);

struct TrainingExample {
  ContextRef ref;
  std::string input;
  std::string target;
};

struct ExportResult {
  std::vector<TrainingExample> examples;
  std::vector<QuarantinedRecord> quarantined;
  std::size_t dropped_consistent = 0;
};

nlohmann::json to_json(const TrainingExample& e, const std::string& manifest_ref);

// Experience-stage data: context -> gold response.
ExportResult export_experience_training(const std::vector<TurnContext>& contexts,
                                        const PromptSettings& settings);

// Reflection-stage data: context -> serialized c over the model's own r.
ExportResult export_reflection_training(const std::vector<AnnotatedRecord>& pairs,
                                        const ContextIndex& contexts,
                                        const PromptSettings& settings,
                                        bool include_consistent = true);

// Correction-stage data: context + c -> gold response.
ExportResult export_correction_training(const std::vector<AnnotatedRecord>& pairs,
                                        const ContextIndex& contexts,
                                        const PromptSettings& settings);

enum class FirstPassPolicy { Fail, Fallback };

std::string_view to_string(FirstPassPolicy p);
FirstPassPolicy first_pass_policy_from_string(std::string_view s);

class InferenceError : public PipelineError {
 public:
  InferenceError(const std::string& what, ContextRef ref, std::string raw_output)
      : PipelineError(what), ref_(std::move(ref)), raw_output_(std::move(raw_output)) {}

  const ContextRef& ref() const { return ref_; }
  const std::string& raw_output() const { return raw_output_; }

 private:
  ContextRef ref_;
  std::string raw_output_;
};

struct InferenceResult {
  ContextRef ref;
  std::optional<ReflectionResult> first_pass;
  std::string first_pass_raw;
  std::string final_response;
  bool fallback = false;
  std::string reflection_input;
  std::string correction_input;
};

// Pass 1 asks the reflector for c; pass 2 feeds context + c to the
// corrector, whose raw output is the final response. Both passes always
// run, including when c reports no inconsistency.
InferenceResult infer_crc(const TurnContext& ctx, Backend& reflector, Backend& corrector,
                          const PromptSettings& settings,
                          FirstPassPolicy policy = FirstPassPolicy::Fail);

// Results come back sorted by context ref regardless of worker count.
std::vector<InferenceResult> run_batch_inference(const std::vector<TurnContext>& contexts,
                                                 Backend& reflector, Backend& corrector,
                                                 const PromptSettings& settings,
                                                 FirstPassPolicy policy = FirstPassPolicy::Fail,
                                                 int workers = 1);

nlohmann::json to_json(const InferenceResult& r, const std::string& manifest_ref);

std::vector<Prediction> load_predictions(const std::string& path);

// JSON Lines helpers; objects are written with sorted keys.
void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::string& path);

}  // namespace crc
