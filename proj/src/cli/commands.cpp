#include "crc/cli/commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>

#include <CLI11.hpp>

#include "crc/cli/config.hpp"
#include "crc/corpus.hpp"
#include "crc/errors.hpp"
#include "crc/hash.hpp"
#include "crc/manifest.hpp"
#include "crc/metrics.hpp"
#include "crc/pipeline.hpp"
#include "crc/utf8.hpp"

namespace crc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  std::string config;
  int workers = 0;
  bool lenient = false;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  bool gold = false;
  std::string method = "CRC";
};

constexpr std::string_view kSplitFile = "split.json";
constexpr std::string_view kGenerationsFile = "experience/generations.jsonl";
constexpr std::string_view kAnnotationsFile = "annotation/annotations.jsonl";
constexpr std::string_view kRejectsFile = "annotation/rejects.jsonl";
constexpr std::string_view kTrainExperience = "train/experience.jsonl";
constexpr std::string_view kTrainReflection = "train/reflection.jsonl";
constexpr std::string_view kTrainCorrection = "train/correction.jsonl";
constexpr std::string_view kTrainQuarantine = "train/quarantine.jsonl";
constexpr std::string_view kPredictionsFile = "inference/predictions.jsonl";
constexpr std::string_view kReportFile = "eval/report.json";
constexpr std::string_view kCacheFile = "cache/generations.log";

std::shared_ptr<Clock> make_clock() {
  // Reproducible-builds convention: pin every recorded timestamp.
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
    try {
      return std::make_shared<PinnedWallClock>(std::stoll(epoch));
    } catch (const std::exception&) {
      throw ConfigError("SOURCE_DATE_EPOCH must be an integer");
    }
  }
  return std::make_shared<SystemClock>();
}

class Session {
 public:
  Session(RunConfig config, std::ostream& out)
      : cfg(std::move(config)),
        prompts(cfg.prompt_settings()),
        corpus_fp(sha256_file(cfg.corpus_path)),
        out_(out),
        clock_(make_clock()),
        started_(format_utc(clock_->wall_now())) {}

  RunConfig cfg;

  std::string path(std::string_view rel) const { return (fs::path(cfg.output_dir) / rel).string(); }
  std::string manifest_path(std::string_view command) const {
    return path("manifests/" + std::string(command) + ".json");
  }

  const std::vector<DialogueExample>& corpus() {
    if (!corpus_) corpus_ = load_corpus(cfg.corpus_path);
    return *corpus_;
  }

  GenerationCache& cache() {
    if (!cache_) cache_ = std::make_unique<GenerationCache>(path(kCacheFile));
    return *cache_;
  }

  std::unique_ptr<Backend> backend(std::string_view role) {
    return std::make_unique<Backend>(cfg.backend(role), &cache(), clock_);
  }

  RunManifest manifest(std::string command, std::string stage) const {
    RunManifest m;
    m.command = std::move(command);
    m.stage = std::move(stage);
    m.config_hash = cfg.hash();
    m.corpus_fingerprint = corpus_fp;
    m.split_ratio = cfg.split_ratio;
    m.split_seed = cfg.split_seed;
    m.versions = {{"corpus_format", std::string(kCorpusFormat)},
                  {"block_format", std::string(kBlockFormatVersion)},
                  {"templates", std::string(kTemplateVersion)},
                  {"reflection_codec", std::string(kReflectionCodecVersion)},
                  {"metrics", std::string(kMetricsVersion)}};
    m.template_style = to_string(cfg.style);
    m.delimiter_name = prompts.delimiter.name;
    m.delimiter = prompts.delimiter.delimiter;
    m.metrics_policy = cfg.metrics.fingerprint();
    return m;
  }

  // Loads the manifest of a prerequisite command, refusing stale ones.
  RunManifest require(std::string_view command, std::string_view hint) const {
    const auto p = manifest_path(command);
    if (!fs::exists(p)) {
      throw PipelineError("missing " + std::string(command) + " artifacts: run " +
                          std::string(hint) + " first");
    }
    auto m = RunManifest::load(p);
    if (m.corpus_fingerprint != corpus_fp) {
      throw PipelineError("artifacts of " + std::string(command) +
                          " were built from a different corpus: run " + std::string(hint) +
                          " again");
    }
    return m;
  }

  void seal(RunManifest m) {
    m.started_at = started_;
    m.finished_at = format_utc(clock_->wall_now());
    if (cache_) cache_->compact();
    ManifestWriter writer(std::move(m));
    writer.seal(manifest_path(writer.manifest().command));
    out_ << "manifest " << writer.manifest().ref() << "\n";
  }

  PromptSettings prompts;
  std::string corpus_fp;

 private:
  std::ostream& out_;
  std::shared_ptr<Clock> clock_;
  std::string started_;
  std::optional<std::vector<DialogueExample>> corpus_;
  std::unique_ptr<GenerationCache> cache_;
};

struct SplitIds {
  std::set<std::string> experience;
  std::set<std::string> reflection;
};

SplitIds read_split(const Session& s) {
  std::ifstream in(s.path(kSplitFile), std::ios::binary);
  if (!in) throw PipelineError("missing split artifacts: run split first");
  const auto j = json::parse(in);
  SplitIds ids;
  for (const auto& id : j.at("experience")) ids.experience.insert(id.get<std::string>());
  for (const auto& id : j.at("reflection")) ids.reflection.insert(id.get<std::string>());
  return ids;
}

std::vector<TurnContext> contexts_of(const std::vector<DialogueExample>& corpus,
                                     const std::set<std::string>& ids) {
  std::vector<TurnContext> out;
  for (const auto& ex : corpus) {
    if (!ids.count(ex.id)) continue;
    auto part = iterate_contexts(ex);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

void print_backend_stats(std::ostream& out, std::string_view role, const Backend& b) {
  const auto st = b.stats();
  out << role << ": " << st.calls << " backend calls, " << st.cache_hits << " cache hits\n";
}

int cmd_ingest(const RunConfig& cfg, const Flags& flags, std::ostream& out, std::ostream& err) {
  LoadOptions opts;
  opts.strict = false;
  const auto corpus = load_corpus(cfg.corpus_path, opts);
  std::size_t system_turns = 0;
  std::size_t triples = 0;
  std::size_t findings = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& ex = corpus[i];
    system_turns += ex.system_turn_count();
    triples += ex.knowledge.size();
    for (const auto& f : validate_example(ex).findings) {
      ++findings;
      err << "dialogue " << (i + 1) << " (id \"" << ex.id << "\"): " << f.message << "\n";
    }
  }
  out << "dialogues: " << corpus.size() << "\n"
      << "system turns: " << system_turns << "\n"
      << "triples: " << triples << "\n"
      << "findings: " << findings << "\n";
  return findings > 0 && !flags.lenient ? kExitDomain : kExitOk;
}

int cmd_split(Session& s, std::ostream& out) {
  const auto split = split_train(s.corpus(), s.cfg.split_ratio, s.cfg.split_seed);
  json ids_e = json::array();
  json ids_r = json::array();
  for (const auto& ex : split.experience) ids_e.push_back(ex.id);
  for (const auto& ex : split.reflection) ids_r.push_back(ex.id);

  auto m = s.manifest("split", "split");
  m.counts = {{"dialogues", s.corpus().size()},
              {"experience", split.experience.size()},
              {"reflection", split.reflection.size()}};
  const json doc = {{"ratio", s.cfg.split_ratio},
                    {"seed", s.cfg.split_seed},
                    {"experience", ids_e},
                    {"reflection", ids_r},
                    {"manifest_ref", m.ref()}};
  fs::create_directories(s.cfg.output_dir);
  std::ofstream f(s.path(kSplitFile), std::ios::binary | std::ios::trunc);
  f << doc.dump(2) << '\n';
  if (!f) throw IoError("cannot write " + s.path(kSplitFile));
  out << "experience: " << split.experience.size() << " dialogues\n"
      << "reflection: " << split.reflection.size() << " dialogues\n";
  s.seal(std::move(m));
  return kExitOk;
}

int cmd_gen_experience(Session& s, std::ostream& out) {
  const auto prior = s.require("split", "split");
  const auto ids = read_split(s);
  const auto contexts = contexts_of(s.corpus(), ids.reflection);
  auto generator = s.backend("generator");
  const auto records = run_experience(contexts, *generator, s.prompts, s.cfg.workers);

  auto m = s.manifest("gen-experience", std::string(to_string(Stage::Experience)));
  m.inputs = {prior.ref()};
  m.backends = {{"generator", generator->fingerprint()}};
  m.counts = {{"contexts", contexts.size()}, {"records", records.size()}};
  std::vector<json> rows;
  for (const auto& r : records) rows.push_back(to_json(r, m.ref()));
  write_jsonl(s.path(kGenerationsFile), rows);
  out << "generated " << records.size() << " responses\n";
  print_backend_stats(out, "generator", *generator);
  s.seal(std::move(m));
  return kExitOk;
}

int cmd_annotate(Session& s, std::ostream& out) {
  const auto prior = s.require("gen-experience", "gen-experience");
  const auto ids = read_split(s);
  const ContextIndex index(contexts_of(s.corpus(), ids.reflection));
  std::vector<StageRecord> records;
  for (const auto& row : read_jsonl(s.path(kGenerationsFile))) {
    records.push_back(stage_record_from_json(row));
  }
  auto annotator = s.backend("annotator");
  const auto outcome = run_annotation(records, index, *annotator, s.cfg.workers);

  auto m = s.manifest("annotate", std::string(to_string(Stage::Reflection)));
  m.inputs = {prior.ref()};
  m.backends = {{"annotator", annotator->fingerprint()}};
  m.counts = {{"records", records.size()},
              {"annotated", outcome.annotated.size()},
              {"rejected", outcome.rejects.size()}};
  std::vector<json> rows;
  for (const auto& a : outcome.annotated) rows.push_back(to_json(a, m.ref()));
  write_jsonl(s.path(kAnnotationsFile), rows);
  rows.clear();
  for (const auto& q : outcome.rejects) rows.push_back(to_json(q, m.ref()));
  write_jsonl(s.path(kRejectsFile), rows);
  out << "annotated " << outcome.annotated.size() << ", quarantined " << outcome.rejects.size()
      << "\n";
  print_backend_stats(out, "annotator", *annotator);
  s.seal(std::move(m));
  return kExitOk;
}

int cmd_export_train(Session& s, std::ostream& out) {
  const auto prior = s.require("annotate", "annotate");
  const auto ids = read_split(s);
  const auto exp_contexts = contexts_of(s.corpus(), ids.experience);
  const ContextIndex refl_index(contexts_of(s.corpus(), ids.reflection));
  std::vector<AnnotatedRecord> pairs;
  for (const auto& row : read_jsonl(s.path(kAnnotationsFile))) {
    pairs.push_back(annotated_record_from_json(row));
  }

  const auto exp = export_experience_training(exp_contexts, s.prompts);
  const auto refl =
      export_reflection_training(pairs, refl_index, s.prompts, s.cfg.include_consistent);
  const auto corr = export_correction_training(pairs, refl_index, s.prompts);

  // Dialogues must never cross from one split into the other's exports.
  for (const auto& e : exp.examples) {
    if (ids.reflection.count(e.ref.example_id)) {
      throw PipelineError("leakage: reflection dialogue " + e.ref.example_id +
                          " in experience export");
    }
  }
  for (const auto* part : {&refl, &corr}) {
    for (const auto& e : part->examples) {
      if (ids.experience.count(e.ref.example_id)) {
        throw PipelineError("leakage: experience dialogue " + e.ref.example_id +
                            " in reflection/correction export");
      }
    }
  }

  auto m = s.manifest("export-train", "training-export");
  m.inputs = {prior.ref()};
  m.notes = {std::string(kCorrectionTargetNote)};
  m.counts = {{"annotated", pairs.size()},
              {"experience", exp.examples.size()},
              {"experience_quarantined", exp.quarantined.size()},
              {"reflection", refl.examples.size()},
              {"reflection_quarantined", refl.quarantined.size()},
              {"reflection_dropped_consistent", refl.dropped_consistent},
              {"correction", corr.examples.size()},
              {"correction_quarantined", corr.quarantined.size()}};
  const auto ref = m.ref();
  const auto write = [&](std::string_view file, const ExportResult& r) {
    std::vector<json> rows;
    for (const auto& e : r.examples) rows.push_back(to_json(e, ref));
    write_jsonl(s.path(file), rows);
  };
  write(kTrainExperience, exp);
  write(kTrainReflection, refl);
  write(kTrainCorrection, corr);
  std::vector<json> quarantine;
  for (const auto& [stage, r] : {std::pair{Stage::Experience, &exp},
                                 std::pair{Stage::Reflection, &refl},
                                 std::pair{Stage::Correction, &corr}}) {
    for (const auto& q : r->quarantined) {
      auto row = to_json(q, ref);
      row["stage"] = to_string(stage);
      quarantine.push_back(std::move(row));
    }
  }
  write_jsonl(s.path(kTrainQuarantine), quarantine);
  out << "experience: " << exp.examples.size() << "\n"
      << "reflection: " << refl.examples.size() << "\n"
      << "correction: " << corr.examples.size() << "\n"
      << "quarantined: " << quarantine.size() << "\n";
  s.seal(std::move(m));
  return kExitOk;
}

std::vector<TurnContext> eval_contexts(const RunConfig& cfg) {
  return iterate_contexts(load_corpus(cfg.eval_corpus_path));
}

int cmd_infer(Session& s, std::ostream& out) {
  const auto contexts = eval_contexts(s.cfg);
  auto reflector = s.backend("reflector");
  auto corrector = s.backend("corrector");
  const auto results = run_batch_inference(contexts, *reflector, *corrector, s.prompts,
                                           s.cfg.first_pass, s.cfg.workers);

  auto m = s.manifest("infer", "inference");
  m.inputs = {"eval-corpus:" + sha256_file(s.cfg.eval_corpus_path)};
  m.backends = {{"reflector", reflector->fingerprint()}, {"corrector", corrector->fingerprint()}};
  std::size_t fallbacks = 0;
  std::vector<json> rows;
  for (const auto& r : results) {
    fallbacks += r.fallback ? 1 : 0;
    rows.push_back(to_json(r, m.ref()));
  }
  m.counts = {{"contexts", contexts.size()}, {"predictions", results.size()},
              {"fallbacks", fallbacks}};
  write_jsonl(s.path(kPredictionsFile), rows);
  out << "predictions: " << results.size() << "\n";
  print_backend_stats(out, "reflector", *reflector);
  print_backend_stats(out, "corrector", *corrector);
  s.seal(std::move(m));
  return kExitOk;
}

int cmd_eval(Session& s, const Flags& flags, std::ostream& out) {
  const auto contexts = eval_contexts(s.cfg);
  std::vector<Prediction> predictions;
  std::vector<std::string> inputs;
  std::string method = flags.method;
  if (flags.gold) {
    for (const auto& c : contexts) predictions.push_back({c.ref(), c.gold_response});
    method = "gold";
    inputs.push_back("gold");
  } else {
    const auto prior = s.require("infer", "infer");
    if (prior.metrics_policy != s.cfg.metrics.fingerprint()) {
      throw MetricError("metrics policy " + s.cfg.metrics.fingerprint() +
                        " differs from the one recorded at inference (" + prior.metrics_policy +
                        ")");
    }
    predictions = load_predictions(s.path(kPredictionsFile));
    inputs.push_back(prior.ref());
  }
  const auto report = evaluate(predictions, contexts, s.cfg.metrics);

  auto m = s.manifest("eval", "evaluation");
  m.inputs = inputs;
  m.counts = {{"scored_contexts", report.scored_contexts},
              {"knowledge_scored", report.knowledge_scored},
              {"goal_dialogues", report.goal_dialogues}};
  auto doc = to_json(report);
  doc["method"] = method;
  doc["manifest_ref"] = m.ref();
  const fs::path report_path = s.path(kReportFile);
  fs::create_directories(report_path.parent_path());
  std::ofstream f(report_path, std::ios::binary | std::ios::trunc);
  f << doc.dump(2) << '\n';
  if (!f) throw IoError("cannot write " + report_path.string());
  out << render_table({{method, report}});
  s.seal(std::move(m));
  return kExitOk;
}

RunConfig resolve_config(const Flags& flags) {
  if (flags.config.empty()) throw ConfigError("--config is required");
  auto cfg = load_run_config(flags.config);
  if (flags.workers > 0) cfg.workers = flags.workers;
  if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
  if (flags.seed) cfg.split_seed = *flags.seed;
  validate(cfg);
  return cfg;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reflect-then-correct dialogue pipeline: data prep, inference and evaluation"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config, "Run configuration (YAML)");
  app.add_option("--workers", flags.workers, "Parallel backend workers")->check(CLI::PositiveNumber);
  app.add_flag("--lenient", flags.lenient, "Report validation findings without failing");
  app.add_option("--output-dir", flags.output_dir, "Override the configured output directory");
  app.add_option("--seed", flags.seed, "Override the split seed");

  auto* ingest = app.add_subcommand("ingest", "Load and validate the corpus");
  auto* split = app.add_subcommand("split", "Partition dialogues into experience/reflection sets");
  auto* gen = app.add_subcommand("gen-experience", "Generate responses for the reflection set");
  auto* annotate = app.add_subcommand("annotate", "Audit generated responses with the annotator");
  auto* export_train = app.add_subcommand("export-train", "Write the three training files");
  auto* infer = app.add_subcommand("infer", "Two-pass reflect-then-correct inference");
  auto* eval = app.add_subcommand("eval", "Score predictions");
  eval->add_flag("--gold", flags.gold, "Score the gold responses themselves");
  eval->add_option("--method", flags.method, "Method label for the results table");
  for (auto* sub : {ingest, split, gen, annotate, export_train, infer, eval}) {
    sub->fallthrough();
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const auto cfg = resolve_config(flags);
    if (ingest->parsed()) return cmd_ingest(cfg, flags, out, err);
    Session session(cfg, out);
    if (split->parsed()) return cmd_split(session, out);
    if (gen->parsed()) return cmd_gen_experience(session, out);
    if (annotate->parsed()) return cmd_annotate(session, out);
    if (export_train->parsed()) return cmd_export_train(session, out);
    if (infer->parsed()) return cmd_infer(session, out);
    if (eval->parsed()) return cmd_eval(session, flags, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const json::exception& e) {
    err << "error: malformed artifact: " << e.what() << "\n";
    return kExitDomain;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}

}  // namespace crc::cli
