#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "crc/backend.hpp"
#include "crc/metrics.hpp"
#include "crc/pipeline.hpp"
#include "crc/promptkit.hpp"

namespace crc::cli {

inline constexpr std::array<std::string_view, 4> kBackendRoles = {"generator", "annotator",
                                                                  "reflector", "corrector"};

struct RunConfig {
  std::string corpus_path;
  std::string eval_corpus_path;  // defaults to corpus_path
  std::string output_dir = "crc-out";
  double split_ratio = 0.75;
  std::uint64_t split_seed = 0;
  TemplateStyle style = TemplateStyle::Bare;
  std::string delimiter = "sep";
  // 4 characters per token of a 512-token input window.
  std::size_t char_budget = 2048;
  std::string registry_path;
  std::map<std::string, BackendConfig> backends;
  TokenizationPolicy metrics;
  FirstPassPolicy first_pass = FirstPassPolicy::Fail;
  bool include_consistent = true;
  int workers = 1;

  // Digest of everything that affects artifact content. Paths, output
  // location and worker count are excluded.
  std::string hash() const;

  const BackendConfig& backend(std::string_view role) const;
  PromptSettings prompt_settings() const;
};

// Parses a YAML run config. Relative paths resolve against the config
// file's directory. Throws ConfigError.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& yaml_text, const std::string& base_dir);

// Checks ratio, delimiter resolution, backend configs and that referenced
// paths exist.
void validate(const RunConfig& config);

}  // namespace crc::cli
