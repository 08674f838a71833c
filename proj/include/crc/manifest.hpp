#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace crc {

// Immutable record binding one command's outputs to the config, corpus,
// template versions and backends that produced them. Artifacts point at it
// through `ref()`.
struct RunManifest {
  std::string command;
  std::string stage;
  std::string config_hash;
  std::string corpus_fingerprint;
  double split_ratio = 0.0;
  std::uint64_t split_seed = 0;
  std::map<std::string, std::string> versions;
  std::string template_style;
  std::string delimiter_name;
  std::string delimiter;
  std::string metrics_policy;
  std::map<std::string, std::string> backends;  // role -> fingerprint
  std::map<std::string, std::uint64_t> counts;
  std::vector<std::string> inputs;  // manifest refs this run consumed
  std::vector<std::string> notes;
  std::string started_at;
  std::string finished_at;

  // Derived from the content above (timestamps and counts excluded), so an
  // identical rerun gets the same id.
  std::string run_id() const;
  std::string ref() const { return command + "-" + run_id(); }

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::string& path);
};

// Writes the manifest once. Sealing a manifest object twice is an error;
// rerunning a command replaces the previous run's file.
class ManifestWriter {
 public:
  explicit ManifestWriter(RunManifest manifest) : manifest_(std::move(manifest)) {}

  RunManifest& manifest() { return manifest_; }
  const RunManifest& manifest() const { return manifest_; }
  void seal(const std::string& path);
  bool sealed() const { return sealed_; }

 private:
  RunManifest manifest_;
  bool sealed_ = false;
};

}  // namespace crc
