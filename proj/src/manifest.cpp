#include "crc/manifest.hpp"

#include <filesystem>
#include <fstream>

#include "crc/errors.hpp"
#include "crc/hash.hpp"

namespace crc {

using nlohmann::json;

namespace {

json identity_json(const RunManifest& m) {
  return {{"command", m.command},
          {"stage", m.stage},
          {"config_hash", m.config_hash},
          {"corpus_fingerprint", m.corpus_fingerprint},
          {"split_ratio", m.split_ratio},
          {"split_seed", m.split_seed},
          {"versions", m.versions},
          {"template_style", m.template_style},
          {"delimiter_name", m.delimiter_name},
          {"delimiter", m.delimiter},
          {"metrics_policy", m.metrics_policy},
          {"backends", m.backends},
          {"inputs", m.inputs}};
}

}  // namespace

std::string RunManifest::run_id() const {
  return sha256_hex(identity_json(*this).dump()).substr(0, 16);
}

json RunManifest::to_json() const {
  json j = identity_json(*this);
  j["run_id"] = run_id();
  j["manifest_ref"] = ref();
  j["counts"] = counts;
  j["notes"] = notes;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.stage = j.at("stage").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.corpus_fingerprint = j.at("corpus_fingerprint").get<std::string>();
    m.split_ratio = j.at("split_ratio").get<double>();
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
    m.versions = j.at("versions").get<std::map<std::string, std::string>>();
    m.template_style = j.at("template_style").get<std::string>();
    m.delimiter_name = j.at("delimiter_name").get<std::string>();
    m.delimiter = j.at("delimiter").get<std::string>();
    m.metrics_policy = j.at("metrics_policy").get<std::string>();
    m.backends = j.at("backends").get<std::map<std::string, std::string>>();
    m.counts = j.at("counts").get<std::map<std::string, std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::vector<std::string>>();
    m.notes = j.at("notes").get<std::vector<std::string>>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    return m;
  } catch (const json::exception& e) {
    throw PipelineError(std::string("malformed manifest: ") + e.what());
  }
}

RunManifest RunManifest::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path);
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw PipelineError("malformed manifest " + path + ": " + e.what());
  }
}

void ManifestWriter::seal(const std::string& path) {
  if (sealed_) throw PipelineError("manifest " + manifest_.ref() + " is already sealed");
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path);
  out << manifest_.to_json().dump(2) << '\n';
  if (!out) throw IoError("write failure on " + path);
  sealed_ = true;
}

}  // namespace crc
