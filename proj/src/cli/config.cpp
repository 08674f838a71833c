#include "crc/cli/config.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "crc/errors.hpp"
#include "crc/hash.hpp"

namespace crc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

void check_keys(const YAML::Node& node, const std::string& where,
                std::initializer_list<std::string_view> allowed) {
  if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown key \"" + key + "\"");
    }
  }
}

// Secrets must come from the environment; anything that looks like one in
// the file is refused.
void reject_credentials(const YAML::Node& node, const std::string& path) {
  static const std::regex kSecretKey(
      "^(api[_-]?key|(access|auth|bearer)[_-]?token|token|(client[_-]?)?secret|password|authorization)$",
                                     std::regex::icase);
  static const std::regex kSecretValue(
      R"(^(sk-[A-Za-z0-9_\-]{16,}|Bearer\s+\S+|ghp_[A-Za-z0-9]{20,}|xox[abp]-\S+|AKIA[0-9A-Z]{16})$)");
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      const auto child = path.empty() ? key : path + "." + key;
      if (kv.second.IsScalar() && key != "api_key_env" && std::regex_search(key, kSecretKey) &&
          !kv.second.as<std::string>().empty()) {
        throw ConfigError("config holds a credential-like value at " + child +
                          "; pass secrets through environment variables (api_key_env)");
      }
      reject_credentials(kv.second, child);
    }
  } else if (node.IsSequence()) {
    for (std::size_t i = 0; i < node.size(); ++i) {
      reject_credentials(node[i], path + "[" + std::to_string(i) + "]");
    }
  } else if (node.IsScalar()) {
    if (std::regex_search(node.as<std::string>(), kSecretValue)) {
      throw ConfigError("config holds a credential-like value at " + path +
                        "; pass secrets through environment variables (api_key_env)");
    }
  }
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& where) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where + ": invalid value \"" + (node.IsScalar() ? node.Scalar() : "") + "\"");
  }
}

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  if (path.is_absolute() || base.empty()) return path.lexically_normal().string();
  return (fs::path(base) / path).lexically_normal().string();
}

BackendConfig parse_backend(const YAML::Node& node, const std::string& where) {
  check_keys(node, where,
             {"kind", "endpoint", "model", "max_new_tokens", "decoding", "wire", "timeout_ms",
              "max_retries", "requests_per_minute", "api_key_env", "script"});
  BackendConfig b;
  const auto kind = lower(scalar<std::string>(node["kind"], where + ".kind"));
  if (kind == "http") {
    b.kind = BackendKind::Http;
  } else if (kind == "mock") {
    b.kind = BackendKind::Mock;
  } else {
    throw ConfigError(where + ".kind: expected http or mock");
  }
  if (node["endpoint"]) b.endpoint = scalar<std::string>(node["endpoint"], where + ".endpoint");
  if (node["model"]) b.model_name = scalar<std::string>(node["model"], where + ".model");
  if (node["max_new_tokens"]) {
    b.max_new_tokens = scalar<int>(node["max_new_tokens"], where + ".max_new_tokens");
  }
  if (node["decoding"] && lower(scalar<std::string>(node["decoding"], where + ".decoding")) != "greedy") {
    throw ConfigError(where + ".decoding: only greedy decoding is supported");
  }
  if (node["wire"]) {
    const auto wire = lower(scalar<std::string>(node["wire"], where + ".wire"));
    if (wire == "chat") {
      b.wire = WireFormat::Chat;
    } else if (wire == "completion") {
      b.wire = WireFormat::Completion;
    } else {
      throw ConfigError(where + ".wire: expected chat or completion");
    }
  }
  if (node["timeout_ms"]) {
    b.timeout = std::chrono::milliseconds(scalar<long>(node["timeout_ms"], where + ".timeout_ms"));
  }
  if (node["max_retries"]) b.max_retries = scalar<int>(node["max_retries"], where + ".max_retries");
  if (node["requests_per_minute"]) {
    b.requests_per_minute = scalar<int>(node["requests_per_minute"], where + ".requests_per_minute");
  }
  if (node["api_key_env"]) b.api_key_env = scalar<std::string>(node["api_key_env"], where + ".api_key_env");
  if (auto script = node["script"]) {
    if (!script.IsSequence()) throw ConfigError(where + ".script: expected a list");
    for (std::size_t i = 0; i < script.size(); ++i) {
      const auto entry_where = where + ".script[" + std::to_string(i) + "]";
      check_keys(script[i], entry_where, {"match", "output"});
      b.script.push_back({scalar<std::string>(script[i]["match"], entry_where + ".match"),
                          scalar<std::string>(script[i]["output"], entry_where + ".output")});
    }
  }
  try {
    crc::validate(b);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return b;
}

}  // namespace

std::string RunConfig::hash() const {
  json backends_json = json::object();
  for (const auto& [role, b] : backends) {
    backends_json[role] = {{"fingerprint", fingerprint(b)}, {"endpoint", b.endpoint}};
  }
  std::string registry_digest;
  if (!registry_path.empty()) registry_digest = sha256_file(registry_path);
  const json j = {{"split", {{"ratio", split_ratio}, {"seed", split_seed}}},
                  {"templates",
                   {{"style", to_string(style)},
                    {"delimiter", delimiter},
                    {"char_budget", char_budget},
                    {"registry", registry_digest}}},
                  {"backends", backends_json},
                  {"metrics", metrics.fingerprint()},
                  {"first_pass", to_string(first_pass)},
                  {"include_consistent", include_consistent}};
  return sha256_hex(j.dump()).substr(0, 16);
}

const BackendConfig& RunConfig::backend(std::string_view role) const {
  auto it = backends.find(std::string(role));
  if (it == backends.end()) {
    throw ConfigError("no backend configured for role \"" + std::string(role) + "\"");
  }
  return it->second;
}

PromptSettings RunConfig::prompt_settings() const {
  PromptSettings s;
  if (!registry_path.empty()) s.registry = TemplateRegistry::from_file(registry_path);
  s.style = style;
  s.delimiter = s.registry.lookup(delimiter);
  s.char_budget = char_budget;
  return s;
}

RunConfig parse_run_config(const std::string& yaml_text, const std::string& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!root.IsMap()) throw ConfigError("config must be a mapping");
  reject_credentials(root, "");
  check_keys(root, "config",
             {"corpus", "eval_corpus", "output_dir", "split", "templates", "backends", "metrics",
              "inference", "export", "workers"});

  RunConfig c;
  if (!root["corpus"]) throw ConfigError("config: missing \"corpus\"");
  c.corpus_path = resolve(base_dir, scalar<std::string>(root["corpus"], "corpus"));
  c.eval_corpus_path = root["eval_corpus"]
                           ? resolve(base_dir, scalar<std::string>(root["eval_corpus"], "eval_corpus"))
                           : c.corpus_path;
  if (root["output_dir"]) {
    c.output_dir = resolve(base_dir, scalar<std::string>(root["output_dir"], "output_dir"));
  } else {
    c.output_dir = resolve(base_dir, c.output_dir);
  }
  if (auto split = root["split"]) {
    check_keys(split, "split", {"ratio", "seed"});
    if (split["ratio"]) c.split_ratio = scalar<double>(split["ratio"], "split.ratio");
    if (split["seed"]) c.split_seed = scalar<std::uint64_t>(split["seed"], "split.seed");
  }
  if (auto t = root["templates"]) {
    check_keys(t, "templates", {"style", "delimiter", "char_budget", "registry"});
    try {
      if (t["style"]) c.style = style_from_string(scalar<std::string>(t["style"], "templates.style"));
    } catch (const PromptError& e) {
      throw ConfigError(std::string("templates.style: ") + e.what());
    }
    if (t["delimiter"]) c.delimiter = scalar<std::string>(t["delimiter"], "templates.delimiter");
    if (t["char_budget"]) c.char_budget = scalar<std::size_t>(t["char_budget"], "templates.char_budget");
    if (t["registry"]) c.registry_path = resolve(base_dir, scalar<std::string>(t["registry"], "templates.registry"));
  }
  if (auto b = root["backends"]) {
    if (!b.IsMap()) throw ConfigError("backends: expected a mapping");
    for (const auto& kv : b) {
      const auto role = kv.first.as<std::string>();
      if (std::find(kBackendRoles.begin(), kBackendRoles.end(), role) == kBackendRoles.end()) {
        throw ConfigError("backends: unknown role \"" + role + "\"");
      }
      c.backends.emplace(role, parse_backend(kv.second, "backends." + role));
    }
  }
  if (auto m = root["metrics"]) {
    check_keys(m, "metrics", {"mode", "lowercase", "strip_punct"});
    try {
      if (m["mode"]) c.metrics.mode = token_mode_from_string(scalar<std::string>(m["mode"], "metrics.mode"));
    } catch (const MetricError& e) {
      throw ConfigError(std::string("metrics.mode: ") + e.what());
    }
    if (m["lowercase"]) c.metrics.lowercase = scalar<bool>(m["lowercase"], "metrics.lowercase");
    if (m["strip_punct"]) c.metrics.strip_punct = scalar<bool>(m["strip_punct"], "metrics.strip_punct");
  }
  if (auto inf = root["inference"]) {
    check_keys(inf, "inference", {"first_pass_policy"});
    if (inf["first_pass_policy"]) {
      c.first_pass = first_pass_policy_from_string(
          lower(scalar<std::string>(inf["first_pass_policy"], "inference.first_pass_policy")));
    }
  }
  if (auto ex = root["export"]) {
    check_keys(ex, "export", {"include_consistent"});
    if (ex["include_consistent"]) {
      c.include_consistent = scalar<bool>(ex["include_consistent"], "export.include_consistent");
    }
  }
  if (root["workers"]) c.workers = scalar<int>(root["workers"], "workers");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), fs::path(path).parent_path().string());
}

void validate(const RunConfig& c) {
  if (!(c.split_ratio > 0.0 && c.split_ratio < 1.0)) {
    throw ConfigError("split.ratio must lie in (0, 1)");
  }
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (!fs::exists(c.corpus_path)) throw ConfigError("corpus not found: " + c.corpus_path);
  if (!fs::exists(c.eval_corpus_path)) {
    throw ConfigError("eval corpus not found: " + c.eval_corpus_path);
  }
  if (!c.registry_path.empty() && !fs::exists(c.registry_path)) {
    throw ConfigError("template registry not found: " + c.registry_path);
  }
  try {
    (void)c.prompt_settings();
  } catch (const PromptError& e) {
    throw ConfigError(std::string("templates: ") + e.what());
  }
}

}  // namespace crc::cli
