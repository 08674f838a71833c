#include "crc/backend.hpp"

#include <algorithm>
#include <cstdlib>

#include "crc/errors.hpp"
#include "crc/hash.hpp"

namespace crc {

using nlohmann::json;

std::string_view to_string(BackendKind k) { return k == BackendKind::Http ? "http" : "mock"; }

std::string_view to_string(WireFormat w) {
  return w == WireFormat::Chat ? "chat" : "completion";
}

void validate(const BackendConfig& config) {
  if (config.max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (config.max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (config.requests_per_minute < 0) {
    throw ConfigError("requests_per_minute must be positive or 0 for unlimited");
  }
  if (config.kind == BackendKind::Http) {
    const auto& url = config.endpoint;
    const auto scheme_end = url.find("://");
    const auto scheme = scheme_end == std::string::npos ? "" : url.substr(0, scheme_end);
    if ((scheme != "http" && scheme != "https") || url.size() <= scheme_end + 3 ||
        url[scheme_end + 3] == '/' || url[scheme_end + 3] == ':') {
      throw ConfigError("http backend needs an http(s) endpoint URL, got \"" + url + "\"");
    }
    if (config.timeout.count() <= 0) throw ConfigError("timeout must be positive");
  } else {
    for (const auto& e : config.script) {
      if (e.matcher.empty()) throw ConfigError("mock script entry with empty matcher");
    }
  }
}

std::string fingerprint(const BackendConfig& config) {
  json j = {{"kind", to_string(config.kind)},
            {"model", config.model_name},
            {"max_new_tokens", config.max_new_tokens},
            {"decoding", "greedy"},
            {"wire", to_string(config.wire)}};
  if (config.kind == BackendKind::Mock) {
    json script = json::array();
    for (const auto& e : config.script) script.push_back({e.matcher, e.output});
    j["script"] = std::move(script);
  }
  return sha256_hex(j.dump());
}

std::string cache_key(std::string_view prompt, std::string_view backend_fingerprint) {
  std::string material(backend_fingerprint);
  material.push_back('\0');
  material.append(prompt);
  return sha256_hex(material);
}

BackendConfig mock_script(std::vector<MockEntry> table) {
  BackendConfig c;
  c.kind = BackendKind::Mock;
  c.model_name = "mock";
  c.script = std::move(table);
  return c;
}

std::string mock_reply(const std::vector<MockEntry>& table, std::string_view prompt) {
  const MockEntry* fallback = nullptr;
  for (const auto& e : table) {
    if (e.matcher == kMockDefault) {
      if (fallback == nullptr) fallback = &e;
    } else if (prompt.find(e.matcher) != std::string_view::npos) {
      return e.output;
    }
  }
  if (fallback != nullptr) return fallback->output;
  return "mock-echo " + sha256_hex(prompt).substr(0, 16);
}

json to_json(const GenerationRecord& r) {
  return {{"prompt", r.prompt},
          {"output", r.output},
          {"backend_fingerprint", r.backend_fingerprint},
          {"cache_key", r.cache_key},
          {"timestamp", r.timestamp},
          {"attempt_count", r.attempt_count}};
}

GenerationRecord generation_record_from_json(const json& j) {
  GenerationRecord r;
  r.prompt = j.at("prompt").get<std::string>();
  r.output = j.at("output").get<std::string>();
  r.backend_fingerprint = j.at("backend_fingerprint").get<std::string>();
  r.cache_key = j.at("cache_key").get<std::string>();
  r.timestamp = j.at("timestamp").get<std::string>();
  r.attempt_count = j.at("attempt_count").get<int>();
  return r;
}

RateLimiter::RateLimiter(int per_minute, std::shared_ptr<Clock> clock)
    : per_minute_(per_minute), clock_(std::move(clock)) {}

void RateLimiter::acquire() {
  if (per_minute_ <= 0) return;
  constexpr auto kWindow = std::chrono::duration_cast<Clock::Steady>(std::chrono::minutes(1));
  while (true) {
    Clock::Steady wait{};
    {
      std::lock_guard lock(mu_);
      const auto now = clock_->steady_now();
      while (!issued_.empty() && now - issued_.front() >= kWindow) issued_.pop_front();
      if (static_cast<int>(issued_.size()) < per_minute_) {
        issued_.push_back(now);
        return;
      }
      wait = issued_.front() + kWindow - now;
    }
    clock_->sleep_for(
        std::max(std::chrono::milliseconds(1),
                 std::chrono::ceil<std::chrono::milliseconds>(wait)));
  }
}

std::string build_request_body(const BackendConfig& config, std::string_view prompt) {
  json body = {{"model", config.model_name},
               {"temperature", 0},
               {"max_tokens", config.max_new_tokens}};
  if (config.wire == WireFormat::Chat) {
    body["messages"] = json::array({{{"role", "user"}, {"content", prompt}}});
  } else {
    body["prompt"] = prompt;
  }
  return body.dump();
}

std::string parse_response_body(const BackendConfig& config, std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw MalformedResponseError(std::string("response is not JSON: ") + e.what(), 1);
  }
  try {
    const auto& choice = j.at("choices").at(0);
    if (config.wire == WireFormat::Chat) {
      return choice.at("message").at("content").get<std::string>();
    }
    return choice.at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw MalformedResponseError(std::string("unexpected response shape: ") + e.what(), 1);
  }
}

Backend::Backend(BackendConfig config, GenerationCache* cache, std::shared_ptr<Clock> clock,
                 std::shared_ptr<HttpTransport> transport)
    : config_(std::move(config)),
      fingerprint_(crc::fingerprint(config_)),
      cache_(cache),
      clock_(clock ? std::move(clock) : std::make_shared<SystemClock>()),
      transport_(std::move(transport)) {
  validate(config_);
  if (config_.kind == BackendKind::Http && !transport_) transport_ = make_default_transport();
  limiter_ = std::make_unique<RateLimiter>(config_.requests_per_minute, clock_);
}

BackendStats Backend::stats() const { return {calls_.load(), hits_.load(), requests_.load()}; }

GenerationRecord Backend::generate(std::string_view prompt) {
  if (prompt.empty()) throw BackendError("generate called with an empty prompt", 0);
  const auto key = cache_key(prompt, fingerprint_);
  if (cache_ != nullptr) {
    if (auto hit = cache_->get(key);
        hit && hit->backend_fingerprint == fingerprint_ && hit->prompt == prompt) {
      ++hits_;
      return *hit;
    }
  }

  ++calls_;
  GenerationRecord rec;
  if (config_.kind == BackendKind::Mock) {
    rec.prompt = std::string(prompt);
    rec.output = mock_reply(config_.script, prompt);
    rec.attempt_count = 1;
  } else {
    rec = call_http(prompt);
  }
  rec.backend_fingerprint = fingerprint_;
  rec.cache_key = key;
  rec.timestamp = format_utc(clock_->wall_now());
  if (cache_ != nullptr) cache_->put(rec);
  return rec;
}

GenerationRecord Backend::call_http(std::string_view prompt) {
  std::vector<std::pair<std::string, std::string>> headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw ConfigError("environment variable " + config_.api_key_env + " is not set");
    }
    headers.emplace_back("Authorization", std::string("Bearer ") + key);
  }
  const auto body = build_request_body(config_, prompt);
  const int total = config_.max_retries + 1;

  std::string last_error;
  int last_status = 0;
  for (int attempt = 1; attempt <= total; ++attempt) {
    limiter_->acquire();
    ++requests_;
    std::optional<std::chrono::milliseconds> retry_after;
    try {
      auto resp = transport_->post(config_.endpoint, body, headers, config_.timeout);
      if (resp.status >= 200 && resp.status < 300) {
        try {
          GenerationRecord rec;
          rec.prompt = std::string(prompt);
          rec.output = parse_response_body(config_, resp.body);
          rec.attempt_count = attempt;
          return rec;
        } catch (const MalformedResponseError& e) {
          throw MalformedResponseError(e.what(), attempt);
        }
      }
      last_status = resp.status;
      last_error = "HTTP " + std::to_string(resp.status);
      const bool transient = resp.status == 429 || resp.status >= 500;
      if (!transient) {
        throw HttpStatusError(last_error + " from " + config_.endpoint + ": " +
                                  resp.body.substr(0, 200),
                              attempt, resp.status);
      }
      retry_after = resp.retry_after;
    } catch (const TransportFailure& e) {
      last_status = 0;
      last_error = e.what();
    }
    if (attempt < total) {
      std::chrono::milliseconds delay(base_backoff.count() * (1LL << std::min(attempt - 1, 20)));
      delay = std::min(delay, max_backoff);
      if (retry_after) delay = std::max(delay, std::min<std::chrono::milliseconds>(*retry_after, max_backoff));
      clock_->sleep_for(delay);
    }
  }

  const auto msg = "backend " + config_.endpoint + " failed after " + std::to_string(total) +
                   " attempts: " + last_error;
  if (last_status == 429) throw RateLimitError(msg, total);
  if (last_status != 0) throw HttpStatusError(msg, total, last_status);
  throw NetworkError(msg, total);
}

GenerationRecord generate(const BackendConfig& config, std::string_view prompt) {
  Backend backend(config);
  return backend.generate(prompt);
}

}  // namespace crc
