#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "crc/clock.hpp"

namespace crc {

enum class BackendKind { Http, Mock };
enum class Decoding { Greedy };
// Chat: one user message holding the prompt. Completion: raw prompt, for
// models fine-tuned on the bare stage formats.
enum class WireFormat { Chat, Completion };

std::string_view to_string(BackendKind k);
std::string_view to_string(WireFormat w);

struct MockEntry {
  std::string matcher;  // literal substring, or "default"
  std::string output;
};

inline constexpr std::string_view kMockDefault = "default";

struct BackendConfig {
  BackendKind kind = BackendKind::Mock;
  std::string endpoint;  // full URL of the completion route, Http only
  std::string model_name = "mock";
  int max_new_tokens = 80;
  Decoding decoding = Decoding::Greedy;
  WireFormat wire = WireFormat::Chat;
  std::chrono::milliseconds timeout{60000};
  int max_retries = 3;
  int requests_per_minute = 0;  // 0 = unlimited
  std::string api_key_env;      // name of the variable holding the credential
  std::vector<MockEntry> script;
};

// Throws ConfigError on an invalid config.
void validate(const BackendConfig& config);

// Digest over the generation-affecting fields only (kind, model, token
// limit, decoding, wire format, mock script). Timeouts and retry policy are
// excluded so tuning them never invalidates cached generations.
std::string fingerprint(const BackendConfig& config);

std::string cache_key(std::string_view prompt, std::string_view backend_fingerprint);

BackendConfig mock_script(std::vector<MockEntry> table);

// First literal match, else the default entry, else a digest-derived echo.
std::string mock_reply(const std::vector<MockEntry>& table, std::string_view prompt);

struct GenerationRecord {
  std::string prompt;
  std::string output;
  std::string backend_fingerprint;
  std::string cache_key;
  std::string timestamp;
  int attempt_count = 0;

  bool operator==(const GenerationRecord&) const = default;
};

nlohmann::json to_json(const GenerationRecord& r);
GenerationRecord generation_record_from_json(const nlohmann::json& j);

// Append-only store of checksummed records, one per line:
//   <sha256 of json>\t<json>\n
// A torn final line (no newline, e.g. after a kill) is discarded on open; any
// other checksum mismatch is reported as corruption.
class GenerationCache {
 public:
  explicit GenerationCache(std::string path);

  std::optional<GenerationRecord> get(const std::string& key) const;
  void put(const GenerationRecord& record);
  // Rewrites the file sorted by key so its bytes do not depend on the order
  // concurrent workers finished in.
  void compact();
  std::size_t size() const;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, GenerationRecord> records_;
};

// Sliding-window limiter: at most `per_minute` acquisitions in any 60 s span.
class RateLimiter {
 public:
  RateLimiter(int per_minute, std::shared_ptr<Clock> clock);
  void acquire();

 private:
  int per_minute_;
  std::shared_ptr<Clock> clock_;
  std::mutex mu_;
  std::deque<Clock::Steady> issued_;
};

struct HttpResponse {
  int status = 0;
  std::string body;
  std::optional<std::chrono::milliseconds> retry_after;
};

// Raised by transports when no HTTP response was obtained at all.
class TransportFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& url, const std::string& body,
                            const std::vector<std::pair<std::string, std::string>>& headers,
                            std::chrono::milliseconds timeout) = 0;
};

std::shared_ptr<HttpTransport> make_default_transport();

std::string build_request_body(const BackendConfig& config, std::string_view prompt);
// Extracts the generated text; throws MalformedResponseError.
std::string parse_response_body(const BackendConfig& config, std::string_view body);

struct BackendStats {
  std::size_t calls = 0;       // prompts that reached the model or mock
  std::size_t cache_hits = 0;
  std::size_t requests = 0;    // HTTP requests including retries
};

// One configured generation service. generate() is safe to call from many
// threads; the limiter and cache are shared by all callers.
class Backend {
 public:
  explicit Backend(BackendConfig config, GenerationCache* cache = nullptr,
                   std::shared_ptr<Clock> clock = nullptr,
                   std::shared_ptr<HttpTransport> transport = nullptr);

  GenerationRecord generate(std::string_view prompt);

  const BackendConfig& config() const { return config_; }
  const std::string& fingerprint() const { return fingerprint_; }
  BackendStats stats() const;

  std::chrono::milliseconds base_backoff{500};
  std::chrono::milliseconds max_backoff{30000};

 private:
  GenerationRecord call_http(std::string_view prompt);

  BackendConfig config_;
  std::string fingerprint_;
  GenerationCache* cache_;
  std::shared_ptr<Clock> clock_;
  std::shared_ptr<HttpTransport> transport_;
  std::unique_ptr<RateLimiter> limiter_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> requests_{0};
};

// Uncached one-shot generation.
GenerationRecord generate(const BackendConfig& config, std::string_view prompt);

}  // namespace crc
