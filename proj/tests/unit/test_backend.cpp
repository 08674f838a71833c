#include <doctest.h>

#include <cstdlib>
#include <deque>
#include <thread>

#include <httplib.h>

#include "crc/backend.hpp"
#include "crc/clock.hpp"
#include "crc/errors.hpp"
#include "crc/hash.hpp"
#include "support/support.hpp"

using namespace crc;
using namespace std::chrono_literals;
using crc::testing::ScratchDir;

namespace {

// Replays canned responses and records what was sent.
class ScriptedTransport : public HttpTransport {
 public:
  struct Step {
    int status = 200;
    std::string body;
    std::optional<std::chrono::milliseconds> retry_after;
    bool fail = false;
  };

  explicit ScriptedTransport(std::vector<Step> steps) : steps_(steps.begin(), steps.end()) {}

  HttpResponse post(const std::string& url, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>& headers,
                    std::chrono::milliseconds) override {
    urls.push_back(url);
    bodies.push_back(body);
    last_headers = headers;
    if (steps_.empty()) throw TransportFailure("script exhausted");
    auto step = steps_.front();
    if (steps_.size() > 1) steps_.pop_front();
    if (step.fail) throw TransportFailure("connection refused");
    return {step.status, step.body, step.retry_after};
  }

  std::vector<std::string> urls;
  std::vector<std::string> bodies;
  std::vector<std::pair<std::string, std::string>> last_headers;

 private:
  std::deque<Step> steps_;
};

std::string chat_reply(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

BackendConfig http_config() {
  BackendConfig c;
  c.kind = BackendKind::Http;
  c.endpoint = "http://127.0.0.1:9/v1/chat/completions";
  c.model_name = "test-model";
  c.max_retries = 3;
  return c;
}

}  // namespace

TEST_SUITE("backend") {

TEST_CASE("mock scripts") {
  const auto cfg = mock_script({{"stage2_R", "Ok.###NONE:###none"}, {"stage", "second"}});
  CHECK(generate(cfg, "x###stage2_R").output == "Ok.###NONE:###none");
  CHECK(generate(cfg, "stage3").output == "second");

  const auto echo = mock_script({});
  const auto a = generate(echo, "prompt p");
  CHECK(a.output == "mock-echo " + sha256_hex("prompt p").substr(0, 16));
  CHECK(generate(echo, "prompt p").output == a.output);
  CHECK(a.cache_key == generate(echo, "prompt p").cache_key);
  CHECK(generate(echo, "prompt q").cache_key != a.cache_key);

  const auto with_default = mock_script({{"default", "fallback"}, {"hit", "specific"}});
  CHECK(generate(with_default, "a hit").output == "specific");
  CHECK(generate(with_default, "miss").output == "fallback");
}

TEST_CASE("fingerprint covers generation parameters only") {
  auto a = http_config();
  auto b = a;
  b.endpoint = "http://other/v1";
  b.timeout = 5s;
  b.max_retries = 9;
  b.requests_per_minute = 10;
  CHECK(fingerprint(a) == fingerprint(b));
  b.max_new_tokens = 81;
  CHECK(fingerprint(a) != fingerprint(b));
  auto c = a;
  c.model_name = "other";
  CHECK(fingerprint(a) != fingerprint(c));
  CHECK(cache_key("p", fingerprint(a)) != cache_key("p", fingerprint(c)));
}

TEST_CASE("config validation") {
  BackendConfig c = http_config();
  c.endpoint = "not a url";
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = http_config();
  c.max_new_tokens = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_NOTHROW(validate(http_config()));
}

TEST_CASE("cache persistence") {
  ScratchDir dir("cache");
  const auto path = dir.str("c/gen.log");
  GenerationRecord rec{"prompt", "  output with spaces \n", "fp", "key1", "2024-01-01T00:00:00Z", 2};
  {
    GenerationCache cache(path);
    CHECK_FALSE(cache.get("key1").has_value());
    cache.put(rec);
    CHECK(cache.get("key1") == rec);
  }
  GenerationCache reopened(path);
  CHECK(reopened.get("key1") == rec);
  CHECK(reopened.size() == 1);
}

TEST_CASE("cache corruption and torn writes") {
  ScratchDir dir("cache");
  const auto path = dir.str("gen.log");
  {
    GenerationCache cache(path);
    cache.put({"p1", "o1", "fp", "k1", "t", 1});
    cache.put({"p2", "o2", "fp", "k2", "t", 1});
  }
  const auto good = crc::testing::read_file(path);

  crc::testing::write_file(path, good + "abc\t{\"partial");
  {
    GenerationCache cache(path);
    CHECK(cache.size() == 2);
  }
  CHECK(crc::testing::read_file(path) == good);

  auto tampered = good;
  tampered.replace(tampered.find("o1"), 2, "XX");
  crc::testing::write_file(path, tampered);
  CHECK_THROWS_AS(GenerationCache{path}, CacheError);
}

TEST_CASE("cache compaction is order independent") {
  ScratchDir dir("cache");
  GenerationCache a(dir.str("a.log"));
  GenerationCache b(dir.str("b.log"));
  const GenerationRecord r1{"p1", "o1", "fp", "k1", "t", 1};
  const GenerationRecord r2{"p2", "o2", "fp", "k2", "t", 1};
  a.put(r2);
  a.put(r1);
  b.put(r1);
  b.put(r2);
  a.compact();
  b.compact();
  CHECK(crc::testing::read_file(dir.str("a.log")) == crc::testing::read_file(dir.str("b.log")));
}

TEST_CASE("backend serves cache hits without calling out") {
  ScratchDir dir("cache");
  GenerationCache cache(dir.str("gen.log"));
  auto transport = std::make_shared<ScriptedTransport>(
      std::vector<ScriptedTransport::Step>{{200, chat_reply("hello"), std::nullopt, false}});
  auto clock = std::make_shared<VirtualClock>(1700000000);
  Backend backend(http_config(), &cache, clock, transport);
  const auto first = backend.generate("p");
  const auto second = backend.generate("p");
  CHECK(first == second);
  CHECK(transport->bodies.size() == 1);
  CHECK(backend.stats().cache_hits == 1);

  // A config with a different fingerprint must not see the entry.
  auto other_cfg = http_config();
  other_cfg.max_new_tokens = 40;
  Backend other(other_cfg, &cache, clock, transport);
  other.generate("p");
  CHECK(transport->bodies.size() == 2);
}

TEST_CASE("request body and output fidelity") {
  auto transport = std::make_shared<ScriptedTransport>(
      std::vector<ScriptedTransport::Step>{{200, chat_reply("  spaced out \n"), std::nullopt, false}});
  Backend backend(http_config(), nullptr, std::make_shared<VirtualClock>(), transport);
  const auto rec = backend.generate("hello");
  CHECK(rec.output == "  spaced out \n");
  CHECK(rec.attempt_count == 1);
  const auto body = nlohmann::json::parse(transport->bodies.at(0));
  CHECK(body["temperature"] == 0);
  CHECK(body["max_tokens"] == 80);
  CHECK(body["model"] == "test-model");
  CHECK(body["messages"][0]["content"] == "hello");

  auto completion = http_config();
  completion.wire = WireFormat::Completion;
  const auto cbody = nlohmann::json::parse(build_request_body(completion, "p"));
  CHECK(cbody["prompt"] == "p");
  CHECK(parse_response_body(completion, R"({"choices":[{"text":"t"}]})") == "t");
  CHECK_THROWS_AS(parse_response_body(completion, R"({"choices":[]})"), MalformedResponseError);
  CHECK_THROWS_AS(parse_response_body(completion, "<html>"), MalformedResponseError);
}

TEST_CASE("retries with backoff then succeed") {
  auto transport = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{
      {0, "", std::nullopt, true},
      {503, "busy", std::nullopt, false},
      {429, "slow down", 7000ms, false},
      {200, chat_reply("ok"), std::nullopt, false}});
  auto clock = std::make_shared<VirtualClock>();
  Backend backend(http_config(), nullptr, clock, transport);
  const auto rec = backend.generate("p");
  CHECK(rec.output == "ok");
  CHECK(rec.attempt_count == 4);
  // 500 + 1000 + max(2000, Retry-After 7000)
  CHECK(clock->slept() == 8500ms);
}

TEST_CASE("retry exhaustion maps to typed errors") {
  auto clock = std::make_shared<VirtualClock>();
  SUBCASE("network") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{{0, "", std::nullopt, true}});
    Backend b(http_config(), nullptr, clock, t);
    try {
      b.generate("p");
      FAIL("expected NetworkError");
    } catch (const NetworkError& e) {
      CHECK(e.attempts() == 4);
    }
  }
  SUBCASE("rate limited") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{{429, "", std::nullopt, false}});
    Backend b(http_config(), nullptr, clock, t);
    CHECK_THROWS_AS(b.generate("p"), RateLimitError);
  }
  SUBCASE("client errors are not retried") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{{401, "denied", std::nullopt, false}});
    Backend b(http_config(), nullptr, clock, t);
    try {
      b.generate("p");
      FAIL("expected HttpStatusError");
    } catch (const HttpStatusError& e) {
      CHECK(e.status() == 401);
      CHECK(e.attempts() == 1);
    }
    CHECK(t->bodies.size() == 1);
  }
  SUBCASE("malformed body") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{{200, "{}", std::nullopt, false}});
    Backend b(http_config(), nullptr, clock, t);
    CHECK_THROWS_AS(b.generate("p"), MalformedResponseError);
  }
}

TEST_CASE("unreachable endpoint exhausts attempts over the real transport") {
  auto cfg = http_config();
  cfg.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  cfg.timeout = 500ms;
  cfg.max_retries = 2;
  Backend b(cfg, nullptr, std::make_shared<VirtualClock>());
  try {
    b.generate("p");
    FAIL("expected NetworkError");
  } catch (const NetworkError& e) {
    CHECK(e.attempts() == cfg.max_retries + 1);
  }
}

TEST_CASE("credentials come from the environment") {
  auto cfg = http_config();
  cfg.api_key_env = "CRC_TEST_KEY_FOR_UNIT";
  auto t = std::make_shared<ScriptedTransport>(std::vector<ScriptedTransport::Step>{{200, chat_reply("x"), std::nullopt, false}});
  ::unsetenv("CRC_TEST_KEY_FOR_UNIT");
  Backend missing(cfg, nullptr, std::make_shared<VirtualClock>(), t);
  CHECK_THROWS_AS(missing.generate("p"), ConfigError);
  ::setenv("CRC_TEST_KEY_FOR_UNIT", "secret-value", 1);
  Backend b(cfg, nullptr, std::make_shared<VirtualClock>(), t);
  b.generate("p");
  REQUIRE(t->last_headers.size() == 1);
  CHECK(t->last_headers[0].second == "Bearer secret-value");
  ::unsetenv("CRC_TEST_KEY_FOR_UNIT");
}

TEST_CASE("rate limiter: at most N requests in any 60 s window") {
  auto clock = std::make_shared<VirtualClock>();
  RateLimiter limiter(5, clock);
  std::vector<std::chrono::milliseconds> issued;
  for (int i = 0; i < 23; ++i) {
    limiter.acquire();
    issued.push_back(std::chrono::duration_cast<std::chrono::milliseconds>(clock->steady_now()));
    clock->advance(std::chrono::milliseconds(1000 + 3000 * (i % 3)));
  }
  for (std::size_t i = 0; i < issued.size(); ++i) {
    std::size_t in_window = 0;
    for (std::size_t j = i; j < issued.size() && issued[j] - issued[i] < 60s; ++j) ++in_window;
    CHECK(in_window <= 5);
  }
  CHECK(issued.back() > 200s);
}

TEST_CASE("local chat-completion server round trip") {
  httplib::Server server;
  std::string seen_auth;
  nlohmann::json seen_body;
  int hits = 0;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    if (hits == 1) {
      res.status = 429;
      res.set_header("Retry-After", "1");
      return;
    }
    seen_auth = req.get_header_value("Authorization");
    seen_body = nlohmann::json::parse(req.body);
    res.set_content(chat_reply("served: " + seen_body["messages"][0]["content"].get<std::string>()),
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto cfg = http_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.api_key_env = "CRC_TEST_LOCAL_KEY";
  ::setenv("CRC_TEST_LOCAL_KEY", "k123", 1);
  auto clock = std::make_shared<VirtualClock>();
  Backend b(cfg, nullptr, clock);
  const auto rec = b.generate("ping");
  server.stop();
  th.join();
  ::unsetenv("CRC_TEST_LOCAL_KEY");

  CHECK(rec.output == "served: ping");
  CHECK(rec.attempt_count == 2);
  CHECK(clock->slept() == 1000ms);
  CHECK(seen_auth == "Bearer k123");
  CHECK(seen_body["max_tokens"] == 80);
}

}  // TEST_SUITE
