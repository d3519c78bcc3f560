#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "srr/errors.hpp"

namespace srr {

struct ChatMessage {
  std::string role;  // system | user | assistant | tool
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.7;
  int max_tokens = 4096;
  int n_samples = 1;
};

struct TokenUsage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
};

struct ChatResponse {
  std::vector<std::string> completions;
  TokenUsage usage;
  std::chrono::milliseconds latency{0};
};

struct EndpointConfig {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model_id;
  std::string api_key_env;  // name of env var holding the key; empty = no auth
  int max_retries = 2;
  int timeout_ms = 30000;
  double rps_limit = 0.0;  // 0 = unlimited
  double temperature = 0.7;
  int max_tokens = 4096;
};

struct WireResult {
  int status = 0;
  std::string body;
};

// One HTTP(S)-shaped exchange with a chat-completion provider. nullopt means
// the transport itself failed (connect/timeout); those are the only failures
// the gateway retries.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::optional<WireResult> post(const std::string& body) = 0;
};

class LambdaTransport : public Transport {
 public:
  using Fn = std::function<std::optional<WireResult>(const std::string&)>;
  explicit LambdaTransport(Fn fn) : fn_(std::move(fn)) {}
  std::optional<WireResult> post(const std::string& body) override { return fn_(body); }

 private:
  Fn fn_;
};

// Deterministic canned completions for tests and offline pipeline runs.
// Ordered mode hands out entries in sequence; keyed mode matches substrings
// of the flattened prompt, with an optional fallback.
struct MockScript {
  std::vector<std::string> ordered;
  struct Rule {
    std::string contains;
    std::string completion;
  };
  std::vector<Rule> keyed;
  std::optional<std::string> fallback;
  bool honor_n = true;  // false simulates providers that ignore `n`

  static MockScript sequence(std::vector<std::string> completions) {
    MockScript s;
    s.ordered = std::move(completions);
    return s;
  }
  static MockScript constant(std::string completion) {
    MockScript s;
    s.fallback = std::move(completion);
    return s;
  }
};

class ScriptedTransport : public Transport {
 public:
  explicit ScriptedTransport(MockScript script) : script_(std::move(script)) {}

  std::optional<WireResult> post(const std::string& body) override {
    std::lock_guard<std::mutex> lock(mutex_);
    nlohmann::json req = nlohmann::json::parse(body);
    int n = req.value("n", 1);
    if (!script_.honor_n) n = 1;
    std::string prompt;
    for (const auto& m : req["messages"]) prompt += m["content"].get<std::string>();

    std::vector<std::string> choices;
    for (int i = 0; i < n; ++i) choices.push_back(next_completion(prompt));

    nlohmann::json resp;
    resp["choices"] = nlohmann::json::array();
    for (const auto& c : choices)
      resp["choices"].push_back({{"message", {{"content", c}}}});
    std::int64_t completion_len = 0;
    for (const auto& c : choices) completion_len += static_cast<std::int64_t>(c.size());
    resp["usage"] = {{"prompt_tokens", static_cast<std::int64_t>(prompt.size()) / 4},
                     {"completion_tokens", completion_len / 4}};
    return WireResult{200, resp.dump()};
  }

  size_t calls() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_served_;
  }

 private:
  std::string next_completion(const std::string& prompt) {
    ++calls_served_;
    if (!script_.keyed.empty() || script_.fallback) {
      for (const auto& rule : script_.keyed)
        if (prompt.find(rule.contains) != std::string::npos) return rule.completion;
      if (script_.fallback) return *script_.fallback;
      throw ScriptExhausted("no keyed completion matches the prompt");
    }
    if (cursor_ >= script_.ordered.size())
      throw ScriptExhausted("ordered mock script exhausted after " +
                            std::to_string(script_.ordered.size()) + " completions");
    return script_.ordered[cursor_++];
  }

  MockScript script_;
  size_t cursor_ = 0;
  size_t calls_served_ = 0;
  mutable std::mutex mutex_;
};

// Token-bucket rate limiter shared by all concurrent users of an endpoint.
// The clock is injectable so tests can drive it deterministically.
class TokenBucket {
 public:
  using Clock = std::function<double()>;  // seconds, monotonic

  explicit TokenBucket(double rps, double burst = 1.0, Clock clock = default_clock())
      : rps_(rps), capacity_(burst < 1.0 ? 1.0 : burst), clock_(std::move(clock)) {
    tokens_ = capacity_;
    last_ = clock_();
  }

  // Blocks until a token is available. Unlimited when rps <= 0.
  void acquire() {
    if (rps_ <= 0.0) return;
    for (;;) {
      double wait_s = 0.0;
      {
        std::lock_guard<std::mutex> lock(mutex_);
        refill();
        if (tokens_ >= 1.0) {
          tokens_ -= 1.0;
          return;
        }
        wait_s = (1.0 - tokens_) / rps_;
      }
      std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
    }
  }

  // Non-blocking variant for tests.
  bool try_acquire() {
    if (rps_ <= 0.0) return true;
    std::lock_guard<std::mutex> lock(mutex_);
    refill();
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return true;
    }
    return false;
  }

  static Clock default_clock() {
    return [] {
      return std::chrono::duration<double>(
                 std::chrono::steady_clock::now().time_since_epoch())
          .count();
    };
  }

 private:
  void refill() {
    double now = clock_();
    if (now > last_) {
      tokens_ = std::min(capacity_, tokens_ + (now - last_) * rps_);
      last_ = now;
    }
  }

  double rps_;
  double capacity_;
  double tokens_;
  double last_;
  Clock clock_;
  std::mutex mutex_;
};

// A callable chat endpoint: config plus the transport that serves it. Copies
// share the transport, limiter, and script state.
struct Endpoint {
  EndpointConfig config;
  std::shared_ptr<Transport> transport;
  std::shared_ptr<TokenBucket> limiter;
  std::function<void(std::chrono::milliseconds)> sleeper =
      [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };

  bool valid() const { return transport != nullptr; }
};

inline Endpoint make_mock_endpoint(MockScript script, std::string model_id = "scripted-mock") {
  if (script.ordered.empty() && script.keyed.empty() && !script.fallback)
    throw std::invalid_argument("mock script must not be empty");
  Endpoint ep;
  ep.config.model_id = std::move(model_id);
  ep.config.base_url = "mock://script";
  ep.transport = std::make_shared<ScriptedTransport>(std::move(script));
  return ep;
}

namespace detail {

inline WireResult post_with_retries(const Endpoint& ep, const std::string& body) {
  int attempts = 0;
  for (;;) {
    ++attempts;
    if (ep.limiter) ep.limiter->acquire();
    std::optional<WireResult> wire = ep.transport->post(body);
    if (wire) return *wire;
    if (attempts > ep.config.max_retries)
      throw TransportError("transport failed after " + std::to_string(attempts) +
                           " attempts to " + ep.config.base_url);
    ep.sleeper(std::chrono::milliseconds(100LL << (attempts - 1)));
  }
}

inline void append_completions(const WireResult& wire, int want, ChatResponse& out) {
  nlohmann::json resp;
  try {
    resp = nlohmann::json::parse(wire.body);
  } catch (const nlohmann::json::exception& e) {
    throw ProviderError(wire.status, wire.body,
                        std::string("provider returned unparseable body: ") + e.what());
  }
  if (!resp.contains("choices") || !resp["choices"].is_array())
    throw ProviderError(wire.status, wire.body, "provider response has no choices array");
  int taken = 0;
  for (const auto& choice : resp["choices"]) {
    if (taken >= want) break;
    if (!choice.contains("message") || !choice["message"].contains("content"))
      throw ProviderError(wire.status, wire.body, "choice has no message.content");
    out.completions.push_back(choice["message"]["content"].get<std::string>());
    ++taken;
  }
  if (resp.contains("usage") && resp["usage"].is_object()) {
    out.usage.prompt_tokens += resp["usage"].value("prompt_tokens", 0LL);
    out.usage.completion_tokens += resp["usage"].value("completion_tokens", 0LL);
  }
  if (taken == 0)
    throw EmptyCompletion("provider returned zero choices");
}

}  // namespace detail

// Requests `n_samples` completions, topping up with sequential requests when
// the provider returns fewer choices than asked.
inline ChatResponse complete(const Endpoint& ep, const ChatRequest& req) {
  if (!ep.valid()) throw std::invalid_argument("endpoint has no transport");
  if (req.messages.empty()) throw std::invalid_argument("chat request has no messages");
  if (req.n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  if (req.temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  if (req.max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");

  auto start = std::chrono::steady_clock::now();
  ChatResponse out;
  while (static_cast<int>(out.completions.size()) < req.n_samples) {
    int remaining = req.n_samples - static_cast<int>(out.completions.size());
    nlohmann::json body;
    body["model"] = req.model_id.empty() ? ep.config.model_id : req.model_id;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : req.messages)
      body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    body["temperature"] = req.temperature;
    body["max_tokens"] = req.max_tokens;
    body["n"] = remaining;

    WireResult wire = detail::post_with_retries(ep, body.dump());
    if (wire.status < 200 || wire.status >= 300)
      throw ProviderError(wire.status, wire.body,
                          "provider returned HTTP " + std::to_string(wire.status));
    detail::append_completions(wire, remaining, out);
  }
  out.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now() - start);
  return out;
}

}  // namespace srr
