#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/datapipe.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/http.hpp"
#include "srr/live_search.hpp"
#include "srr/react.hpp"
#include "srr/search_env.hpp"

namespace srr {

// One endpoint section of the config file. type "http" talks to a live
// chat-completion server; type "mock" replays a script file, which is what
// makes whole pipelines runnable offline and byte-reproducible.
struct EndpointSpec {
  std::string type = "http";  // http | mock
  std::string base_url;
  std::string path = "/v1/chat/completions";
  std::string model_id;
  std::string api_key_env;
  int max_retries = 2;
  int timeout_ms = 30000;
  double rps_limit = 0.0;
  double temperature = 0.7;
  int max_tokens = 4096;
  std::string script_file;  // mock only
  bool configured = false;
};

struct SearchSection {
  std::string mode = "mock";  // live | mock
  std::string corpus_file;    // mock only
  std::string base_url = "https://google.serper.dev";
  std::string path = "/search";
  std::string api_key_env = "SRR_SEARCH_API_KEY";
  int scrape_timeout_ms = 10000;
  int summary_max_tokens = 8192;
  std::size_t per_page_cap_bytes = 200 * 1024;
};

struct ReactSection {
  int budget = 20;
  int max_parse_retries = 2;
  bool force_answer_on_exhaustion = true;
  std::string system_prompt_file;  // empty = built-in default
};

struct RnrSection {
  int n_online = 1;
  int n_datagen = 5;
  int accept_threshold = 4;
};

struct RebalanceSection {
  // desk-scale defaults; the `paper-scale` preset restores 10000/3/10000
  std::size_t high_pool_cap = 1000;
  int rating2_upsample_factor = 3;
  std::size_t negatives_count = 100;
};

struct DatapipeSection {
  int annotation_runs = 5;
  double target_rpb = 0.7;
  double max_removed_fraction = 0.5;
  RebalanceSection rebalance;
};

struct PathsSection {
  std::string manifest_dir;  // empty = alongside --out
};

struct AppConfig {
  std::uint64_t seed = 17;
  bool fixed_clock = false;
  std::int64_t fixed_clock_unix = 0;
  EndpointSpec policy;
  EndpointSpec judge;
  EndpointSpec summarizer;
  EndpointSpec grader;
  SearchSection search;
  ReactSection react;
  RnrSection rnr;
  DatapipeSection datapipe;
  PathsSection paths;

  UnixClock clock() const {
    if (fixed_clock) {
      std::int64_t at = fixed_clock_unix;
      return [at] { return at; };
    }
    return system_unix_clock();
  }
};

inline void apply_rebalance_preset(RebalanceSection& r, const std::string& preset,
                                   const std::string& path) {
  if (preset == "paper-scale") {
    r.high_pool_cap = 10000;
    r.rating2_upsample_factor = 3;
    r.negatives_count = 10000;
  } else if (preset == "desk-scale") {
    r = RebalanceSection{};
  } else {
    throw ConfigError(path + ": unknown preset '" + preset + "'");
  }
}

namespace detail {

// ${NAME} -> getenv(NAME); unset variables are a config error, not a silent
// empty string.
inline std::string interpolate_env(const std::string& value, const std::string& path) {
  std::string out;
  size_t i = 0;
  while (i < value.size()) {
    if (value[i] == '$' && i + 1 < value.size() && value[i + 1] == '{') {
      size_t close = value.find('}', i + 2);
      if (close == std::string::npos)
        throw ConfigError(path + ": unterminated ${...} reference");
      std::string name = value.substr(i + 2, close - i - 2);
      const char* v = std::getenv(name.c_str());
      if (!v)
        throw ConfigError(path + ": environment variable '" + name + "' is not set");
      out += v;
      i = close + 1;
      continue;
    }
    out.push_back(value[i]);
    ++i;
  }
  return out;
}

class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    mark(key);
    if (!j_.contains(key)) return;
    ConfigReader sub(j_.at(key), path_ + "." + key);
    fn(sub);
    sub.reject_unread();
  }

  std::string get_string(const char* key, std::string fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(path_ + "." + key + ": expected a string");
    return interpolate_env(v.get<std::string>(), path_ + "." + key);
  }

  template <typename T>
  T get_number(const char* key, T fallback, T lo, T hi) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(path_ + "." + key + ": expected a number");
    T value = v.get<T>();
    if (value < lo || value > hi)
      throw ConfigError(path_ + "." + key + ": value " + std::to_string(value) +
                        " outside allowed range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    return value;
  }

  bool get_bool(const char* key, bool fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(path_ + "." + key + ": expected a boolean");
    return v.get<bool>();
  }

  void reject_unread() {
    for (const auto& item : j_.items())
      if (std::find(read_.begin(), read_.end(), item.key()) == read_.end())
        throw ConfigError(path_ + ": unknown key '" + item.key() + "'");
  }

 private:
  void mark(const char* key) { read_.push_back(key); }

  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string> read_;
};

inline void read_endpoint(ConfigReader& r, const char* key, EndpointSpec& spec,
                          const std::string& default_api_key_env) {
  spec.api_key_env = default_api_key_env;
  r.object(key, [&](ConfigReader& e) {
    spec.configured = true;
    spec.type = e.get_string("type", spec.type);
    if (spec.type != "http" && spec.type != "mock")
      throw ConfigError(std::string("endpoints.") + key + ".type: must be 'http' or 'mock'");
    spec.base_url = e.get_string("base_url", spec.base_url);
    spec.path = e.get_string("path", spec.path);
    spec.model_id = e.get_string("model_id", spec.model_id);
    spec.api_key_env = e.get_string("api_key_env", spec.api_key_env);
    spec.max_retries = e.get_number<int>("max_retries", spec.max_retries, 0, 100);
    spec.timeout_ms = e.get_number<int>("timeout_ms", spec.timeout_ms, 1, 3600000);
    spec.rps_limit = e.get_number<double>("rps_limit", spec.rps_limit, 0.0, 1e6);
    spec.temperature = e.get_number<double>("temperature", spec.temperature, 0.0, 2.0);
    spec.max_tokens = e.get_number<int>("max_tokens", spec.max_tokens, 1, 1 << 24);
    spec.script_file = e.get_string("script_file", spec.script_file);
    if (spec.type == "http" && spec.base_url.empty())
      throw ConfigError(std::string("endpoints.") + key + ": http endpoint needs base_url");
    if (spec.type == "mock" && spec.script_file.empty())
      throw ConfigError(std::string("endpoints.") + key + ": mock endpoint needs script_file");
  });
}

}  // namespace detail

inline AppConfig parse_config(const nlohmann::json& j) {
  AppConfig cfg;
  cfg.grader.temperature = 0.0;
  cfg.summarizer.temperature = 0.0;
  cfg.judge.temperature = 0.8;  // annotation diversity for self-consistency

  detail::ConfigReader root(j, "config");
  cfg.seed = root.get_number<std::uint64_t>("seed", cfg.seed, 0,
                                            std::numeric_limits<std::uint64_t>::max());
  root.object("clock", [&](detail::ConfigReader& c) {
    std::string type = c.get_string("type", "system");
    if (type == "fixed") {
      cfg.fixed_clock = true;
      cfg.fixed_clock_unix = c.get_number<std::int64_t>(
          "unix_seconds", 0, 0, std::numeric_limits<std::int64_t>::max());
    } else if (type != "system") {
      throw ConfigError("config.clock.type: must be 'system' or 'fixed'");
    }
  });
  root.object("endpoints", [&](detail::ConfigReader& e) {
    detail::read_endpoint(e, "policy", cfg.policy, "SRR_POLICY_API_KEY");
    detail::read_endpoint(e, "judge", cfg.judge, "SRR_JUDGE_API_KEY");
    detail::read_endpoint(e, "summarizer", cfg.summarizer, "");
    detail::read_endpoint(e, "grader", cfg.grader, "");
  });
  root.object("search", [&](detail::ConfigReader& s) {
    cfg.search.mode = s.get_string("mode", cfg.search.mode);
    if (cfg.search.mode != "live" && cfg.search.mode != "mock")
      throw ConfigError("config.search.mode: must be 'live' or 'mock'");
    cfg.search.corpus_file = s.get_string("corpus_file", cfg.search.corpus_file);
    cfg.search.base_url = s.get_string("base_url", cfg.search.base_url);
    cfg.search.path = s.get_string("path", cfg.search.path);
    cfg.search.api_key_env = s.get_string("api_key_env", cfg.search.api_key_env);
    cfg.search.scrape_timeout_ms =
        s.get_number<int>("scrape_timeout_ms", cfg.search.scrape_timeout_ms, 1, 3600000);
    cfg.search.summary_max_tokens =
        s.get_number<int>("summary_max_tokens", cfg.search.summary_max_tokens, 1, 1 << 24);
    cfg.search.per_page_cap_bytes = s.get_number<std::size_t>(
        "per_page_cap_bytes", cfg.search.per_page_cap_bytes, 1, 1 << 30);
    if (cfg.search.mode == "mock" && cfg.search.corpus_file.empty())
      throw ConfigError("config.search: mock mode needs corpus_file");
  });
  root.object("react", [&](detail::ConfigReader& r) {
    cfg.react.budget = r.get_number<int>("budget", cfg.react.budget, 1, 10000);
    cfg.react.max_parse_retries =
        r.get_number<int>("max_parse_retries", cfg.react.max_parse_retries, 0, 100);
    cfg.react.force_answer_on_exhaustion =
        r.get_bool("force_answer_on_exhaustion", cfg.react.force_answer_on_exhaustion);
    cfg.react.system_prompt_file =
        r.get_string("system_prompt_file", cfg.react.system_prompt_file);
  });
  root.object("rnr", [&](detail::ConfigReader& r) {
    cfg.rnr.n_online = r.get_number<int>("n_online", cfg.rnr.n_online, 1, 100);
    cfg.rnr.n_datagen = r.get_number<int>("n_datagen", cfg.rnr.n_datagen, 1, 100);
    cfg.rnr.accept_threshold =
        r.get_number<int>("accept_threshold", cfg.rnr.accept_threshold, 1, 5);
  });
  root.object("datapipe", [&](detail::ConfigReader& d) {
    cfg.datapipe.annotation_runs =
        d.get_number<int>("annotation_runs", cfg.datapipe.annotation_runs, 1, 100);
    cfg.datapipe.target_rpb =
        d.get_number<double>("target_rpb", cfg.datapipe.target_rpb, -1.0, 1.0);
    cfg.datapipe.max_removed_fraction = d.get_number<double>(
        "max_removed_fraction", cfg.datapipe.max_removed_fraction, 0.0, 1.0);
    d.object("rebalance", [&](detail::ConfigReader& rb) {
      std::string preset = rb.get_string("preset", "");
      if (!preset.empty())
        apply_rebalance_preset(cfg.datapipe.rebalance, preset, "config.datapipe.rebalance");
      cfg.datapipe.rebalance.high_pool_cap = rb.get_number<std::size_t>(
          "high_pool_cap", cfg.datapipe.rebalance.high_pool_cap, 0, 1 << 30);
      cfg.datapipe.rebalance.rating2_upsample_factor =
          rb.get_number<int>("rating2_upsample_factor",
                             cfg.datapipe.rebalance.rating2_upsample_factor, 1, 1000);
      cfg.datapipe.rebalance.negatives_count = rb.get_number<std::size_t>(
          "negatives_count", cfg.datapipe.rebalance.negatives_count, 0, 1 << 30);
    });
  });
  root.object("paths", [&](detail::ConfigReader& p) {
    cfg.paths.manifest_dir = p.get_string("manifest_dir", cfg.paths.manifest_dir);
  });
  root.reject_unread();
  return cfg;
}

inline AppConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// Script files: {"completions": [...]} for ordered scripts, or
// {"rules":[{"contains":...,"completion":...}],"default":...} for keyed ones.
inline MockScript load_mock_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open mock script: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("mock script " + path + " is not valid JSON: " + e.what());
  }
  MockScript script;
  if (j.contains("completions"))
    for (const auto& c : j["completions"]) script.ordered.push_back(c.get<std::string>());
  if (j.contains("rules"))
    for (const auto& r : j["rules"])
      script.keyed.push_back({r.at("contains").get<std::string>(),
                              r.at("completion").get<std::string>()});
  if (j.contains("default")) script.fallback = j["default"].get<std::string>();
  if (script.ordered.empty() && script.keyed.empty() && !script.fallback)
    throw ConfigError("mock script " + path + " defines no completions");
  return script;
}

inline Endpoint make_endpoint(const EndpointSpec& spec, const std::string& name) {
  if (!spec.configured)
    throw ConfigError("endpoint '" + name + "' is not configured");
  if (spec.type == "mock") {
    Endpoint ep = make_mock_endpoint(load_mock_script(spec.script_file),
                                     spec.model_id.empty() ? "scripted-mock" : spec.model_id);
    ep.config.temperature = spec.temperature;
    ep.config.max_tokens = spec.max_tokens;
    ep.config.max_retries = spec.max_retries;
    return ep;
  }
  EndpointConfig cfg;
  cfg.base_url = spec.base_url;
  cfg.path = spec.path;
  cfg.model_id = spec.model_id;
  cfg.api_key_env = spec.api_key_env;
  cfg.max_retries = spec.max_retries;
  cfg.timeout_ms = spec.timeout_ms;
  cfg.rps_limit = spec.rps_limit;
  cfg.temperature = spec.temperature;
  cfg.max_tokens = spec.max_tokens;
  return make_http_endpoint(std::move(cfg));
}

inline std::unique_ptr<SearchEnvironment> make_search_environment(const AppConfig& cfg) {
  SearchEnvConfig env_cfg;
  env_cfg.scrape_timeout_ms = cfg.search.scrape_timeout_ms;
  env_cfg.summary_max_tokens = cfg.search.summary_max_tokens;
  env_cfg.per_page_cap_bytes = cfg.search.per_page_cap_bytes;
  Endpoint summarizer = make_endpoint(cfg.summarizer, "summarizer");
  if (cfg.search.mode == "mock") {
    return std::make_unique<MockSearchEnvironment>(load_corpus_jsonl(cfg.search.corpus_file),
                                                   std::move(summarizer), env_cfg);
  }
  LiveSearchConfig live;
  live.base_url = cfg.search.base_url;
  live.path = cfg.search.path;
  live.api_key_env = cfg.search.api_key_env;
  live.timeout_ms = cfg.search.scrape_timeout_ms;
  return std::make_unique<LiveSearchEnvironment>(std::move(live), std::move(summarizer),
                                                 env_cfg);
}

inline std::string load_system_prompt(const ReactSection& react) {
  if (react.system_prompt_file.empty()) return std::string(kDefaultSystemPromptV1);
  std::ifstream in(react.system_prompt_file);
  if (!in) throw ConfigError("cannot open system prompt file: " + react.system_prompt_file);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

}  // namespace srr
