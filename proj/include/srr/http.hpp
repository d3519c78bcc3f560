#pragma once

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>

#include "srr/gateway.hpp"

namespace srr {

struct ParsedUrl {
  std::string origin;  // scheme://host[:port], what httplib::Client wants
  std::string path;    // path + query, defaults to "/"
};

inline std::optional<ParsedUrl> parse_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) return std::nullopt;
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return ParsedUrl{url, "/"};
  return ParsedUrl{url.substr(0, path_start), url.substr(path_start)};
}

inline std::string api_key_from_env(const std::string& env_name) {
  if (env_name.empty()) return {};
  const char* v = std::getenv(env_name.c_str());
  return v ? std::string(v) : std::string();
}

// Vendor-neutral chat-completion POST over HTTP(S). A nullopt result (connect
// failure or timeout) is what the gateway's retry loop acts on.
class HttpTransport : public Transport {
 public:
  explicit HttpTransport(EndpointConfig cfg) : cfg_(std::move(cfg)) {}

  std::optional<WireResult> post(const std::string& body) override {
    httplib::Client client(cfg_.base_url);
    client.set_connection_timeout(0, cfg_.timeout_ms * 1000LL);
    client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
    client.set_follow_location(true);

    httplib::Headers headers;
    std::string key = api_key_from_env(cfg_.api_key_env);
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);

    auto res = client.Post(cfg_.path, headers, body, "application/json");
    if (!res) return std::nullopt;
    return WireResult{res->status, res->body};
  }

 private:
  EndpointConfig cfg_;
};

inline Endpoint make_http_endpoint(EndpointConfig cfg) {
  Endpoint ep;
  ep.transport = std::make_shared<HttpTransport>(cfg);
  if (cfg.rps_limit > 0.0) ep.limiter = std::make_shared<TokenBucket>(cfg.rps_limit);
  ep.config = std::move(cfg);
  return ep;
}

// Fetches one page body with a size cap. Returns nullopt on any failure;
// callers record the skip and move on.
inline std::optional<std::string> http_get_page(const std::string& url, int timeout_ms,
                                                size_t max_bytes) {
  auto parsed = parse_url(url);
  if (!parsed) return std::nullopt;
  httplib::Client client(parsed->origin);
  client.set_connection_timeout(0, timeout_ms * 1000LL);
  client.set_read_timeout(timeout_ms / 1000, (timeout_ms % 1000) * 1000);
  client.set_follow_location(true);
  auto res = client.Get(parsed->path);
  if (!res || res->status < 200 || res->status >= 300) return std::nullopt;
  std::string body = res->body;
  if (body.size() > max_bytes) body.resize(max_bytes);
  return body;
}

// Visible-text extraction: drops script/style blocks and markup, decodes the
// common entities, collapses whitespace runs.
inline std::string strip_html(const std::string& html) {
  std::string text;
  text.reserve(html.size() / 2);
  size_t i = 0;
  auto skip_block = [&](const char* open, const char* close) {
    std::string lower;
    size_t probe = i;
    while (probe < html.size() && probe - i < 16) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(html[probe++]))));
    if (lower.rfind(open, 0) != 0) return false;
    size_t end = i;
    for (;;) {
      end = html.find('<', end + 1);
      if (end == std::string::npos) {
        i = html.size();
        return true;
      }
      std::string tag;
      size_t p = end;
      while (p < html.size() && tag.size() < 16) tag.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(html[p++]))));
      if (tag.rfind(close, 0) == 0) {
        size_t gt = html.find('>', end);
        i = gt == std::string::npos ? html.size() : gt + 1;
        return true;
      }
    }
  };
  while (i < html.size()) {
    if (html[i] == '<') {
      if (skip_block("<script", "</script") || skip_block("<style", "</style")) continue;
      size_t gt = html.find('>', i);
      if (gt == std::string::npos) break;
      i = gt + 1;
      text.push_back(' ');
      continue;
    }
    if (html[i] == '&') {
      static const std::pair<const char*, char> entities[] = {
          {"&amp;", '&'}, {"&lt;", '<'}, {"&gt;", '>'},
          {"&quot;", '"'}, {"&#39;", '\''}, {"&nbsp;", ' '}};
      bool matched = false;
      for (const auto& [name, ch] : entities) {
        if (html.compare(i, std::char_traits<char>::length(name), name) == 0) {
          text.push_back(ch);
          i += std::char_traits<char>::length(name);
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    text.push_back(html[i]);
    ++i;
  }
  // collapse whitespace
  std::string out;
  out.reserve(text.size());
  bool in_ws = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_ws = true;
      continue;
    }
    if (in_ws && !out.empty()) out.push_back(' ');
    in_ws = false;
    out.push_back(c);
  }
  return out;
}

}  // namespace srr
