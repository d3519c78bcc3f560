#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "srr/http.hpp"
#include "srr/search_env.hpp"

namespace srr {

struct LiveSearchConfig {
  std::string base_url = "https://google.serper.dev";
  std::string path = "/search";
  std::string api_key_env = "SRR_SEARCH_API_KEY";
  int timeout_ms = 15000;
};

// Serper-compatible web search plus page scraping. The wire shape is
// {"q": query} in, {"organic":[{title,link,snippet}]} out; anything speaking
// that contract plugs in via base_url.
class LiveSearchEnvironment : public SearchEnvironment {
 public:
  LiveSearchEnvironment(LiveSearchConfig search_cfg, Endpoint summarizer,
                        SearchEnvConfig env_cfg = {})
      : search_cfg_(std::move(search_cfg)),
        summarizer_(std::move(summarizer)),
        cfg_(env_cfg) {}

  std::vector<SearchHit> search(const std::string& query) override {
    if (trim(query).empty()) throw EmptyQuery("search query is empty");
    std::string key = api_key_from_env(search_cfg_.api_key_env);
    if (key.empty())
      throw SearchApiError("search API key env var not set: " + search_cfg_.api_key_env);

    httplib::Client client(search_cfg_.base_url);
    client.set_connection_timeout(0, search_cfg_.timeout_ms * 1000LL);
    client.set_read_timeout(search_cfg_.timeout_ms / 1000,
                            (search_cfg_.timeout_ms % 1000) * 1000);
    httplib::Headers headers{{"X-API-KEY", key}};
    nlohmann::json body{{"q", query}};
    auto res = client.Post(search_cfg_.path, headers, body.dump(), "application/json");
    if (!res) throw SearchApiError("search request failed (transport)");
    if (res->status < 200 || res->status >= 300)
      throw SearchApiError("search API returned HTTP " + std::to_string(res->status) + ": " +
                           res->body);

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw SearchApiError(std::string("search API returned invalid JSON: ") + e.what());
    }
    std::vector<SearchHit> hits;
    if (j.contains("organic") && j["organic"].is_array()) {
      for (const auto& item : j["organic"]) {
        if (static_cast<int>(hits.size()) == kMaxSearchHits) break;
        SearchHit h;
        h.title = item.value("title", "");
        h.url = item.value("link", "");
        h.snippet = item.value("snippet", "");
        h.rank = static_cast<int>(hits.size()) + 1;
        if (!h.url.empty()) hits.push_back(std::move(h));
      }
    }
    return hits;
  }

  Observation fetch_observation(const std::string& query,
                                const std::vector<SearchHit>& hits) override {
    if (hits.empty()) throw std::invalid_argument("fetch_observation requires hits");
    std::string content;
    std::vector<std::string> used_urls;
    for (const auto& hit : hits) {  // merged in hit-rank order
      auto page = http_get_page(hit.url, cfg_.scrape_timeout_ms, cfg_.per_page_cap_bytes);
      if (!page) continue;
      content += "Title: " + hit.title + "\nURL: " + hit.url + "\n" + strip_html(*page) + "\n\n";
      used_urls.push_back(hit.url);
    }
    if (used_urls.empty()) throw ScrapeError("all pages failed for query: " + query);
    return MockSearchEnvironment::summarize(summarizer_, query, std::move(content),
                                            std::move(used_urls), cfg_);
  }

 private:
  LiveSearchConfig search_cfg_;
  Endpoint summarizer_;
  SearchEnvConfig cfg_;
};

}  // namespace srr
