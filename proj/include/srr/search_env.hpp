#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/serialize.hpp"

namespace srr {

struct SearchHit {
  std::string title;
  std::string url;
  std::string snippet;
  int rank = 1;

  bool operator==(const SearchHit&) const = default;
};

inline constexpr int kMaxSearchHits = 10;

struct SearchEnvConfig {
  int scrape_timeout_ms = 10000;
  int summary_max_tokens = 8192;
  size_t per_page_cap_bytes = 200 * 1024;
  int bytes_per_token = 4;  // context-budget heuristic
};

inline std::string summarizer_prompt(const std::string& query, const std::string& content) {
  return "Given the search query: " + query +
         "\nSummarize the key information relevant to the query from:\n" + content;
}

// The search side of the environment: query -> ranked hits -> summarized
// observation. Implementations must keep (query, state) -> output deterministic
// where their backing store allows it.
class SearchEnvironment {
 public:
  virtual ~SearchEnvironment() = default;
  virtual std::vector<SearchHit> search(const std::string& query) = 0;
  virtual Observation fetch_observation(const std::string& query,
                                        const std::vector<SearchHit>& hits) = 0;
};

struct CorpusDoc {
  std::string id;
  std::string title;
  std::string url;
  std::string body;
};

inline std::vector<CorpusDoc> load_corpus_jsonl(const std::string& path) {
  std::vector<CorpusDoc> docs;
  for (const auto& line : read_lines(path)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaViolation(std::string("corpus record is not valid JSON: ") + e.what());
    }
    CorpusDoc d;
    d.id = detail::require_string(j, "id", "corpus");
    d.title = detail::require_string(j, "title", "corpus");
    d.url = detail::require_string(j, "url", "corpus");
    d.body = detail::require_string(j, "body", "corpus");
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<std::string> tokenize_lower(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// Corpus-backed environment. Ranking is a fixed lexical score (sum of query-
// term frequencies in title+body) with document-id tie-break, so hits and
// observations are byte-stable for golden tests.
class MockSearchEnvironment : public SearchEnvironment {
 public:
  MockSearchEnvironment(std::vector<CorpusDoc> corpus, Endpoint summarizer,
                        SearchEnvConfig cfg = {})
      : corpus_(std::move(corpus)), summarizer_(std::move(summarizer)), cfg_(cfg) {
    std::sort(corpus_.begin(), corpus_.end(),
              [](const CorpusDoc& a, const CorpusDoc& b) { return a.id < b.id; });
  }

  std::vector<SearchHit> search(const std::string& query) override {
    if (trim(query).empty()) throw EmptyQuery("search query is empty");
    auto query_terms = tokenize_lower(query);
    std::vector<std::string> unique_terms(query_terms);
    std::sort(unique_terms.begin(), unique_terms.end());
    unique_terms.erase(std::unique(unique_terms.begin(), unique_terms.end()),
                       unique_terms.end());

    std::vector<std::pair<long, const CorpusDoc*>> scored;
    for (const auto& doc : corpus_) {
      auto doc_tokens = tokenize_lower(doc.title + " " + doc.body);
      long score = 0;
      for (const auto& term : unique_terms)
        score += std::count(doc_tokens.begin(), doc_tokens.end(), term);
      if (score > 0) scored.emplace_back(score, &doc);
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });

    std::vector<SearchHit> hits;
    for (const auto& [score, doc] : scored) {
      if (static_cast<int>(hits.size()) == kMaxSearchHits) break;
      SearchHit h;
      h.title = doc->title;
      h.url = doc->url;
      h.snippet = doc->body.substr(0, 160);
      h.rank = static_cast<int>(hits.size()) + 1;
      hits.push_back(std::move(h));
    }
    return hits;
  }

  Observation fetch_observation(const std::string& query,
                                const std::vector<SearchHit>& hits) override {
    if (hits.empty()) throw std::invalid_argument("fetch_observation requires hits");
    std::string content;
    std::vector<std::string> used_urls;
    for (const auto& hit : hits) {
      const CorpusDoc* doc = find_by_url(hit.url);
      if (!doc) continue;  // page "unreachable"; skipped, recorded by omission
      content += "Title: " + doc->title + "\nURL: " + doc->url + "\n" + doc->body + "\n\n";
      used_urls.push_back(doc->url);
    }
    if (used_urls.empty()) throw ScrapeError("all pages failed for query: " + query);
    return summarize(summarizer_, query, std::move(content), std::move(used_urls), cfg_);
  }

  // Shared tail of both environments: truncate to the summarizer context
  // budget, call the summarizer endpoint, assemble the observation.
  static Observation summarize(const Endpoint& summarizer, const std::string& query,
                               std::string content, std::vector<std::string> used_urls,
                               const SearchEnvConfig& cfg) {
    bool truncated = false;
    size_t budget =
        static_cast<size_t>(cfg.summary_max_tokens) * static_cast<size_t>(cfg.bytes_per_token);
    if (content.size() > budget) {
      content.resize(budget);
      truncated = true;
    }
    ChatRequest req;
    req.model_id = summarizer.config.model_id;
    req.messages = {{"user", summarizer_prompt(query, content)}};
    req.temperature = summarizer.config.temperature;
    req.max_tokens = cfg.summary_max_tokens;
    ChatResponse resp;
    try {
      resp = complete(summarizer, req);
    } catch (const Error& e) {
      throw SummarizerError(std::string("summarizer call failed: ") + e.what());
    }
    Observation obs;
    obs.text = resp.completions.front();
    obs.source_urls = std::move(used_urls);
    obs.truncated = truncated;
    return obs;
  }

 private:
  const CorpusDoc* find_by_url(const std::string& url) const {
    for (const auto& d : corpus_)
      if (d.url == url) return &d;
    return nullptr;
  }

  std::vector<CorpusDoc> corpus_;
  Endpoint summarizer_;
  SearchEnvConfig cfg_;
};

}  // namespace srr
