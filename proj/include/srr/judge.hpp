#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"

namespace srr {

inline constexpr int kJudgePromptVersion = 1;

// Step-evaluation instruction prompt, v1. Placeholders: {user_query},
// {previous_reasoning_trace}, {reasoning_trace}, {iteration}. The same text
// ships as assets/judge_prompt_v1.txt for deployments that load it from disk.
inline constexpr std::string_view kJudgePromptTemplateV1 =
    R"(User Query
{user_query}

Previous Reasoning Trace
{previous_reasoning_trace}

Current Reasoning Trace
{reasoning_trace}

Instruction
You are now at search iteration {iteration}. Please note that:
- In Previous Reasoning Trace, the content wrapped with <|begin_search_query|><|end_search_query|> indicates the queries used to call the search tool; the content wrapped with <|begin_search_result|><|end_search_result|> indicates the returned search results.
- In Current Reasoning Trace, the content enclosed by the <|begin_search_query|><|end_search_query|> tags indicates either the model's decision to proceed with the next search plan or the model's final result wrapped in a box.
Given the User Query and Previous Reasoning Trace, score and analyze Current Reasoning Trace based on:

Evaluation Criteria
- Clarity & Conciseness: Is the reasoning straightforward, free of redundancy, and easy to understand?
- Logical Structure: Are the steps coherent, well-structured, and supportive of the task objective?
- Query Appropriateness: Do the search queries accurately reflect the intent, use proper keywords, and retrieve highly relevant information? If the returned content is the final answer, determine whether the final answer is correct and faithful to the information obtained from the previous search results.
- Coverage & Improvement Potential: Does it cover the main points, and is there room for improvement (e.g., adding sources or adjusting strategy)?

Scoring Criteria (1-5)
- 5 (Excellent): Clear, well-structured, precise queries, fully covers intent, minimal room for improvement.
- 4 (Good): Overall strong, with only minor areas for optimization.
- 3 (Fair): Adequate but contains noticeable redundancy, weaknesses, or gaps.
- 2 (Poor): Hard to follow, weak logic, queries poorly aligned.
- 1 (Very Poor): Strongly misaligned with intent, incoherent, little to no value.

Output Format
Return the result in the following JSON format:
X = Integer Score (1-5).
Y = Explanation of the score, covering logic, clarity, and query appropriateness.
Z = An improved version of Current Reasoning Trace (Keep the same first-person reasoning style as Current Reasoning Trace, avoid repeating Previous Reasoning Trace, and do not output any extra words).
SQ = a new search query. If no further search is needed, output the final result inside \boxed{}.
{"rating": "X", "explanation": "Y", "thought": "Z", "search_query": "SQ"}
)";

struct StepCandidate {
  std::string thought;
  Action action;
  int policy_sample_index = 0;

  bool operator==(const StepCandidate&) const = default;
};

struct JudgeVerdict {
  int rating = 0;  // 1..5
  std::string explanation;
  std::string refined_thought;
  Action refined_action;
  std::string raw;  // original judge text
  int run_index = 0;

  bool operator==(const JudgeVerdict&) const = default;
};

// Current step as the judge sees it: the thought, then the action inside
// query tags; an answer appears as a boxed result inside the same tags.
inline std::string render_current_trace(const StepCandidate& candidate) {
  std::string out = candidate.thought;
  out.push_back('\n');
  out.append(kBeginSearchQuery);
  if (candidate.action.is_search()) {
    out.append(candidate.action.payload);
  } else {
    out.append(kBoxedPrefix).append(candidate.action.payload).push_back('}');
  }
  out.append(kEndSearchQuery);
  return out;
}

// Single left-to-right pass so substituted text is never re-scanned for
// placeholders.
inline std::string fill_template(
    std::string_view tmpl,
    const std::vector<std::pair<std::string_view, std::string>>& substitutions) {
  std::string out;
  out.reserve(tmpl.size());
  size_t i = 0;
  while (i < tmpl.size()) {
    bool matched = false;
    if (tmpl[i] == '{') {
      for (const auto& [name, value] : substitutions) {
        if (tmpl.compare(i, name.size(), name) == 0) {
          out.append(value);
          i += name.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) {
      out.push_back(tmpl[i]);
      ++i;
    }
  }
  return out;
}

inline std::string render_judge_prompt(const Question& question, History history,
                                       const StepCandidate& candidate, int iteration,
                                       std::string_view tmpl = kJudgePromptTemplateV1) {
  if (iteration < 1) throw std::invalid_argument("iteration must be >= 1");
  return fill_template(tmpl, {{"{user_query}", question.text},
                              {"{previous_reasoning_trace}", render_history(history)},
                              {"{reasoning_trace}", render_current_trace(candidate)},
                              {"{iteration}", std::to_string(iteration)}});
}

namespace detail {

// All top-level balanced {...} spans of `raw`, with JSON-string awareness
// inside each span so braces in string values do not unbalance the scan.
inline std::vector<std::string_view> balanced_object_spans(std::string_view raw) {
  std::vector<std::string_view> spans;
  size_t i = 0;
  while (i < raw.size()) {
    if (raw[i] != '{') {
      ++i;
      continue;
    }
    size_t start = i;
    int depth = 0;
    bool in_string = false;
    bool closed = false;
    for (; i < raw.size(); ++i) {
      char c = raw[i];
      if (in_string) {
        if (c == '\\') {
          ++i;  // skip escaped char
        } else if (c == '"') {
          in_string = false;
        }
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) {
          spans.push_back(raw.substr(start, i - start + 1));
          ++i;
          closed = true;
          break;
        }
      }
    }
    if (!closed) break;  // unbalanced tail; no more spans
  }
  return spans;
}

inline int verdict_rating(const nlohmann::json& v) {
  if (v.is_number_integer()) return v.get<int>();
  if (v.is_number_float()) {
    double d = v.get<double>();
    if (d == static_cast<int>(d)) return static_cast<int>(d);
    throw VerdictParseError("rating is not an integer");
  }
  if (v.is_string()) {
    std::string s = trim(v.get<std::string>());
    if (s.empty()) throw VerdictParseError("rating string is empty");
    size_t pos = 0;
    int r = 0;
    try {
      r = std::stoi(s, &pos);
    } catch (const std::exception&) {
      throw VerdictParseError("rating is not numeric: '" + s + "'");
    }
    if (pos != s.size()) throw VerdictParseError("rating is not numeric: '" + s + "'");
    return r;
  }
  throw VerdictParseError("rating has unsupported JSON type");
}

}  // namespace detail

// Extracts the last balanced JSON object from judge output (reasoning models
// emit chain-of-thought before the JSON deliverable) and maps it to a verdict.
// A search_query containing \boxed{...} is a final-answer refinement.
inline JudgeVerdict parse_verdict(std::string_view raw) {
  if (trim(raw).empty()) throw VerdictParseError("judge output is empty");

  auto spans = detail::balanced_object_spans(raw);
  std::optional<nlohmann::json> obj;
  for (auto it = spans.rbegin(); it != spans.rend(); ++it) {
    nlohmann::json candidate = nlohmann::json::parse(*it, nullptr, false);
    if (!candidate.is_discarded() && candidate.is_object()) {
      obj = std::move(candidate);
      break;
    }
  }
  if (!obj) throw VerdictParseError("no JSON object found in judge output");

  for (const char* key : {"rating", "explanation", "thought", "search_query"})
    if (!obj->contains(key))
      throw VerdictParseError(std::string("verdict is missing required key '") + key + "'");

  JudgeVerdict v;
  v.rating = detail::verdict_rating((*obj)["rating"]);
  if (v.rating < 1 || v.rating > 5)
    throw VerdictParseError("rating " + std::to_string(v.rating) + " outside 1-5");
  if (!(*obj)["explanation"].is_string() || !(*obj)["thought"].is_string() ||
      !(*obj)["search_query"].is_string())
    throw VerdictParseError("explanation/thought/search_query must be strings");
  v.explanation = (*obj)["explanation"].get<std::string>();
  v.refined_thought = (*obj)["thought"].get<std::string>();

  std::string sq = trim((*obj)["search_query"].get<std::string>());
  if (sq.empty()) throw VerdictParseError("search_query is empty; refinement not actionable");
  size_t boxed = sq.find(kBoxedPrefix);
  if (boxed != std::string::npos) {
    auto answer = boxed_content(sq, boxed + kBoxedPrefix.size());
    if (!answer) throw VerdictParseError("unbalanced \\boxed{} in search_query");
    std::string trimmed = trim(*answer);
    if (trimmed.empty()) throw VerdictParseError("empty \\boxed{} answer in search_query");
    v.refined_action = Action::answer(std::move(trimmed));
  } else {
    v.refined_action = Action::search(std::move(sq));
  }
  v.raw = std::string(raw);
  return v;
}

// Renders the prompt, samples the judge, parses; parse failures re-sample up
// to `parse_retries` fresh completions. Gateway failures surface as
// JudgeUnavailable.
inline JudgeVerdict judge_step(const Endpoint& judge, const Question& question, History history,
                               const StepCandidate& candidate, int iteration,
                               int parse_retries = 2,
                               std::string_view tmpl = kJudgePromptTemplateV1) {
  std::string prompt = render_judge_prompt(question, history, candidate, iteration, tmpl);
  ChatRequest req;
  req.model_id = judge.config.model_id;
  req.messages = {{"user", prompt}};
  req.temperature = judge.config.temperature;
  req.max_tokens = judge.config.max_tokens;
  req.n_samples = 1;

  std::string last_error;
  for (int attempt = 0; attempt <= parse_retries; ++attempt) {
    ChatResponse resp;
    try {
      resp = complete(judge, req);
    } catch (const ScriptExhausted&) {
      throw;
    } catch (const Error& e) {
      throw JudgeUnavailable(std::string("judge endpoint failed: ") + e.what());
    }
    try {
      return parse_verdict(resp.completions.front());
    } catch (const VerdictParseError& e) {
      last_error = e.what();
    }
  }
  throw VerdictParseError("no parseable verdict after " + std::to_string(parse_retries + 1) +
                          " attempts; last error: " + last_error);
}

// One multi-sample request for self-consistency voting. Unparseable samples
// are dropped; run_index preserves each verdict's sample position.
inline std::vector<JudgeVerdict> judge_step_votes(const Endpoint& judge, const Question& question,
                                                  History history, const StepCandidate& candidate,
                                                  int iteration, int runs,
                                                  std::string_view tmpl = kJudgePromptTemplateV1) {
  if (runs < 1) throw std::invalid_argument("runs must be >= 1");
  std::string prompt = render_judge_prompt(question, history, candidate, iteration, tmpl);
  ChatRequest req;
  req.model_id = judge.config.model_id;
  req.messages = {{"user", prompt}};
  req.temperature = judge.config.temperature;
  req.max_tokens = judge.config.max_tokens;
  req.n_samples = runs;

  ChatResponse resp;
  try {
    resp = complete(judge, req);
  } catch (const ScriptExhausted&) {
    throw;
  } catch (const Error& e) {
    throw JudgeUnavailable(std::string("judge endpoint failed: ") + e.what());
  }
  std::vector<JudgeVerdict> verdicts;
  for (size_t i = 0; i < resp.completions.size(); ++i) {
    try {
      JudgeVerdict v = parse_verdict(resp.completions[i]);
      v.run_index = static_cast<int>(i);
      verdicts.push_back(std::move(v));
    } catch (const VerdictParseError&) {
      // dropped; InsufficientVotes is decided by the caller
    }
  }
  return verdicts;
}

}  // namespace srr
