#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "srr/errors.hpp"

namespace srr {

// Tag grammar emitted and consumed by the policy/judge models. Bit-exact;
// everything downstream (parsing, rendering, prompts, exports) shares these.
inline constexpr std::string_view kBeginSearchQuery = "<|begin_search_query|>";
inline constexpr std::string_view kEndSearchQuery = "<|end_search_query|>";
inline constexpr std::string_view kBeginSearchResult = "<|begin_search_result|>";
inline constexpr std::string_view kEndSearchResult = "<|end_search_result|>";
inline constexpr std::string_view kBoxedPrefix = "\\boxed{";

// Observation injected verbatim when a trajectory hits its search budget.
inline constexpr std::string_view kSearchLimitNotice =
    "You have reached the search limit. You are not allowed to search.";

struct Question {
  std::string id;
  std::string text;
  std::optional<std::string> gold_answer;
  std::string source;

  bool operator==(const Question&) const = default;
};

enum class ActionType { Search, Answer };

struct Action {
  ActionType type = ActionType::Search;
  std::string payload;

  static Action search(std::string query) {
    return Action{ActionType::Search, std::move(query)};
  }
  static Action answer(std::string text) {
    return Action{ActionType::Answer, std::move(text)};
  }
  bool is_search() const { return type == ActionType::Search; }
  bool is_answer() const { return type == ActionType::Answer; }

  bool operator==(const Action&) const = default;
};

struct Observation {
  std::string text;
  std::vector<std::string> source_urls;
  bool truncated = false;

  bool operator==(const Observation&) const = default;
};

struct Step {
  int index = 0;
  std::string thought;
  Action action;
  std::optional<Observation> observation;  // present iff action is Search

  bool operator==(const Step&) const = default;
};

enum class TrajectoryStatus { Answered, BudgetExhausted, Malformed, Aborted };

inline std::string_view to_string(TrajectoryStatus s) {
  switch (s) {
    case TrajectoryStatus::Answered: return "answered";
    case TrajectoryStatus::BudgetExhausted: return "budget_exhausted";
    case TrajectoryStatus::Malformed: return "malformed";
    case TrajectoryStatus::Aborted: return "aborted";
  }
  return "aborted";
}

inline TrajectoryStatus status_from_string(std::string_view s) {
  if (s == "answered") return TrajectoryStatus::Answered;
  if (s == "budget_exhausted") return TrajectoryStatus::BudgetExhausted;
  if (s == "malformed") return TrajectoryStatus::Malformed;
  if (s == "aborted") return TrajectoryStatus::Aborted;
  throw SchemaViolation("unknown trajectory status: " + std::string(s));
}

struct Trajectory {
  Question question;
  std::vector<Step> steps;
  TrajectoryStatus status = TrajectoryStatus::Aborted;
  int budget = 20;
  std::string policy_id;
  std::int64_t created_at = 0;  // unix seconds

  int search_step_count() const {
    int n = 0;
    for (const auto& s : steps) n += s.action.is_search() ? 1 : 0;
    return n;
  }
  std::optional<std::string> final_answer() const {
    if (!steps.empty() && steps.back().action.is_answer()) return steps.back().action.payload;
    return std::nullopt;
  }

  bool operator==(const Trajectory&) const = default;
};

// A history is a prefix view of a trajectory's steps (everything strictly
// before the step under consideration).
using History = std::span<const Step>;

inline std::string trim(std::string_view s) {
  size_t b = 0;
  size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

struct ParsedOutput {
  std::string thought;
  Action action;

  bool operator==(const ParsedOutput&) const = default;
};

// Extracts the balanced-brace content starting right after a "\boxed{" whose
// '{' has already been consumed. Returns nullopt when braces never balance.
inline std::optional<std::string> boxed_content(std::string_view s, size_t open) {
  int depth = 1;
  size_t i = open;
  while (i < s.size()) {
    char c = s[i];
    if (c == '{') ++depth;
    if (c == '}' && --depth == 0) return std::string(s.substr(open, i - open));
    ++i;
  }
  return std::nullopt;
}

// Splits one model completion into (thought, action). A well-formed search-tag
// pair wins over a boxed answer: in live decoding generation stops at the
// closing search tag, so boxed text after it is unreachable continuation.
inline ParsedOutput parse_model_output(std::string_view raw_text) {
  if (trim(raw_text).empty()) throw MalformedOutput("model output is empty");

  size_t begin = raw_text.find(kBeginSearchQuery);
  if (begin != std::string_view::npos) {
    size_t content = begin + kBeginSearchQuery.size();
    size_t end = raw_text.find(kEndSearchQuery, content);
    if (end != std::string_view::npos) {
      std::string query = trim(raw_text.substr(content, end - content));
      if (query.empty()) throw MalformedOutput("empty search query between tags");
      return {trim(raw_text.substr(0, begin)), Action::search(std::move(query))};
    }
  }

  size_t boxed = raw_text.find(kBoxedPrefix);
  if (boxed != std::string_view::npos) {
    auto answer = boxed_content(raw_text, boxed + kBoxedPrefix.size());
    if (answer) {
      std::string trimmed = trim(*answer);
      if (trimmed.empty()) throw MalformedOutput("empty boxed answer");
      return {trim(raw_text.substr(0, boxed)), Action::answer(std::move(trimmed))};
    }
  }

  throw MalformedOutput("no complete search-tag pair or boxed answer in model output");
}

// The action exactly as a policy model emits it. parse_model_output inverts
// this for trimmed thoughts, which is what SFT export reconstruction relies on.
inline std::string render_action(const Action& action) {
  std::string out;
  if (action.is_search()) {
    out.append(kBeginSearchQuery).append(action.payload).append(kEndSearchQuery);
  } else {
    out.append(kBoxedPrefix).append(action.payload).push_back('}');
  }
  return out;
}

// Deterministic rendering of a history prefix. Search steps carry their query
// and result in the tag grammar; a terminal Answer step (rare in a history)
// renders its boxed answer inside the query tags, matching how judge prompts
// describe current steps.
inline std::string render_history(History history) {
  std::string out;
  for (const Step& step : history) {
    out.append(step.thought);
    out.push_back('\n');
    out.append(kBeginSearchQuery);
    if (step.action.is_search()) {
      out.append(step.action.payload);
    } else {
      out.append(kBoxedPrefix).append(step.action.payload).push_back('}');
    }
    out.append(kEndSearchQuery);
    out.push_back('\n');
    if (step.observation) {
      out.append(kBeginSearchResult).append(step.observation->text).append(kEndSearchResult);
      out.push_back('\n');
    }
  }
  return out;
}

inline std::string trajectory_id(const Trajectory& t) {
  return t.question.id + "#" + t.policy_id;
}

// Enforces every structural invariant; SchemaViolation names the first breach.
inline void validate_trajectory(const Trajectory& t) {
  if (t.question.id.empty()) throw SchemaViolation("question id is empty");
  if (t.question.text.empty()) throw SchemaViolation("question text is empty");
  if (t.budget < 1) throw SchemaViolation("budget must be >= 1");

  int answers = 0;
  for (size_t i = 0; i < t.steps.size(); ++i) {
    const Step& s = t.steps[i];
    if (s.index != static_cast<int>(i))
      throw SchemaViolation("step indices not contiguous from 0 at position " + std::to_string(i));
    if (s.action.payload.empty())
      throw SchemaViolation("empty action payload at step " + std::to_string(i));
    if (s.action.is_search() && !s.observation)
      throw SchemaViolation("search step missing observation at step " + std::to_string(i));
    if (s.action.is_answer()) {
      ++answers;
      if (s.observation)
        throw SchemaViolation("answer step carries an observation at step " + std::to_string(i));
      if (i + 1 != t.steps.size())
        throw SchemaViolation("answer step is not terminal at step " + std::to_string(i));
    }
  }
  if (answers > 1) throw SchemaViolation("trajectory contains more than one answer step");
  if (t.search_step_count() > t.budget)
    throw SchemaViolation("search step count " + std::to_string(t.search_step_count()) +
                          " exceeds budget " + std::to_string(t.budget));

  bool ends_with_answer = !t.steps.empty() && t.steps.back().action.is_answer();
  if ((t.status == TrajectoryStatus::Answered) != ends_with_answer)
    throw SchemaViolation("status/terminal-step mismatch: status=" +
                          std::string(to_string(t.status)));
}

}  // namespace srr
