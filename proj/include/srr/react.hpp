#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "srr/core.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/search_env.hpp"

namespace srr {

// Default policy prompt describing the tag grammar; ships as
// assets/react_system_prompt_v1.txt as well. Deployments override via config.
inline constexpr std::string_view kDefaultSystemPromptV1 =
    R"(You are a deep search agent. You answer hard questions by interleaving your own reasoning with web searches.

On every turn, first write down your reasoning, then take exactly one action:
- To search, wrap a single search query with <|begin_search_query|> and <|end_search_query|>.
- Search results will be provided back to you wrapped with <|begin_search_result|> and <|end_search_result|>.
- When the gathered information is sufficient, output the final answer inside \boxed{}.

Output exactly one search query or one boxed answer per turn.
)";

using UnixClock = std::function<std::int64_t()>;

inline UnixClock system_unix_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

struct ReactConfig {
  int budget = 20;  // max search interactions per trajectory
  Endpoint policy;
  std::string system_prompt{kDefaultSystemPromptV1};
  bool force_answer_on_exhaustion = true;
  int max_parse_retries = 2;
  UnixClock clock = system_unix_clock();
};

inline std::vector<ChatMessage> build_policy_messages(const std::string& system_prompt,
                                                      const Question& question,
                                                      History steps) {
  std::vector<ChatMessage> messages;
  messages.push_back({"system", system_prompt});
  messages.push_back({"user", question.text});
  std::string history = render_history(steps);
  if (!history.empty()) messages.push_back({"assistant", history});
  return messages;
}

namespace detail {

// Executes one search action against the environment. A corpus/web miss is a
// normal observation, not an error.
inline Observation observe(SearchEnvironment& env, const std::string& query) {
  auto hits = env.search(query);
  if (hits.empty()) return Observation{"No results found.", {}, false};
  return env.fetch_observation(query, hits);
}

}  // namespace detail

// The basic inference loop: prompt -> parse -> (search | answer), until a
// boxed answer lands or the search budget is spent. The search step that
// brings the count to `budget` is never executed; it records the verbatim
// limit notice, and (when enabled) one final completion is requested from
// which only a boxed answer is accepted.
inline Trajectory run_react(const Question& question, SearchEnvironment& env,
                            const ReactConfig& cfg) {
  if (cfg.budget < 1) throw std::invalid_argument("budget must be >= 1");
  Trajectory t;
  t.question = question;
  t.status = TrajectoryStatus::Aborted;
  t.budget = cfg.budget;
  t.policy_id = cfg.policy.config.model_id;
  t.created_at = cfg.clock();

  int search_steps = 0;
  bool forced_final = false;
  for (;;) {
    ChatRequest req;
    req.model_id = cfg.policy.config.model_id;
    req.messages = build_policy_messages(cfg.system_prompt, question, t.steps);
    req.temperature = cfg.policy.config.temperature;
    req.max_tokens = cfg.policy.config.max_tokens;

    ParsedOutput parsed;
    bool have_parsed = false;
    int attempts = forced_final ? 1 : cfg.max_parse_retries + 1;
    for (int attempt = 0; attempt < attempts; ++attempt) {
      ChatResponse resp;
      try {
        resp = complete(cfg.policy, req);
      } catch (const ScriptExhausted&) {
        throw;
      } catch (const Error&) {
        t.status = TrajectoryStatus::Aborted;  // partial steps preserved
        return t;
      }
      try {
        parsed = parse_model_output(resp.completions.front());
        have_parsed = true;
        break;
      } catch (const MalformedOutput&) {
        continue;  // fresh sample
      }
    }
    if (!have_parsed) {
      t.status = forced_final ? TrajectoryStatus::BudgetExhausted : TrajectoryStatus::Malformed;
      return t;
    }

    if (parsed.action.is_answer()) {
      t.steps.push_back(
          {static_cast<int>(t.steps.size()), parsed.thought, parsed.action, std::nullopt});
      t.status = TrajectoryStatus::Answered;
      return t;
    }

    if (forced_final) {
      // final completion searched again
      t.status = TrajectoryStatus::BudgetExhausted;
      return t;
    }

    Step step{static_cast<int>(t.steps.size()), parsed.thought, parsed.action, std::nullopt};
    ++search_steps;
    if (search_steps == cfg.budget) {
      step.observation = Observation{std::string(kSearchLimitNotice), {}, false};
      t.steps.push_back(std::move(step));
      if (!cfg.force_answer_on_exhaustion) {
        t.status = TrajectoryStatus::BudgetExhausted;
        return t;
      }
      forced_final = true;
      continue;
    }

    try {
      step.observation = detail::observe(env, parsed.action.payload);
    } catch (const Error&) {
      t.status = TrajectoryStatus::Aborted;
      return t;
    }
    t.steps.push_back(std::move(step));
  }
}

}  // namespace srr
