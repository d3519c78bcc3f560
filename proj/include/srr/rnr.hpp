#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/judge.hpp"
#include "srr/react.hpp"
#include "srr/search_env.hpp"
#include "srr/serialize.hpp"

namespace srr {

struct RnRConfig {
  int n_candidates = 1;      // N: best-of-N sampling width
  int accept_threshold = 4;  // ratings below this trigger refinement
  int budget = 20;
  Endpoint policy;
  Endpoint judge;
  std::string system_prompt{kDefaultSystemPromptV1};
  int judge_parse_retries = 2;
  UnixClock clock = system_unix_clock();
};

struct AnnotatedStep {
  Step chosen;  // the step as executed (refined content when refined)
  std::vector<JudgeVerdict> verdicts;
  int chosen_index = 0;
  bool refined = false;
  std::vector<StepCandidate> candidates;
  int final_rating = 0;        // chosen verdict's rating, or majority vote
  std::vector<int> votes;      // non-empty only for vote-annotated steps
  std::optional<int> donor_run;

  bool operator==(const AnnotatedStep&) const = default;
};

struct AnnotatedTrajectory {
  Trajectory trajectory;
  std::vector<AnnotatedStep> annotated_steps;
  std::optional<bool> correctness;
  std::optional<double> avg_rating;
  std::optional<double> first_rating;
  std::optional<double> last_rating;

  bool operator==(const AnnotatedTrajectory&) const = default;
};

// Highest rating wins; ties break toward the earliest sample.
inline int select_candidate(const std::vector<JudgeVerdict>& verdicts) {
  if (verdicts.empty()) throw std::invalid_argument("select_candidate requires verdicts");
  int best = 0;
  for (size_t i = 1; i < verdicts.size(); ++i)
    if (verdicts[i].rating > verdicts[best].rating) best = static_cast<int>(i);
  return best;
}

struct StepDecision {
  int chosen_index = 0;
  bool refined = false;
  std::string thought;
  Action action;
};

// The per-step rate-and-refine rule: take the argmax candidate when it meets
// the threshold, otherwise adopt that verdict's refinement (executed without
// re-judging; one refine hop per step).
inline StepDecision decide_step(const std::vector<StepCandidate>& candidates,
                                const std::vector<JudgeVerdict>& verdicts,
                                int accept_threshold) {
  if (candidates.size() != verdicts.size() || candidates.empty())
    throw std::invalid_argument("decide_step requires one verdict per candidate");
  int idx = select_candidate(verdicts);
  if (verdicts[idx].rating >= accept_threshold)
    return {idx, false, candidates[idx].thought, candidates[idx].action};
  return {idx, true, verdicts[idx].refined_thought, verdicts[idx].refined_action};
}

inline void finalize_ratings(AnnotatedTrajectory& at) {
  if (at.annotated_steps.empty()) return;
  double sum = 0.0;
  for (const auto& s : at.annotated_steps) sum += s.final_rating;
  at.avg_rating = sum / static_cast<double>(at.annotated_steps.size());
  at.first_rating = at.annotated_steps.front().final_rating;
  at.last_rating = at.annotated_steps.back().final_rating;
}

// Best-of-N step sampling with judge-gated refinement. Control flow mirrors
// run_react exactly (same budget rule, same retry pool for N=1, same forced
// final turn) so a never-refining judge reproduces the plain ReAct trajectory.
inline AnnotatedTrajectory run_rate_refine(const Question& question, SearchEnvironment& env,
                                           const RnRConfig& cfg) {
  if (cfg.n_candidates < 1) throw std::invalid_argument("n_candidates must be >= 1");
  if (cfg.accept_threshold < 1 || cfg.accept_threshold > 5)
    throw std::invalid_argument("accept_threshold must be in 1..5");
  if (cfg.budget < 1) throw std::invalid_argument("budget must be >= 1");

  AnnotatedTrajectory at;
  Trajectory& t = at.trajectory;
  t.question = question;
  t.status = TrajectoryStatus::Aborted;
  t.budget = cfg.budget;
  t.policy_id = cfg.policy.config.model_id;
  t.created_at = cfg.clock();

  auto abort_run = [&](TrajectoryStatus status) {
    t.status = status;
    finalize_ratings(at);
    return at;
  };

  int search_steps = 0;
  bool forced_final = false;
  for (;;) {
    ChatRequest req;
    req.model_id = cfg.policy.config.model_id;
    req.messages = build_policy_messages(cfg.system_prompt, question, t.steps);
    req.temperature = cfg.policy.config.temperature;
    req.max_tokens = cfg.policy.config.max_tokens;

    // Sample candidates one completion at a time from a shared retry pool.
    int want = forced_final ? 1 : cfg.n_candidates;
    int attempts_left = forced_final ? 1 : cfg.n_candidates + 2;
    std::vector<StepCandidate> candidates;
    int sample_index = 0;
    while (static_cast<int>(candidates.size()) < want && attempts_left > 0) {
      --attempts_left;
      ChatResponse resp;
      try {
        resp = complete(cfg.policy, req);
      } catch (const ScriptExhausted&) {
        throw;
      } catch (const Error&) {
        return abort_run(TrajectoryStatus::Aborted);
      }
      try {
        ParsedOutput parsed = parse_model_output(resp.completions.front());
        candidates.push_back({parsed.thought, parsed.action, sample_index});
      } catch (const MalformedOutput&) {
        // consumed one attempt from the pool
      }
      ++sample_index;
    }
    if (candidates.empty())
      return abort_run(forced_final ? TrajectoryStatus::BudgetExhausted
                                    : TrajectoryStatus::Malformed);

    std::vector<JudgeVerdict> verdicts;
    int iteration = static_cast<int>(t.steps.size()) + 1;
    for (size_t i = 0; i < candidates.size(); ++i) {
      JudgeVerdict v;
      try {
        v = judge_step(cfg.judge, question, t.steps, candidates[i], iteration,
                       cfg.judge_parse_retries);
      } catch (const ScriptExhausted&) {
        throw;
      } catch (const Error&) {
        // judge down or persistently unparseable: preserve partial annotations
        return abort_run(TrajectoryStatus::Aborted);
      }
      v.run_index = static_cast<int>(i);
      verdicts.push_back(std::move(v));
    }

    StepDecision decision = decide_step(candidates, verdicts, cfg.accept_threshold);
    AnnotatedStep ann;
    ann.verdicts = verdicts;
    ann.chosen_index = decision.chosen_index;
    ann.refined = decision.refined;
    ann.candidates = candidates;
    ann.final_rating = verdicts[decision.chosen_index].rating;

    if (decision.action.is_answer()) {
      Step step{static_cast<int>(t.steps.size()), decision.thought, decision.action,
                std::nullopt};
      ann.chosen = step;
      t.steps.push_back(std::move(step));
      at.annotated_steps.push_back(std::move(ann));
      t.status = TrajectoryStatus::Answered;
      finalize_ratings(at);
      return at;
    }

    if (forced_final) return abort_run(TrajectoryStatus::BudgetExhausted);

    Step step{static_cast<int>(t.steps.size()), decision.thought, decision.action, std::nullopt};
    ++search_steps;
    if (search_steps == cfg.budget) {
      step.observation = Observation{std::string(kSearchLimitNotice), {}, false};
      ann.chosen = step;
      t.steps.push_back(std::move(step));
      at.annotated_steps.push_back(std::move(ann));
      forced_final = true;
      continue;
    }

    try {
      step.observation = detail::observe(env, decision.action.payload);
    } catch (const Error&) {
      return abort_run(TrajectoryStatus::Aborted);
    }
    ann.chosen = step;
    t.steps.push_back(std::move(step));
    at.annotated_steps.push_back(std::move(ann));
  }
}

// --- annotated serialization -------------------------------------------------
// Flat extension of the trajectory schema: trajectory fields at the top level
// plus annotated_steps and the rating summary. `chosen` is implicit: it is the
// aligned trajectory step.

inline ojson candidate_to_json(const StepCandidate& c) {
  ojson j;
  j["thought"] = c.thought;
  j["action"] = action_to_json(c.action);
  j["policy_sample_index"] = c.policy_sample_index;
  return j;
}

inline StepCandidate candidate_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"thought", "action", "policy_sample_index"}, "candidate");
  StepCandidate c;
  c.thought = detail::require_string(j, "thought", "candidate");
  c.action = action_from_json(detail::require(j, "action", "candidate"));
  c.policy_sample_index = detail::require(j, "policy_sample_index", "candidate").get<int>();
  return c;
}

inline ojson verdict_to_json(const JudgeVerdict& v) {
  ojson j;
  j["rating"] = v.rating;
  j["explanation"] = v.explanation;
  j["refined_thought"] = v.refined_thought;
  j["refined_action"] = action_to_json(v.refined_action);
  j["raw"] = v.raw;
  j["run_index"] = v.run_index;
  return j;
}

inline JudgeVerdict verdict_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"rating", "explanation", "refined_thought", "refined_action", "raw", "run_index"},
      "verdict");
  JudgeVerdict v;
  v.rating = detail::require(j, "rating", "verdict").get<int>();
  if (v.rating < 1 || v.rating > 5) throw SchemaViolation("verdict rating outside 1-5");
  v.explanation = detail::require_string(j, "explanation", "verdict");
  v.refined_thought = detail::require_string(j, "refined_thought", "verdict");
  v.refined_action = action_from_json(detail::require(j, "refined_action", "verdict"));
  v.raw = detail::require_string(j, "raw", "verdict");
  v.run_index = detail::require(j, "run_index", "verdict").get<int>();
  return v;
}

inline ojson annotated_step_to_json(const AnnotatedStep& s) {
  ojson j;
  ojson cands = ojson::array();
  for (const auto& c : s.candidates) cands.push_back(candidate_to_json(c));
  j["candidates"] = std::move(cands);
  ojson verdicts = ojson::array();
  for (const auto& v : s.verdicts) verdicts.push_back(verdict_to_json(v));
  j["verdicts"] = std::move(verdicts);
  j["chosen_index"] = s.chosen_index;
  j["refined"] = s.refined;
  j["final_rating"] = s.final_rating;
  j["votes"] = s.votes;
  j["donor_run"] = s.donor_run ? ojson(*s.donor_run) : ojson(nullptr);
  return j;
}

inline AnnotatedStep annotated_step_from_json(const nlohmann::json& j, const Step& chosen) {
  detail::reject_unknown_keys(
      j, {"candidates", "verdicts", "chosen_index", "refined", "final_rating", "votes",
          "donor_run"},
      "annotated_step");
  AnnotatedStep s;
  s.chosen = chosen;
  for (const auto& c : detail::require(j, "candidates", "annotated_step"))
    s.candidates.push_back(candidate_from_json(c));
  for (const auto& v : detail::require(j, "verdicts", "annotated_step"))
    s.verdicts.push_back(verdict_from_json(v));
  s.chosen_index = detail::require(j, "chosen_index", "annotated_step").get<int>();
  s.refined = detail::require(j, "refined", "annotated_step").get<bool>();
  s.final_rating = detail::require(j, "final_rating", "annotated_step").get<int>();
  for (const auto& v : detail::require(j, "votes", "annotated_step"))
    s.votes.push_back(v.get<int>());
  const auto& donor = detail::require(j, "donor_run", "annotated_step");
  if (!donor.is_null()) s.donor_run = donor.get<int>();
  if (s.chosen_index < 0 || s.chosen_index >= static_cast<int>(s.candidates.size()))
    throw SchemaViolation("annotated_step: chosen_index out of range");
  if (s.final_rating < 1 || s.final_rating > 5)
    throw SchemaViolation("annotated_step: final_rating outside 1-5");
  return s;
}

inline ojson annotated_to_json(const AnnotatedTrajectory& at) {
  if (at.annotated_steps.size() != at.trajectory.steps.size())
    throw SchemaViolation("annotated_steps not aligned 1:1 with trajectory steps");
  ojson j = trajectory_to_json(at.trajectory);
  ojson steps = ojson::array();
  for (const auto& s : at.annotated_steps) steps.push_back(annotated_step_to_json(s));
  j["annotated_steps"] = std::move(steps);
  j["correctness"] = at.correctness ? ojson(*at.correctness) : ojson(nullptr);
  j["avg_rating"] = at.avg_rating ? ojson(*at.avg_rating) : ojson(nullptr);
  j["first_rating"] = at.first_rating ? ojson(*at.first_rating) : ojson(nullptr);
  j["last_rating"] = at.last_rating ? ojson(*at.last_rating) : ojson(nullptr);
  return j;
}

inline AnnotatedTrajectory annotated_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("annotated trajectory: not an object");
  nlohmann::json traj = j;
  for (const char* k : {"annotated_steps", "correctness", "avg_rating", "first_rating",
                        "last_rating"})
    traj.erase(k);
  AnnotatedTrajectory at;
  at.trajectory = trajectory_from_json(traj);
  const auto& steps = detail::require(j, "annotated_steps", "annotated trajectory");
  if (!steps.is_array() || steps.size() != at.trajectory.steps.size())
    throw SchemaViolation("annotated_steps not aligned 1:1 with trajectory steps");
  for (size_t i = 0; i < steps.size(); ++i)
    at.annotated_steps.push_back(annotated_step_from_json(steps[i], at.trajectory.steps[i]));
  const auto& correctness = detail::require(j, "correctness", "annotated trajectory");
  if (!correctness.is_null()) at.correctness = correctness.get<bool>();
  auto load_rating = [&](const char* key) -> std::optional<double> {
    const auto& v = detail::require(j, key, "annotated trajectory");
    if (v.is_null()) return std::nullopt;
    double d = v.get<double>();
    if (d < 1.0 || d > 5.0) throw SchemaViolation(std::string(key) + " outside [1,5]");
    return d;
  };
  at.avg_rating = load_rating("avg_rating");
  at.first_rating = load_rating("first_rating");
  at.last_rating = load_rating("last_rating");
  return at;
}

inline std::string serialize_annotated(const AnnotatedTrajectory& at) {
  return annotated_to_json(at).dump();
}

inline AnnotatedTrajectory deserialize_annotated(const std::string& record) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(record);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaViolation(std::string("annotated record is not valid JSON: ") + e.what());
  }
  return annotated_from_json(j);
}

inline std::vector<AnnotatedTrajectory> read_annotated_jsonl(const std::string& path) {
  std::vector<AnnotatedTrajectory> out;
  for (const auto& line : read_lines(path)) out.push_back(deserialize_annotated(line));
  return out;
}

inline void write_annotated_jsonl(const std::string& path,
                                  const std::vector<AnnotatedTrajectory>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(serialize_annotated(r));
  write_lines(path, lines);
}

}  // namespace srr
