#pragma once

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/errors.hpp"

namespace srr {

// Insertion-ordered JSON keeps serialized field order identical to the
// documented schema, which golden-file tests compare byte-for-byte.
using ojson = nlohmann::ordered_json;

inline constexpr int kTrajectorySchemaVersion = 1;

namespace detail {

// Strict loader helper: `allowed` is the exhaustive key set for this object.
inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> allowed,
                                const char* context) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known)
      throw SchemaViolation(std::string(context) + ": unexpected field '" + item.key() + "'");
  }
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* key,
                                     const char* context) {
  auto it = j.find(key);
  if (it == j.end())
    throw SchemaViolation(std::string(context) + ": missing field '" + key + "'");
  return *it;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const char* context) {
  const auto& v = require(j, key, context);
  if (!v.is_string())
    throw SchemaViolation(std::string(context) + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline ojson question_to_json(const Question& q) {
  ojson j;
  j["id"] = q.id;
  j["text"] = q.text;
  j["gold_answer"] = q.gold_answer ? ojson(*q.gold_answer) : ojson(nullptr);
  j["source"] = q.source;
  return j;
}

inline Question question_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("question: not an object");
  detail::reject_unknown_keys(j, {"id", "text", "gold_answer", "source"}, "question");
  Question q;
  q.id = detail::require_string(j, "id", "question");
  q.text = detail::require_string(j, "text", "question");
  const auto& gold = detail::require(j, "gold_answer", "question");
  if (!gold.is_null()) q.gold_answer = gold.get<std::string>();
  q.source = detail::require_string(j, "source", "question");
  return q;
}

inline ojson action_to_json(const Action& a) {
  ojson j;
  j["type"] = a.is_search() ? "search" : "answer";
  j["payload"] = a.payload;
  return j;
}

inline Action action_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("action: not an object");
  detail::reject_unknown_keys(j, {"type", "payload"}, "action");
  std::string type = detail::require_string(j, "type", "action");
  std::string payload = detail::require_string(j, "payload", "action");
  if (type == "search") return Action::search(std::move(payload));
  if (type == "answer") return Action::answer(std::move(payload));
  throw SchemaViolation("action: unknown type '" + type + "'");
}

inline ojson observation_to_json(const Observation& o) {
  ojson j;
  j["text"] = o.text;
  j["source_urls"] = o.source_urls;
  j["truncated"] = o.truncated;
  return j;
}

inline Observation observation_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("observation: not an object");
  detail::reject_unknown_keys(j, {"text", "source_urls", "truncated"}, "observation");
  Observation o;
  o.text = detail::require_string(j, "text", "observation");
  const auto& urls = detail::require(j, "source_urls", "observation");
  if (!urls.is_array()) throw SchemaViolation("observation: source_urls must be an array");
  for (const auto& u : urls) o.source_urls.push_back(u.get<std::string>());
  const auto& trunc = detail::require(j, "truncated", "observation");
  if (!trunc.is_boolean()) throw SchemaViolation("observation: truncated must be a boolean");
  o.truncated = trunc.get<bool>();
  return o;
}

inline ojson step_to_json(const Step& s) {
  ojson j;
  j["index"] = s.index;
  j["thought"] = s.thought;
  j["action"] = action_to_json(s.action);
  j["observation"] = s.observation ? observation_to_json(*s.observation) : ojson(nullptr);
  return j;
}

inline Step step_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("step: not an object");
  detail::reject_unknown_keys(j, {"index", "thought", "action", "observation"}, "step");
  Step s;
  const auto& idx = detail::require(j, "index", "step");
  if (!idx.is_number_integer()) throw SchemaViolation("step: index must be an integer");
  s.index = idx.get<int>();
  s.thought = detail::require_string(j, "thought", "step");
  s.action = action_from_json(detail::require(j, "action", "step"));
  const auto& obs = detail::require(j, "observation", "step");
  if (!obs.is_null()) s.observation = observation_from_json(obs);
  return s;
}

inline ojson trajectory_to_json(const Trajectory& t) {
  validate_trajectory(t);
  ojson j;
  j["schema_version"] = kTrajectorySchemaVersion;
  j["question"] = question_to_json(t.question);
  ojson steps = ojson::array();
  for (const Step& s : t.steps) steps.push_back(step_to_json(s));
  j["steps"] = std::move(steps);
  j["status"] = std::string(to_string(t.status));
  j["budget"] = t.budget;
  j["policy_id"] = t.policy_id;
  j["created_at"] = t.created_at;
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("trajectory: not an object");
  detail::reject_unknown_keys(
      j, {"schema_version", "question", "steps", "status", "budget", "policy_id", "created_at"},
      "trajectory");
  const auto& version = detail::require(j, "schema_version", "trajectory");
  if (!version.is_number_integer() || version.get<int>() != kTrajectorySchemaVersion)
    throw SchemaViolation("trajectory: unsupported schema_version");
  Trajectory t;
  t.question = question_from_json(detail::require(j, "question", "trajectory"));
  const auto& steps = detail::require(j, "steps", "trajectory");
  if (!steps.is_array()) throw SchemaViolation("trajectory: steps must be an array");
  for (const auto& s : steps) t.steps.push_back(step_from_json(s));
  t.status = status_from_string(detail::require_string(j, "status", "trajectory"));
  const auto& budget = detail::require(j, "budget", "trajectory");
  if (!budget.is_number_integer()) throw SchemaViolation("trajectory: budget must be an integer");
  t.budget = budget.get<int>();
  t.policy_id = detail::require_string(j, "policy_id", "trajectory");
  const auto& created = detail::require(j, "created_at", "trajectory");
  if (!created.is_number_integer())
    throw SchemaViolation("trajectory: created_at must be an integer");
  t.created_at = created.get<std::int64_t>();
  validate_trajectory(t);
  return t;
}

inline std::string serialize_trajectory(const Trajectory& t) {
  return trajectory_to_json(t).dump();
}

inline Trajectory deserialize_trajectory(const std::string& record) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(record);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaViolation(std::string("trajectory record is not valid JSON: ") + e.what());
  }
  return trajectory_from_json(j);
}

// --- JSONL file helpers -----------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open file for writing: " + path);
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<Trajectory> read_trajectories_jsonl(const std::string& path) {
  std::vector<Trajectory> out;
  for (const auto& line : read_lines(path)) out.push_back(deserialize_trajectory(line));
  return out;
}

inline void write_trajectories_jsonl(const std::string& path,
                                     const std::vector<Trajectory>& trajectories) {
  std::vector<std::string> lines;
  lines.reserve(trajectories.size());
  for (const auto& t : trajectories) lines.push_back(serialize_trajectory(t));
  write_lines(path, lines);
}

inline std::vector<Question> read_questions_jsonl(const std::string& path) {
  std::vector<Question> out;
  for (const auto& line : read_lines(path)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaViolation(std::string("question record is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw SchemaViolation("question record is not an object");
    detail::reject_unknown_keys(j, {"id", "text", "gold_answer", "source"}, "question");
    Question q;
    q.id = detail::require_string(j, "id", "question");
    q.text = detail::require_string(j, "text", "question");
    if (j.contains("gold_answer") && !j["gold_answer"].is_null())
      q.gold_answer = j["gold_answer"].get<std::string>();
    if (j.contains("source")) q.source = j["source"].get<std::string>();
    if (q.id.empty() || q.text.empty())
      throw SchemaViolation("question id/text must be non-empty");
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace srr
