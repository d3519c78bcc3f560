#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/judge.hpp"
#include "srr/rnr.hpp"
#include "srr/serialize.hpp"

namespace srr {

struct StepRef {
  std::string trajectory_id;
  int step_index = 0;

  bool operator==(const StepRef&) const = default;
};

struct VotedAnnotation {
  StepRef step_ref;
  int final_rating = 0;
  std::vector<int> votes;
  int donor_run = 0;
  std::string explanation;
  std::string refined_thought;
  Action refined_action;

  bool operator==(const VotedAnnotation&) const = default;
};

// Most frequent rating; among equally frequent ratings the lowest wins
// (conservative: prefer flagging weak steps).
inline int majority_vote(const std::vector<int>& votes) {
  if (votes.empty()) throw std::invalid_argument("majority_vote requires votes");
  int counts[6] = {0, 0, 0, 0, 0, 0};
  for (int v : votes) {
    if (v < 1 || v > 5) throw std::invalid_argument("vote outside 1-5");
    ++counts[v];
  }
  int best = 1;
  for (int r = 2; r <= 5; ++r)
    if (counts[r] > counts[best]) best = r;
  return best;
}

// Self-consistency annotation of an existing trajectory: `runs` independent
// judge samples per step, majority-voted rating, donor run (explanation and
// refinements) drawn seeded-uniformly from the modal runs.
inline AnnotatedTrajectory annotate_with_votes(const Endpoint& judge, const Trajectory& trajectory,
                                               int runs = 5, std::uint64_t seed = 0,
                                               int min_parsed = -1) {
  if (trajectory.status != TrajectoryStatus::Answered &&
      trajectory.status != TrajectoryStatus::BudgetExhausted)
    throw std::invalid_argument("annotate_with_votes requires an Answered or BudgetExhausted "
                                "trajectory");
  if (runs < 1) throw std::invalid_argument("runs must be >= 1");
  if (min_parsed < 0) min_parsed = (runs + 1) / 2;

  std::mt19937_64 rng(seed);
  AnnotatedTrajectory at;
  at.trajectory = trajectory;
  for (size_t j = 0; j < trajectory.steps.size(); ++j) {
    const Step& step = trajectory.steps[j];
    StepCandidate candidate{step.thought, step.action, 0};
    History history(trajectory.steps.data(), j);
    auto verdicts = judge_step_votes(judge, trajectory.question, history, candidate,
                                     static_cast<int>(j) + 1, runs);
    if (static_cast<int>(verdicts.size()) < min_parsed)
      throw InsufficientVotes("step " + std::to_string(j) + ": only " +
                              std::to_string(verdicts.size()) + "/" + std::to_string(runs) +
                              " verdicts parsed");
    std::vector<int> votes;
    for (const auto& v : verdicts) votes.push_back(v.rating);
    int final_rating = majority_vote(votes);

    std::vector<int> modal_positions;
    for (size_t k = 0; k < verdicts.size(); ++k)
      if (verdicts[k].rating == final_rating) modal_positions.push_back(static_cast<int>(k));
    int donor_pos = modal_positions[rng() % modal_positions.size()];

    AnnotatedStep ann;
    ann.chosen = step;
    ann.verdicts = verdicts;
    ann.chosen_index = 0;
    ann.refined = false;
    ann.candidates = {candidate};
    ann.final_rating = final_rating;
    ann.votes = votes;
    ann.donor_run = verdicts[donor_pos].run_index;
    at.annotated_steps.push_back(std::move(ann));
  }
  finalize_ratings(at);
  return at;
}

inline std::vector<VotedAnnotation> extract_voted_annotations(const AnnotatedTrajectory& at) {
  std::vector<VotedAnnotation> out;
  for (size_t j = 0; j < at.annotated_steps.size(); ++j) {
    const AnnotatedStep& s = at.annotated_steps[j];
    if (s.votes.empty() || !s.donor_run) continue;
    const JudgeVerdict* donor = nullptr;
    for (const auto& v : s.verdicts)
      if (v.run_index == *s.donor_run) donor = &v;
    if (!donor) throw SchemaViolation("donor_run does not match any verdict");
    VotedAnnotation va;
    va.step_ref = {trajectory_id(at.trajectory), static_cast<int>(j)};
    va.final_rating = s.final_rating;
    va.votes = s.votes;
    va.donor_run = *s.donor_run;
    va.explanation = donor->explanation;
    va.refined_thought = donor->refined_thought;
    va.refined_action = donor->refined_action;
    out.push_back(std::move(va));
  }
  return out;
}

// r_pb = ((M1 - M0) / s_n) * sqrt(p * q), population standard deviation.
// Equals the Pearson correlation of values against 0/1-encoded labels.
inline double point_biserial(const std::vector<double>& values, const std::vector<bool>& labels) {
  size_t n = values.size();
  if (n < 2) throw DegenerateInput("point_biserial requires at least 2 values");
  if (labels.size() != n) throw DegenerateInput("values/labels length mismatch");
  size_t n1 = 0;
  double sum = 0.0, sum1 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sum += values[i];
    if (labels[i]) {
      ++n1;
      sum1 += values[i];
    }
  }
  size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) throw DegenerateInput("both label classes must be present");
  double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (var == 0.0) throw DegenerateInput("values have zero variance");
  double m1 = sum1 / static_cast<double>(n1);
  double m0 = (sum - sum1) / static_cast<double>(n0);
  double p = static_cast<double>(n1) / static_cast<double>(n);
  double q = static_cast<double>(n0) / static_cast<double>(n);
  double r = (m1 - m0) / std::sqrt(var) * std::sqrt(p * q);
  return std::clamp(r, -1.0, 1.0);
}

struct FilterConfig {
  double target_rpb = 0.7;
  double max_removed_fraction = 0.5;
};

struct FilterRemoval {
  std::string trajectory_id;
  double avg_rating = 0.0;
  bool correct = false;
  double mean_at_removal = 0.0;  // kept-set mean this record conflicted with
  double rpb_after = 0.0;
};

struct FilterResult {
  std::vector<AnnotatedTrajectory> kept;
  std::vector<AnnotatedTrajectory> removed;
  double rpb_before = 0.0;
  double rpb_final = 0.0;
  std::vector<FilterRemoval> removals;  // in removal order
  bool target_met = false;
};

// Greedy conflict removal: while the dataset statistic is below target, drop
// the record that most disagrees with its class (correct below the kept-set
// mean, incorrect above it), farthest-from-mean first. Stops at the target,
// when no conflicts remain, or at the removal-fraction cap; a stop below
// target is reported via target_met=false rather than thrown.
inline FilterResult filter_by_correlation(std::vector<AnnotatedTrajectory> records,
                                          const FilterConfig& cfg) {
  if (cfg.target_rpb < -1.0 || cfg.target_rpb > 1.0)
    throw std::invalid_argument("target_rpb must be in [-1, 1]");
  for (const auto& r : records) {
    if (!r.correctness) throw std::invalid_argument("record missing correctness label");
    if (!r.avg_rating) throw std::invalid_argument("record missing avg_rating");
  }
  size_t total = records.size();

  auto rpb_of = [](const std::vector<AnnotatedTrajectory>& recs) {
    std::vector<double> values;
    std::vector<bool> labels;
    values.reserve(recs.size());
    for (const auto& r : recs) {
      values.push_back(*r.avg_rating);
      labels.push_back(*r.correctness);
    }
    return point_biserial(values, labels);  // DegenerateInput propagates
  };

  FilterResult result;
  result.kept = std::move(records);
  result.rpb_before = rpb_of(result.kept);
  result.rpb_final = result.rpb_before;

  while (result.rpb_final < cfg.target_rpb) {
    if (static_cast<double>(result.removed.size() + 1) >
        cfg.max_removed_fraction * static_cast<double>(total))
      break;  // removal budget exhausted

    double mean = 0.0;
    for (const auto& r : result.kept) mean += *r.avg_rating;
    mean /= static_cast<double>(result.kept.size());

    int worst = -1;
    double worst_dist = -1.0;
    std::string worst_id;
    for (size_t i = 0; i < result.kept.size(); ++i) {
      const auto& r = result.kept[i];
      bool conflict = (*r.correctness && *r.avg_rating < mean) ||
                      (!*r.correctness && *r.avg_rating > mean);
      if (!conflict) continue;
      double dist = std::abs(*r.avg_rating - mean);
      std::string id = trajectory_id(r.trajectory);
      if (dist > worst_dist || (dist == worst_dist && id < worst_id)) {
        worst = static_cast<int>(i);
        worst_dist = dist;
        worst_id = id;
      }
    }
    if (worst < 0) break;  // no conflicts left

    // Evaluate before committing: a removal that empties a class or flattens
    // the ratings would leave the statistic undefined, so stop instead.
    std::vector<double> values;
    std::vector<bool> labels;
    for (size_t i = 0; i < result.kept.size(); ++i) {
      if (static_cast<int>(i) == worst) continue;
      values.push_back(*result.kept[i].avg_rating);
      labels.push_back(*result.kept[i].correctness);
    }
    double rpb_after = 0.0;
    try {
      rpb_after = point_biserial(values, labels);
    } catch (const DegenerateInput&) {
      break;
    }

    FilterRemoval removal;
    removal.trajectory_id = worst_id;
    removal.avg_rating = *result.kept[worst].avg_rating;
    removal.correct = *result.kept[worst].correctness;
    removal.mean_at_removal = mean;
    removal.rpb_after = rpb_after;
    result.removed.push_back(std::move(result.kept[worst]));
    result.kept.erase(result.kept.begin() + worst);
    result.rpb_final = rpb_after;
    result.removals.push_back(std::move(removal));
  }
  result.target_met = result.rpb_final >= cfg.target_rpb;
  return result;
}

struct RebalancePolicy {
  std::size_t high_pool_cap = 10000;    // pooled cap for ratings 3-5
  int rating2_upsample_factor = 3;
  std::size_t negatives_count = 10000;  // consumed by synthesize_negatives
  std::uint64_t rng_seed = 0;
};

namespace detail {

// Partial Fisher-Yates with explicit modulo draws: bit-reproducible across
// standard libraries, unlike std::sample/std::shuffle.
inline std::vector<size_t> seeded_subsample(size_t population, size_t take, std::mt19937_64& rng) {
  std::vector<size_t> idx(population);
  std::iota(idx.begin(), idx.end(), size_t{0});
  if (take >= population) return idx;
  for (size_t i = 0; i < take; ++i) {
    size_t j = i + static_cast<size_t>(rng() % (population - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

}  // namespace detail

// Class rebalance: seeded uniform subsample of the pooled 3-5 ratings down to
// high_pool_cap, rating-2 items duplicated to appear exactly `factor` times,
// rating-1 passed through. Output order is stable by (rating, original index).
inline std::vector<VotedAnnotation> rebalance(const std::vector<VotedAnnotation>& steps,
                                              const RebalancePolicy& policy) {
  if (steps.empty()) throw std::invalid_argument("rebalance requires steps");
  if (policy.rating2_upsample_factor < 1)
    throw std::invalid_argument("rating2_upsample_factor must be >= 1");

  std::vector<size_t> high_pool;
  for (size_t i = 0; i < steps.size(); ++i)
    if (steps[i].final_rating >= 3) high_pool.push_back(i);

  std::mt19937_64 rng(policy.rng_seed);
  std::vector<size_t> keep_positions =
      detail::seeded_subsample(high_pool.size(), policy.high_pool_cap, rng);
  std::vector<bool> keep_high(steps.size(), false);
  for (size_t pos : keep_positions) keep_high[high_pool[pos]] = true;

  struct Tagged {
    int rating;
    size_t original_index;
    const VotedAnnotation* item;
  };
  std::vector<Tagged> out;
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    if (s.final_rating == 1) {
      out.push_back({1, i, &s});
    } else if (s.final_rating == 2) {
      for (int k = 0; k < policy.rating2_upsample_factor; ++k) out.push_back({2, i, &s});
    } else if (keep_high[i]) {
      out.push_back({s.final_rating, i, &s});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Tagged& a, const Tagged& b) {
    if (a.rating != b.rating) return a.rating < b.rating;
    return a.original_index < b.original_index;
  });
  std::vector<VotedAnnotation> result;
  result.reserve(out.size());
  for (const auto& t : out) result.push_back(*t.item);
  return result;
}

// Rating-1 negatives: pair a seeded-random history cut from one trajectory
// with a step stolen from a different trajectory about a different question,
// then let the judge rate the mismatch.
inline std::vector<VotedAnnotation> synthesize_negatives(
    const std::vector<Trajectory>& trajectories, std::size_t count, const Endpoint& judge,
    std::uint64_t seed, int judge_parse_retries = 2) {
  std::vector<const Trajectory*> usable;
  for (const auto& t : trajectories)
    if (!t.steps.empty()) usable.push_back(&t);
  bool two_questions = false;
  for (size_t i = 1; i < usable.size(); ++i)
    if (usable[i]->question.id != usable[0]->question.id) two_questions = true;
  if (!two_questions)
    throw std::invalid_argument("synthesize_negatives requires trajectories about at least two "
                                "distinct questions");

  std::mt19937_64 rng(seed);
  std::vector<VotedAnnotation> out;
  out.reserve(count);
  while (out.size() < count) {
    const Trajectory& a = *usable[rng() % usable.size()];
    const Trajectory* b = nullptr;
    do {
      b = usable[rng() % usable.size()];
    } while (b->question.id == a.question.id);
    int cut = static_cast<int>(rng() % (a.steps.size() + 1));  // history may be empty
    const Step& stolen = b->steps[rng() % b->steps.size()];

    StepCandidate candidate{stolen.thought, stolen.action, 0};
    History history(a.steps.data(), static_cast<size_t>(cut));
    JudgeVerdict v =
        judge_step(judge, a.question, history, candidate, cut + 1, judge_parse_retries);

    VotedAnnotation va;
    va.step_ref = {"neg:" + trajectory_id(a) + "+" + trajectory_id(*b), cut};
    va.final_rating = v.rating;
    va.votes = {v.rating};
    va.donor_run = 0;
    va.explanation = v.explanation;
    va.refined_thought = v.refined_thought;
    va.refined_action = v.refined_action;
    out.push_back(std::move(va));
  }
  return out;
}

// --- voted-annotation JSONL ---------------------------------------------------

inline ojson voted_annotation_to_json(const VotedAnnotation& va) {
  ojson j;
  j["schema_version"] = 1;
  j["step_ref"] = ojson{{"trajectory_id", va.step_ref.trajectory_id},
                        {"step_index", va.step_ref.step_index}};
  j["final_rating"] = va.final_rating;
  j["votes"] = va.votes;
  j["donor_run"] = va.donor_run;
  j["explanation"] = va.explanation;
  j["refined_thought"] = va.refined_thought;
  j["refined_action"] = action_to_json(va.refined_action);
  return j;
}

inline VotedAnnotation voted_annotation_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"schema_version", "step_ref", "final_rating", "votes", "donor_run",
                               "explanation", "refined_thought", "refined_action"},
                              "voted_annotation");
  VotedAnnotation va;
  const auto& ref = detail::require(j, "step_ref", "voted_annotation");
  va.step_ref.trajectory_id = detail::require_string(ref, "trajectory_id", "step_ref");
  va.step_ref.step_index = detail::require(ref, "step_index", "step_ref").get<int>();
  va.final_rating = detail::require(j, "final_rating", "voted_annotation").get<int>();
  if (va.final_rating < 1 || va.final_rating > 5)
    throw SchemaViolation("voted_annotation: final_rating outside 1-5");
  for (const auto& v : detail::require(j, "votes", "voted_annotation"))
    va.votes.push_back(v.get<int>());
  va.donor_run = detail::require(j, "donor_run", "voted_annotation").get<int>();
  va.explanation = detail::require_string(j, "explanation", "voted_annotation");
  va.refined_thought = detail::require_string(j, "refined_thought", "voted_annotation");
  va.refined_action = action_from_json(detail::require(j, "refined_action", "voted_annotation"));
  return va;
}

// --- SFT export and iteration merge -------------------------------------------

inline constexpr int kSftSchemaVersion = 1;

struct FilterDescription {
  std::string name;
  nlohmann::json params;
};

struct DatasetManifest {
  int iteration = 0;
  std::vector<std::string> source_files;
  std::string dataset_file;
  std::map<int, std::size_t> rating_counts;            // annotated-step histogram
  std::map<std::string, std::size_t> status_counts;    // per input trajectory status
  std::size_t kept = 0;
  std::size_t dropped_incorrect = 0;
  std::size_t dropped_malformed = 0;
  std::size_t dropped_aborted = 0;
  std::size_t dropped_budget_exhausted = 0;
  std::size_t dropped_ungraded = 0;
  std::vector<FilterDescription> filters_applied;
  std::optional<double> rpb_before;
  std::optional<double> rpb_after;
  std::int64_t created_at = 0;
  bool empty_export = false;
  std::map<int, std::size_t> per_iteration_counts;  // populated by merge
};

inline ojson manifest_to_json(const DatasetManifest& m) {
  ojson j;
  j["schema_version"] = kSftSchemaVersion;
  j["iteration"] = m.iteration;
  j["source_files"] = m.source_files;
  j["dataset_file"] = m.dataset_file;
  ojson ratings = ojson::object();
  for (const auto& [r, c] : m.rating_counts) ratings[std::to_string(r)] = c;
  ojson statuses = ojson::object();
  for (const auto& [s, c] : m.status_counts) statuses[s] = c;
  j["counts"] = ojson{{"ratings", std::move(ratings)},
                      {"statuses", std::move(statuses)},
                      {"kept", m.kept},
                      {"dropped_incorrect", m.dropped_incorrect},
                      {"dropped_malformed", m.dropped_malformed},
                      {"dropped_aborted", m.dropped_aborted},
                      {"dropped_budget_exhausted", m.dropped_budget_exhausted},
                      {"dropped_ungraded", m.dropped_ungraded}};
  ojson filters = ojson::array();
  for (const auto& f : m.filters_applied)
    filters.push_back(ojson{{"name", f.name}, {"params", f.params}});
  j["filters_applied"] = std::move(filters);
  j["rpb_before"] = m.rpb_before ? ojson(*m.rpb_before) : ojson(nullptr);
  j["rpb_after"] = m.rpb_after ? ojson(*m.rpb_after) : ojson(nullptr);
  j["created_at"] = m.created_at;
  j["empty_export"] = m.empty_export;
  ojson per_iter = ojson::object();
  for (const auto& [i, c] : m.per_iteration_counts) per_iter[std::to_string(i)] = c;
  j["per_iteration_counts"] = std::move(per_iter);
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.iteration = detail::require(j, "iteration", "manifest").get<int>();
  for (const auto& f : detail::require(j, "source_files", "manifest"))
    m.source_files.push_back(f.get<std::string>());
  m.dataset_file = detail::require_string(j, "dataset_file", "manifest");
  const auto& counts = detail::require(j, "counts", "manifest");
  for (const auto& item : counts["ratings"].items())
    m.rating_counts[std::stoi(item.key())] = item.value().get<std::size_t>();
  for (const auto& item : counts["statuses"].items())
    m.status_counts[item.key()] = item.value().get<std::size_t>();
  m.kept = counts.value("kept", std::size_t{0});
  m.dropped_incorrect = counts.value("dropped_incorrect", std::size_t{0});
  m.dropped_malformed = counts.value("dropped_malformed", std::size_t{0});
  m.dropped_aborted = counts.value("dropped_aborted", std::size_t{0});
  m.dropped_budget_exhausted = counts.value("dropped_budget_exhausted", std::size_t{0});
  m.dropped_ungraded = counts.value("dropped_ungraded", std::size_t{0});
  for (const auto& f : detail::require(j, "filters_applied", "manifest"))
    m.filters_applied.push_back({f["name"].get<std::string>(), f["params"]});
  const auto& before = detail::require(j, "rpb_before", "manifest");
  if (!before.is_null()) m.rpb_before = before.get<double>();
  const auto& after = detail::require(j, "rpb_after", "manifest");
  if (!after.is_null()) m.rpb_after = after.get<double>();
  m.created_at = detail::require(j, "created_at", "manifest").get<std::int64_t>();
  m.empty_export = detail::require(j, "empty_export", "manifest").get<bool>();
  if (j.contains("per_iteration_counts"))
    for (const auto& item : j["per_iteration_counts"].items())
      m.per_iteration_counts[std::stoi(item.key())] = item.value().get<std::size_t>();
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  write_lines(path, {manifest_to_json(m).dump(2)});
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaViolation(std::string("manifest is not valid JSON: ") + e.what());
  }
  return manifest_from_json(j);
}

// One trajectory as a chat-format training record. Assistant turns are the
// policy's own emission format, so parse_model_output reconstructs them; meta
// carries everything messages cannot (question record, status, budget,
// observation urls/flags).
inline ojson sft_record(const AnnotatedTrajectory& at, int iteration,
                        const std::string& system_prompt) {
  const Trajectory& t = at.trajectory;
  ojson messages = ojson::array();
  messages.push_back({{"role", "system"}, {"content", system_prompt}});
  messages.push_back({{"role", "user"}, {"content", t.question.text}});
  ojson obs_meta = ojson::array();
  for (const Step& s : t.steps) {
    messages.push_back(
        {{"role", "assistant"}, {"content", s.thought + "\n" + render_action(s.action)}});
    if (s.observation) {
      std::string obs = std::string(kBeginSearchResult) + s.observation->text +
                        std::string(kEndSearchResult);
      messages.push_back({{"role", "tool"}, {"content", obs}});
      obs_meta.push_back(ojson{{"step_index", s.index},
                               {"source_urls", s.observation->source_urls},
                               {"truncated", s.observation->truncated}});
    }
  }
  ojson meta;
  meta["question_id"] = t.question.id;
  meta["iteration"] = iteration;
  meta["question"] = question_to_json(t.question);
  meta["status"] = std::string(to_string(t.status));
  meta["budget"] = t.budget;
  meta["policy_id"] = t.policy_id;
  meta["created_at"] = t.created_at;
  meta["observation_meta"] = std::move(obs_meta);
  ojson j;
  j["messages"] = std::move(messages);
  j["meta"] = std::move(meta);
  return j;
}

// Inverse of sft_record: rebuilds the source trajectory from the message
// sequence plus meta.
inline Trajectory trajectory_from_sft_record(const nlohmann::json& record) {
  const auto& messages = detail::require(record, "messages", "sft record");
  const auto& meta = detail::require(record, "meta", "sft record");
  if (!messages.is_array() || messages.size() < 2)
    throw SchemaViolation("sft record: messages must hold system + user turns");

  Trajectory t;
  t.question = question_from_json(detail::require(meta, "question", "sft meta"));
  t.status = status_from_string(detail::require_string(meta, "status", "sft meta"));
  t.budget = detail::require(meta, "budget", "sft meta").get<int>();
  t.policy_id = detail::require_string(meta, "policy_id", "sft meta");
  t.created_at = detail::require(meta, "created_at", "sft meta").get<std::int64_t>();

  std::map<int, std::pair<std::vector<std::string>, bool>> obs_extra;
  for (const auto& om : detail::require(meta, "observation_meta", "sft meta")) {
    std::vector<std::string> urls;
    for (const auto& u : om["source_urls"]) urls.push_back(u.get<std::string>());
    obs_extra[om["step_index"].get<int>()] = {std::move(urls), om["truncated"].get<bool>()};
  }

  size_t i = 2;  // skip system + user
  while (i < messages.size()) {
    const auto& m = messages[i];
    if (m["role"].get<std::string>() != "assistant")
      throw SchemaViolation("sft record: expected assistant turn at message " +
                            std::to_string(i));
    ParsedOutput parsed = parse_model_output(m["content"].get<std::string>());
    Step step{static_cast<int>(t.steps.size()), parsed.thought, parsed.action, std::nullopt};
    ++i;
    if (parsed.action.is_search()) {
      if (i >= messages.size() || messages[i]["role"].get<std::string>() != "tool")
        throw SchemaViolation("sft record: search turn without tool observation");
      std::string content = messages[i]["content"].get<std::string>();
      if (content.rfind(kBeginSearchResult, 0) != 0 ||
          content.size() < kBeginSearchResult.size() + kEndSearchResult.size() ||
          content.compare(content.size() - kEndSearchResult.size(), kEndSearchResult.size(),
                          kEndSearchResult) != 0)
        throw SchemaViolation("sft record: tool content not wrapped in result tags");
      Observation obs;
      obs.text = content.substr(kBeginSearchResult.size(),
                                content.size() - kBeginSearchResult.size() -
                                    kEndSearchResult.size());
      auto it = obs_extra.find(step.index);
      if (it != obs_extra.end()) {
        obs.source_urls = it->second.first;
        obs.truncated = it->second.second;
      }
      step.observation = std::move(obs);
      ++i;
    }
    t.steps.push_back(std::move(step));
  }
  validate_trajectory(t);
  return t;
}

inline ojson sft_header(int iteration, std::int64_t created_at) {
  ojson j;
  j["schema_version"] = kSftSchemaVersion;
  j["type"] = "sft_export";
  j["iteration"] = iteration;
  j["created_at"] = created_at;
  return j;
}

// Drops incorrect, malformed, aborted, budget-exhausted, and ungraded
// trajectories; writes the survivors as chat-format JSONL (header line first)
// and returns the filled-in manifest. A zero-survivor export still writes the
// header and flags empty_export.
inline DatasetManifest export_sft(const std::vector<AnnotatedTrajectory>& trajectories,
                                  DatasetManifest manifest, const std::string& out_path,
                                  const std::string& system_prompt =
                                      std::string(kDefaultSystemPromptV1)) {
  std::vector<std::string> lines;
  lines.push_back(sft_header(manifest.iteration, manifest.created_at).dump());
  for (const auto& at : trajectories) {
    const Trajectory& t = at.trajectory;
    ++manifest.status_counts[std::string(to_string(t.status))];
    for (const auto& s : at.annotated_steps) ++manifest.rating_counts[s.final_rating];
    if (t.status == TrajectoryStatus::Malformed) {
      ++manifest.dropped_malformed;
      continue;
    }
    if (t.status == TrajectoryStatus::Aborted) {
      ++manifest.dropped_aborted;
      continue;
    }
    if (t.status == TrajectoryStatus::BudgetExhausted) {
      ++manifest.dropped_budget_exhausted;
      continue;
    }
    if (!at.correctness) {
      ++manifest.dropped_ungraded;
      continue;
    }
    if (!*at.correctness) {
      ++manifest.dropped_incorrect;
      continue;
    }
    ++manifest.kept;
    lines.push_back(sft_record(at, manifest.iteration, system_prompt).dump());
  }
  manifest.empty_export = manifest.kept == 0;
  manifest.dataset_file = out_path;
  write_lines(out_path, lines);
  return manifest;
}

inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Concatenates exported datasets across iterations, deduplicating by
// (question id, content hash of the messages array); first occurrence wins.
inline DatasetManifest merge_iterations(const std::vector<DatasetManifest>& manifests,
                                        const std::string& out_path) {
  if (manifests.empty()) throw std::invalid_argument("merge_iterations requires manifests");
  std::map<int, const DatasetManifest*> by_iteration;
  for (const auto& m : manifests) {
    if (by_iteration.count(m.iteration))
      throw DuplicateIteration("two manifests share iteration index " +
                               std::to_string(m.iteration));
    by_iteration[m.iteration] = &m;
  }

  DatasetManifest merged;
  merged.iteration = by_iteration.rbegin()->first;
  merged.created_at = manifests.front().created_at;
  std::vector<std::string> lines;
  lines.push_back(sft_header(merged.iteration, merged.created_at).dump());

  std::map<std::pair<std::string, std::uint64_t>, bool> seen;
  for (const auto& [iteration, manifest] : by_iteration) {
    merged.source_files.push_back(manifest->dataset_file);
    std::size_t kept_here = 0;
    for (const auto& line : read_lines(manifest->dataset_file)) {
      nlohmann::json j = nlohmann::json::parse(line);
      if (j.contains("type") && j["type"] == "sft_export") continue;  // header line
      std::string qid = j["meta"]["question_id"].get<std::string>();
      std::uint64_t hash = fnv1a64(j["messages"].dump());
      if (seen.emplace(std::make_pair(qid, hash), true).second) {
        lines.push_back(line);
        ++kept_here;
      }
    }
    merged.per_iteration_counts[iteration] = kept_here;
    merged.kept += kept_here;
    for (const auto& [r, c] : manifest->rating_counts) merged.rating_counts[r] += c;
    for (const auto& [s, c] : manifest->status_counts) merged.status_counts[s] += c;
  }
  merged.filters_applied.push_back(
      {"merge_iterations", nlohmann::json{{"inputs", merged.source_files.size()}}});
  merged.empty_export = merged.kept == 0;
  merged.dataset_file = out_path;
  write_lines(out_path, lines);
  return merged;
}

}  // namespace srr
