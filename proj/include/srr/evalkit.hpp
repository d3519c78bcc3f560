#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "srr/core.hpp"
#include "srr/datapipe.hpp"
#include "srr/errors.hpp"
#include "srr/gateway.hpp"
#include "srr/rnr.hpp"

namespace srr {

enum class GraderKind { Exact, Model };

struct Grader {
  GraderKind kind = GraderKind::Exact;
  Endpoint endpoint;  // used by the model grader only

  std::string id() const {
    return kind == GraderKind::Exact ? "exact" : "model:" + endpoint.config.model_id;
  }
};

// Case/whitespace/punctuation-insensitive canonical form for exact grading.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(u)));
    } else if (std::isspace(u)) {
      pending_space = true;
    }
    // punctuation dropped entirely
  }
  return out;
}

inline constexpr std::string_view kModelGraderQuestion =
    "Does the predicted answer match the gold answer? Reply yes/no.";

// First standalone yes/no token of the reply decides; anything else errors
// rather than defaulting (a silent wrong label would poison downstream
// filtering).
inline bool parse_yes_no(const std::string& reply) {
  std::string word;
  for (size_t i = 0; i <= reply.size(); ++i) {
    char c = i < reply.size() ? reply[i] : ' ';
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      continue;
    }
    if (word == "yes") return true;
    if (word == "no") return false;
    word.clear();
  }
  throw GradeParseError("grader reply contains no yes/no token: " + reply);
}

struct GradeRecord {
  std::string question_id;
  std::string predicted;
  std::string gold;
  bool correct = false;
  std::string grader_id;
};

inline bool grade_answer(const Grader& grader, const Question& question,
                         const std::string& predicted) {
  if (!question.gold_answer)
    throw std::invalid_argument("grade_answer requires a gold answer for question " +
                                question.id);
  if (grader.kind == GraderKind::Exact)
    return normalize_answer(predicted) == normalize_answer(*question.gold_answer);

  ChatRequest req;
  req.model_id = grader.endpoint.config.model_id;
  req.messages = {{"user", std::string(kModelGraderQuestion) + "\nQuestion: " + question.text +
                               "\nGold answer: " + *question.gold_answer +
                               "\nPredicted answer: " + predicted}};
  req.temperature = grader.endpoint.config.temperature;
  req.max_tokens = grader.endpoint.config.max_tokens;
  ChatResponse resp;
  try {
    resp = complete(grader.endpoint, req);
  } catch (const ScriptExhausted&) {
    throw;
  } catch (const Error& e) {
    throw GraderUnavailable(std::string("grader endpoint failed: ") + e.what());
  }
  return parse_yes_no(resp.completions.front());
}

// Grades the trajectory's final answer when there is one; BudgetExhausted,
// Malformed, and Aborted trajectories stay ungraded.
inline void grade_and_attach(const Grader& grader, AnnotatedTrajectory& at) {
  auto answer = at.trajectory.final_answer();
  if (!answer || !at.trajectory.question.gold_answer) return;
  at.correctness = grade_answer(grader, at.trajectory.question, *answer);
}

struct PassAt1 {
  double mean = 0.0;
  double stddev = 0.0;  // population std across run accuracies
};

// run_outcomes[r][q]: run r's correctness for question q.
inline PassAt1 pass_at_1(const std::vector<std::vector<bool>>& run_outcomes) {
  if (run_outcomes.empty()) throw EmptyRuns("pass_at_1 requires at least one run");
  size_t n_questions = run_outcomes.front().size();
  if (n_questions == 0) throw EmptyRuns("pass_at_1 requires at least one question");
  for (const auto& run : run_outcomes)
    if (run.size() != n_questions)
      throw LengthMismatch("runs must grade the same question set");

  std::vector<double> accuracies;
  accuracies.reserve(run_outcomes.size());
  for (const auto& run : run_outcomes) {
    size_t correct = 0;
    for (bool b : run) correct += b ? 1 : 0;
    accuracies.push_back(static_cast<double>(correct) / static_cast<double>(n_questions));
  }
  double mean = 0.0;
  for (double a : accuracies) mean += a;
  mean /= static_cast<double>(accuracies.size());
  double var = 0.0;
  for (double a : accuracies) var += (a - mean) * (a - mean);
  var /= static_cast<double>(accuracies.size());
  return {mean, std::sqrt(var)};
}

struct CorrelationStat {
  std::optional<double> r;  // absent when the slice is degenerate
  std::size_t n = 0;

  bool degenerate() const { return !r.has_value(); }
};

struct CorrelationGroup {
  CorrelationStat first;
  CorrelationStat last;
  CorrelationStat avg;
};

struct CorrelationReport {
  CorrelationGroup overall;
  std::map<std::string, CorrelationGroup> per_policy;
  std::size_t n_trajectories = 0;
};

namespace detail {

inline CorrelationStat correlate_stat(const std::vector<double>& values,
                                      const std::vector<bool>& labels) {
  CorrelationStat stat;
  stat.n = values.size();
  try {
    stat.r = point_biserial(values, labels);
  } catch (const DegenerateInput&) {
    stat.r = std::nullopt;  // flagged, never fabricated
  }
  return stat;
}

inline CorrelationGroup correlate_group(const std::vector<const AnnotatedTrajectory*>& records) {
  std::vector<double> firsts, lasts, avgs;
  std::vector<bool> labels;
  for (const auto* r : records) {
    firsts.push_back(*r->first_rating);
    lasts.push_back(*r->last_rating);
    avgs.push_back(*r->avg_rating);
    labels.push_back(*r->correctness);
  }
  CorrelationGroup g;
  g.first = correlate_stat(firsts, labels);
  g.last = correlate_stat(lasts, labels);
  g.avg = correlate_stat(avgs, labels);
  return g;
}

}  // namespace detail

// First/last/average step-rating correlations against trajectory correctness,
// overall and per policy model.
inline CorrelationReport correlation_report(const std::vector<AnnotatedTrajectory>& annotated) {
  for (const auto& r : annotated) {
    if (!r.correctness)
      throw std::invalid_argument("correlation_report requires correctness labels");
    if (!r.avg_rating || !r.first_rating || !r.last_rating)
      throw std::invalid_argument("correlation_report requires at least one rated step");
  }
  CorrelationReport report;
  report.n_trajectories = annotated.size();
  std::vector<const AnnotatedTrajectory*> all;
  std::map<std::string, std::vector<const AnnotatedTrajectory*>> groups;
  for (const auto& r : annotated) {
    all.push_back(&r);
    groups[r.trajectory.policy_id].push_back(&r);
  }
  report.overall = detail::correlate_group(all);
  for (const auto& [policy, members] : groups)
    report.per_policy[policy] = detail::correlate_group(members);
  return report;
}

struct EvalReport {
  std::string benchmark;
  double pass_at_1_mean = 0.0;
  double pass_at_1_std = 0.0;
  int n_runs = 0;
  std::vector<std::string> question_ids;
  std::vector<std::vector<bool>> per_question;  // per_question[q][run]
};

inline EvalReport make_eval_report(std::string benchmark,
                                   std::vector<std::string> question_ids,
                                   const std::vector<std::vector<bool>>& run_outcomes) {
  PassAt1 p = pass_at_1(run_outcomes);
  EvalReport report;
  report.benchmark = std::move(benchmark);
  report.pass_at_1_mean = p.mean;
  report.pass_at_1_std = p.stddev;
  report.n_runs = static_cast<int>(run_outcomes.size());
  report.question_ids = std::move(question_ids);
  report.per_question.assign(run_outcomes.front().size(), {});
  for (size_t q = 0; q < run_outcomes.front().size(); ++q)
    for (const auto& run : run_outcomes) report.per_question[q].push_back(run[q]);
  return report;
}

enum class ReportFormat { Json, Csv };

namespace detail {

inline std::string format_r(const CorrelationStat& stat) {
  if (stat.degenerate()) return "degenerate";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9f", *stat.r);
  return buf;
}

inline ojson stat_to_json(const CorrelationStat& stat) {
  ojson j;
  j["r"] = stat.r ? ojson(*stat.r) : ojson(nullptr);
  j["n"] = stat.n;
  j["degenerate"] = stat.degenerate();
  return j;
}

inline ojson group_to_json(const CorrelationGroup& g) {
  ojson j;
  j["first"] = stat_to_json(g.first);
  j["last"] = stat_to_json(g.last);
  j["avg"] = stat_to_json(g.avg);
  return j;
}

}  // namespace detail

inline std::string report_to_string(const CorrelationReport& report, ReportFormat format) {
  if (format == ReportFormat::Csv) {
    std::string out = "stat,r,n\n";
    out += "first," + detail::format_r(report.overall.first) + "," +
           std::to_string(report.n_trajectories) + "\n";
    out += "last," + detail::format_r(report.overall.last) + "," +
           std::to_string(report.n_trajectories) + "\n";
    out += "avg," + detail::format_r(report.overall.avg) + "," +
           std::to_string(report.n_trajectories) + "\n";
    return out;
  }
  ojson j;
  j["schema_version"] = 1;
  j["type"] = "correlation_report";
  j["n_trajectories"] = report.n_trajectories;
  j["overall"] = detail::group_to_json(report.overall);
  ojson per_policy = ojson::object();
  for (const auto& [policy, group] : report.per_policy)
    per_policy[policy] = detail::group_to_json(group);
  j["per_policy"] = std::move(per_policy);
  return j.dump(2) + "\n";
}

inline std::string report_to_string(const EvalReport& report, ReportFormat format) {
  if (format == ReportFormat::Csv) {
    std::string out = "benchmark,pass_at_1_mean,pass_at_1_std,n_runs\n";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s,%.9f,%.9f,%d\n", report.benchmark.c_str(),
                  report.pass_at_1_mean, report.pass_at_1_std, report.n_runs);
    out += buf;
    return out;
  }
  ojson j;
  j["schema_version"] = 1;
  j["type"] = "eval_report";
  j["benchmark"] = report.benchmark;
  j["pass_at_1_mean"] = report.pass_at_1_mean;
  j["pass_at_1_std"] = report.pass_at_1_std;
  j["n_runs"] = report.n_runs;
  ojson per_question = ojson::array();
  for (size_t q = 0; q < report.per_question.size(); ++q) {
    ojson row;
    row["question_id"] = q < report.question_ids.size() ? report.question_ids[q] : "";
    row["outcomes"] = report.per_question[q];
    per_question.push_back(std::move(row));
  }
  j["per_question"] = std::move(per_question);
  return j.dump(2) + "\n";
}

template <typename Report>
inline void emit_report(const Report& report, const std::string& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open report file for writing: " + path);
  out << report_to_string(report, format);
  if (!out) throw IoError("report write failed: " + path);
}

}  // namespace srr
