// srr: search-integrated reasoning pipelines behind one subcommand-style CLI.
// run -> refine -> annotate -> filter -> rebalance -> export -> merge -> eval.

#include <atomic>
#include <condition_variable>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "srr/config.hpp"
#include "srr/srr.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

std::atomic<bool> g_interrupted{false};

void handle_interrupt(int) { g_interrupted = true; }

struct CommonOpts {
  std::string config_path;
};

srr::AppConfig load_app_config(const CommonOpts& opts) {
  if (!opts.config_path.empty()) return srr::load_config(opts.config_path);
  return srr::AppConfig{};
}

// Bounded worker pool that preserves input order in the output file and
// flushes each finished line immediately, so long runs survive crashes and
// interrupts with a valid prefix.
class OrderedJsonlWriter {
 public:
  OrderedJsonlWriter(const std::string& path, size_t total) : total_(total) {
    out_.open(path, std::ios::binary);
    if (!out_) throw srr::IoError("cannot open output file: " + path);
    results_.resize(total);
  }

  void submit(size_t index, std::string line) {
    std::unique_lock<std::mutex> lock(mutex_);
    results_[index] = std::move(line);
    flush_ready(lock);
  }

  void skip(size_t index) { submit(index, ""); }

  size_t written() const { return written_; }

 private:
  void flush_ready(std::unique_lock<std::mutex>&) {
    while (next_ < total_ && results_[next_].has_value()) {
      if (!results_[next_]->empty()) {
        out_ << *results_[next_] << '\n';
        out_.flush();
        ++written_;
      }
      results_[next_].reset();
      ++next_;
    }
  }

  std::ofstream out_;
  size_t total_;
  std::vector<std::optional<std::string>> results_;
  size_t next_ = 0;
  std::atomic<size_t> written_{0};
  std::mutex mutex_;
};

// Runs `work(i)` for i in [0, total) across `parallel` threads. Stops handing
// out new work on interrupt or after the first hard error; returns the first
// error message if any.
std::optional<std::string> run_pool(size_t total, int parallel,
                                    const std::function<void(size_t)>& work) {
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::optional<std::string> first_error;
  auto worker = [&] {
    for (;;) {
      if (g_interrupted) return;
      {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (first_error) return;
      }
      size_t i = next.fetch_add(1);
      if (i >= total) return;
      try {
        work(i);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = e.what();
        return;
      }
    }
  };
  if (parallel <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int i = 0; i < parallel; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  return first_error;
}

std::string manifest_path_for(const srr::AppConfig& cfg, const std::string& out_path) {
  if (cfg.paths.manifest_dir.empty()) return out_path + ".manifest.json";
  std::filesystem::create_directories(cfg.paths.manifest_dir);
  return (std::filesystem::path(cfg.paths.manifest_dir) /
          (std::filesystem::path(out_path).filename().string() + ".manifest.json"))
      .string();
}

srr::Grader make_grader(const srr::AppConfig& cfg, const std::string& kind) {
  srr::Grader grader;
  if (kind == "exact") {
    grader.kind = srr::GraderKind::Exact;
  } else if (kind == "model") {
    grader.kind = srr::GraderKind::Model;
    grader.endpoint = srr::make_endpoint(cfg.grader, "grader");
  } else {
    throw srr::ConfigError("unknown grader '" + kind + "' (expected exact|model)");
  }
  return grader;
}

srr::ReportFormat format_for(const std::string& path, const std::string& override_format) {
  if (override_format == "json") return srr::ReportFormat::Json;
  if (override_format == "csv") return srr::ReportFormat::Csv;
  if (!override_format.empty())
    throw srr::ConfigError("unknown report format '" + override_format + "'");
  return path.size() >= 4 && path.substr(path.size() - 4) == ".csv" ? srr::ReportFormat::Csv
                                                                    : srr::ReportFormat::Json;
}

// --- subcommands -------------------------------------------------------------

int cmd_run(const CommonOpts& common, const std::string& questions_path,
            const std::string& out_path, int budget_override, int parallel) {
  auto cfg = load_app_config(common);
  auto questions = srr::read_questions_jsonl(questions_path);
  auto policy = srr::make_endpoint(cfg.policy, "policy");
  auto env = srr::make_search_environment(cfg);

  srr::ReactConfig react;
  react.budget = budget_override > 0 ? budget_override : cfg.react.budget;
  react.policy = policy;
  react.system_prompt = srr::load_system_prompt(cfg.react);
  react.force_answer_on_exhaustion = cfg.react.force_answer_on_exhaustion;
  react.max_parse_retries = cfg.react.max_parse_retries;
  react.clock = cfg.clock();

  OrderedJsonlWriter writer(out_path, questions.size());
  std::atomic<size_t> aborted{0};
  auto error = run_pool(questions.size(), parallel, [&](size_t i) {
    auto t = srr::run_react(questions[i], *env, react);
    if (t.status == srr::TrajectoryStatus::Aborted) ++aborted;
    writer.submit(i, srr::serialize_trajectory(t));
  });
  if (error) {
    std::cerr << "srr: error: run: " << *error << "\n";
    return 1;
  }
  if (g_interrupted) {
    std::cerr << "srr: interrupted; " << writer.written() << " trajectories flushed\n";
    return 1;
  }
  if (aborted > 0) {
    std::cerr << "srr: error: " << aborted << " trajectories aborted (endpoint or "
              << "environment failure); partial outputs flushed\n";
    return 1;
  }
  return 0;
}

int cmd_refine(const CommonOpts& common, const std::string& questions_path,
               const std::string& out_path, int n_override, int threshold_override,
               int budget_override, int parallel, const std::string& grader_kind) {
  auto cfg = load_app_config(common);
  auto questions = srr::read_questions_jsonl(questions_path);
  auto env = srr::make_search_environment(cfg);

  srr::RnRConfig rnr;
  rnr.n_candidates = n_override > 0 ? n_override : cfg.rnr.n_datagen;
  rnr.accept_threshold = threshold_override > 0 ? threshold_override : cfg.rnr.accept_threshold;
  rnr.budget = budget_override > 0 ? budget_override : cfg.react.budget;
  rnr.policy = srr::make_endpoint(cfg.policy, "policy");
  rnr.judge = srr::make_endpoint(cfg.judge, "judge");
  rnr.system_prompt = srr::load_system_prompt(cfg.react);
  rnr.clock = cfg.clock();

  std::optional<srr::Grader> grader;
  if (grader_kind != "none") grader = make_grader(cfg, grader_kind);

  OrderedJsonlWriter writer(out_path, questions.size());
  std::atomic<size_t> aborted{0};
  auto error = run_pool(questions.size(), parallel, [&](size_t i) {
    auto at = srr::run_rate_refine(questions[i], *env, rnr);
    if (at.trajectory.status == srr::TrajectoryStatus::Aborted) ++aborted;
    if (grader) srr::grade_and_attach(*grader, at);
    writer.submit(i, srr::serialize_annotated(at));
  });
  if (error) {
    std::cerr << "srr: error: refine: " << *error << "\n";
    return 1;
  }
  if (g_interrupted) {
    std::cerr << "srr: interrupted; " << writer.written() << " trajectories flushed\n";
    return 1;
  }
  if (aborted > 0) {
    std::cerr << "srr: error: " << aborted << " trajectories aborted; partial outputs "
              << "flushed\n";
    return 1;
  }
  return 0;
}

int cmd_annotate(const CommonOpts& common, const std::string& trajectories_path,
                 const std::string& out_path, int runs_override,
                 const std::string& grader_kind) {
  auto cfg = load_app_config(common);
  auto trajectories = srr::read_trajectories_jsonl(trajectories_path);
  auto judge = srr::make_endpoint(cfg.judge, "judge");
  int runs = runs_override > 0 ? runs_override : cfg.datapipe.annotation_runs;

  std::optional<srr::Grader> grader;
  if (grader_kind != "none") grader = make_grader(cfg, grader_kind);

  OrderedJsonlWriter writer(out_path, trajectories.size());
  size_t skipped = 0;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    const auto& t = trajectories[i];
    if (t.status != srr::TrajectoryStatus::Answered &&
        t.status != srr::TrajectoryStatus::BudgetExhausted) {
      ++skipped;
      writer.skip(i);
      continue;
    }
    auto at = srr::annotate_with_votes(judge, t, runs, cfg.seed + i);
    if (grader) srr::grade_and_attach(*grader, at);
    writer.submit(i, srr::serialize_annotated(at));
  }
  if (skipped > 0)
    std::cerr << "srr: annotate: skipped " << skipped
              << " malformed/aborted trajectories\n";
  return 0;
}

int cmd_filter(const CommonOpts& common, const std::string& annotated_path,
               const std::string& out_path, const std::string& removed_path,
               double target_override, double max_removed_override) {
  auto cfg = load_app_config(common);
  auto records = srr::read_annotated_jsonl(annotated_path);
  srr::FilterConfig fc;
  fc.target_rpb = target_override > -2.0 ? target_override : cfg.datapipe.target_rpb;
  fc.max_removed_fraction =
      max_removed_override >= 0.0 ? max_removed_override : cfg.datapipe.max_removed_fraction;

  auto result = srr::filter_by_correlation(std::move(records), fc);
  srr::write_annotated_jsonl(out_path, result.kept);
  if (!removed_path.empty()) srr::write_annotated_jsonl(removed_path, result.removed);

  srr::ojson summary;
  summary["rpb_before"] = result.rpb_before;
  summary["rpb_final"] = result.rpb_final;
  summary["kept"] = result.kept.size();
  summary["removed"] = result.removed.size();
  summary["target_met"] = result.target_met;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_rebalance(const CommonOpts& common, const std::string& annotated_path,
                  const std::string& out_path, const std::string& preset,
                  std::uint64_t seed_override, bool seed_set, long negatives,
                  const std::string& trajectories_path) {
  auto cfg = load_app_config(common);
  if (!preset.empty())
    srr::apply_rebalance_preset(cfg.datapipe.rebalance, preset, "--preset");

  std::vector<srr::VotedAnnotation> steps;
  for (const auto& at : srr::read_annotated_jsonl(annotated_path)) {
    auto vas = srr::extract_voted_annotations(at);
    steps.insert(steps.end(), vas.begin(), vas.end());
  }
  if (steps.empty())
    throw srr::Error("no voted annotations found in " + annotated_path +
                     " (run `srr annotate` first)");

  srr::RebalancePolicy policy;
  policy.high_pool_cap = cfg.datapipe.rebalance.high_pool_cap;
  policy.rating2_upsample_factor = cfg.datapipe.rebalance.rating2_upsample_factor;
  policy.negatives_count = cfg.datapipe.rebalance.negatives_count;
  policy.rng_seed = seed_set ? seed_override : cfg.seed;

  auto out = srr::rebalance(steps, policy);

  if (negatives != 0) {
    size_t count = negatives < 0 ? policy.negatives_count : static_cast<size_t>(negatives);
    if (trajectories_path.empty())
      throw srr::ConfigError("--negatives needs --trajectories for pairing material");
    auto judge = srr::make_endpoint(cfg.judge, "judge");
    auto trajectories = srr::read_trajectories_jsonl(trajectories_path);
    auto negs = srr::synthesize_negatives(trajectories, count, judge, policy.rng_seed);
    out.insert(out.end(), negs.begin(), negs.end());
  }

  std::vector<std::string> lines;
  lines.reserve(out.size());
  for (const auto& va : out) lines.push_back(srr::voted_annotation_to_json(va).dump());
  srr::write_lines(out_path, lines);
  std::cout << srr::ojson{{"steps_out", out.size()}}.dump() << "\n";
  return 0;
}

int cmd_export(const CommonOpts& common, const std::string& annotated_path,
               const std::string& out_path, int iteration) {
  auto cfg = load_app_config(common);
  auto records = srr::read_annotated_jsonl(annotated_path);
  srr::DatasetManifest base;
  base.iteration = iteration;
  base.source_files = {annotated_path};
  base.created_at = cfg.clock()();
  auto manifest =
      srr::export_sft(records, base, out_path, srr::load_system_prompt(cfg.react));
  std::string mpath = manifest_path_for(cfg, out_path);
  srr::write_manifest(manifest, mpath);
  std::cout << srr::ojson{{"kept", manifest.kept},
                          {"empty_export", manifest.empty_export},
                          {"manifest", mpath}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_merge(const CommonOpts& common, const std::vector<std::string>& manifest_paths,
              const std::string& out_path) {
  auto cfg = load_app_config(common);
  std::vector<srr::DatasetManifest> manifests;
  for (const auto& p : manifest_paths) manifests.push_back(srr::read_manifest(p));
  auto merged = srr::merge_iterations(manifests, out_path);
  merged.created_at = cfg.clock()();
  std::string mpath = manifest_path_for(cfg, out_path);
  srr::write_manifest(merged, mpath);
  std::cout << srr::ojson{{"kept", merged.kept}, {"manifest", mpath}}.dump() << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::vector<std::string>& trajectory_paths,
             const std::string& grader_kind, int expected_runs, const std::string& report_path,
             const std::string& benchmark, const std::string& format) {
  auto cfg = load_app_config(common);
  auto grader = make_grader(cfg, grader_kind);

  std::vector<srr::Trajectory> all;
  for (const auto& p : trajectory_paths) {
    auto batch = srr::read_trajectories_jsonl(p);
    all.insert(all.end(), batch.begin(), batch.end());
  }
  if (all.empty()) throw srr::EmptyRuns("no trajectories to evaluate");

  // the i-th occurrence of a question id is its run-i attempt
  std::vector<std::string> question_order;
  std::map<std::string, std::vector<const srr::Trajectory*>> by_question;
  for (const auto& t : all) {
    auto& bucket = by_question[t.question.id];
    if (bucket.empty()) question_order.push_back(t.question.id);
    bucket.push_back(&t);
  }
  size_t n_runs = by_question[question_order.front()].size();
  for (const auto& qid : question_order)
    if (by_question[qid].size() != n_runs)
      throw srr::LengthMismatch("question '" + qid + "' appears " +
                                std::to_string(by_question[qid].size()) + " times, expected " +
                                std::to_string(n_runs));
  if (expected_runs > 0 && static_cast<size_t>(expected_runs) != n_runs)
    throw srr::LengthMismatch("expected " + std::to_string(expected_runs) + " runs, found " +
                              std::to_string(n_runs));

  std::vector<std::vector<bool>> outcomes(n_runs);
  for (const auto& qid : question_order) {
    const auto& bucket = by_question[qid];
    for (size_t r = 0; r < n_runs; ++r) {
      const srr::Trajectory& t = *bucket[r];
      auto answer = t.final_answer();
      bool correct = answer && srr::grade_answer(grader, t.question, *answer);
      outcomes[r].push_back(correct);
    }
  }

  auto report = srr::make_eval_report(benchmark, question_order, outcomes);
  srr::emit_report(report, report_path, format_for(report_path, format));
  std::cout << srr::ojson{{"pass_at_1_mean", report.pass_at_1_mean},
                          {"pass_at_1_std", report.pass_at_1_std},
                          {"n_runs", report.n_runs}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_correlate(const CommonOpts& common, const std::string& annotated_path,
                  const std::string& report_path, const std::string& format) {
  (void)load_app_config(common);  // validates the config if given
  auto records = srr::read_annotated_jsonl(annotated_path);
  auto report = srr::correlation_report(records);
  srr::emit_report(report, report_path, format_for(report_path, format));
  auto show = [](const srr::CorrelationStat& s) {
    return s.r ? srr::ojson(*s.r) : srr::ojson(nullptr);
  };
  std::cout << srr::ojson{{"r_first", show(report.overall.first)},
                          {"r_last", show(report.overall.last)},
                          {"r_avg", show(report.overall.avg)}}
                   .dump()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, handle_interrupt);

  CLI::App app{"search-integrated reasoning pipelines: run, rate-and-refine, annotate, "
               "filter, rebalance, export, merge, eval, correlate"};
  app.require_subcommand(0, 1);

  bool show_version = false;
  bool json_output = false;
  app.add_flag("--version", show_version, "print version and exit");
  app.add_flag("--json", json_output, "machine-readable --version output");

  CommonOpts common;

  // run
  auto* run = app.add_subcommand("run", "ReAct inference over a question file");
  std::string run_questions, run_out;
  int run_budget = 0, run_parallel = 1;
  run->add_option("--questions", run_questions, "questions JSONL")->required();
  run->add_option("--out", run_out, "output trajectory JSONL")->required();
  run->add_option("--budget", run_budget, "search budget override");
  run->add_option("--parallel", run_parallel, "worker threads")->check(CLI::Range(1, 256));
  run->add_option("--config", common.config_path, "config file");

  // refine
  auto* refine = app.add_subcommand("refine", "rate-and-refine inference");
  std::string refine_questions, refine_out, refine_grader = "none";
  int refine_n = 0, refine_threshold = 0, refine_budget = 0, refine_parallel = 1;
  refine->add_option("--questions", refine_questions, "questions JSONL")->required();
  refine->add_option("--out", refine_out, "output annotated JSONL")->required();
  refine->add_option("--n", refine_n, "best-of-N candidates");
  refine->add_option("--threshold", refine_threshold, "accept threshold")->check(CLI::Range(1, 5));
  refine->add_option("--budget", refine_budget, "search budget override");
  refine->add_option("--parallel", refine_parallel, "worker threads")->check(CLI::Range(1, 256));
  refine->add_option("--grader", refine_grader, "grade correctness: exact|model|none");
  refine->add_option("--config", common.config_path, "config file");

  // annotate
  auto* annotate = app.add_subcommand("annotate", "majority-vote judge annotation");
  std::string ann_in, ann_out, ann_grader = "exact";
  int ann_runs = 0;
  annotate->add_option("--trajectories", ann_in, "trajectory JSONL")->required();
  annotate->add_option("--out", ann_out, "output annotated JSONL")->required();
  annotate->add_option("--runs", ann_runs, "annotation runs per step");
  annotate->add_option("--grader", ann_grader, "grade correctness: exact|model|none");
  annotate->add_option("--config", common.config_path, "config file");

  // filter
  auto* filter = app.add_subcommand("filter", "point-biserial conflict filtering");
  std::string filter_in, filter_out, filter_removed;
  double filter_target = -3.0, filter_max_removed = -1.0;
  filter->add_option("--annotated", filter_in, "annotated JSONL")->required();
  filter->add_option("--out", filter_out, "kept records JSONL")->required();
  filter->add_option("--removed", filter_removed, "removed records JSONL");
  filter->add_option("--target-rpb", filter_target, "target correlation");
  filter->add_option("--max-removed-fraction", filter_max_removed, "removal budget");
  filter->add_option("--config", common.config_path, "config file");

  // rebalance
  auto* rebalance = app.add_subcommand("rebalance", "class rebalancing of voted steps");
  std::string reb_in, reb_out, reb_preset, reb_trajectories;
  std::uint64_t reb_seed = 0;
  long reb_negatives = 0;
  rebalance->add_option("--annotated", reb_in, "annotated JSONL")->required();
  rebalance->add_option("--out", reb_out, "voted-annotation JSONL")->required();
  rebalance->add_option("--preset", reb_preset, "paper-scale|desk-scale");
  auto* seed_opt = rebalance->add_option("--seed", reb_seed, "rng seed");
  rebalance->add_option("--negatives", reb_negatives,
                        "synthesize N rating-1 negatives (-1 = config count)");
  rebalance->add_option("--trajectories", reb_trajectories, "pairing material for negatives");
  rebalance->add_option("--config", common.config_path, "config file");

  // export
  auto* exp = app.add_subcommand("export", "SFT/RFT chat-format export");
  std::string exp_in, exp_out;
  int exp_iteration = 0;
  exp->add_option("--annotated", exp_in, "annotated JSONL")->required();
  exp->add_option("--out", exp_out, "SFT JSONL")->required();
  exp->add_option("--iteration", exp_iteration, "RFT iteration index")->required();
  exp->add_option("--config", common.config_path, "config file");

  // merge
  auto* merge = app.add_subcommand("merge", "merge exported iterations");
  std::vector<std::string> merge_manifests;
  std::string merge_out;
  merge->add_option("--manifests", merge_manifests, "manifest JSON files")
      ->required()
      ->expected(-1);
  merge->add_option("--out", merge_out, "merged SFT JSONL")->required();
  merge->add_option("--config", common.config_path, "config file");

  // eval
  auto* eval = app.add_subcommand("eval", "pass@1 over repeated runs");
  std::vector<std::string> eval_in;
  std::string eval_grader = "exact", eval_report, eval_benchmark = "eval", eval_format;
  int eval_runs = 0;
  eval->add_option("--trajectories", eval_in, "trajectory JSONL (repeatable)")
      ->required()
      ->expected(-1);
  eval->add_option("--grader", eval_grader, "exact|model");
  eval->add_option("--runs", eval_runs, "expected run count");
  eval->add_option("--report", eval_report, "report output path")->required();
  eval->add_option("--benchmark", eval_benchmark, "benchmark name in the report");
  eval->add_option("--format", eval_format, "json|csv (default: by extension)");
  eval->add_option("--config", common.config_path, "config file");

  // correlate
  auto* correlate = app.add_subcommand("correlate", "first/last/avg rating correlations");
  std::string corr_in, corr_report, corr_format;
  correlate->add_option("--annotated", corr_in, "annotated JSONL")->required();
  correlate->add_option("--report", corr_report, "report output path")->required();
  correlate->add_option("--format", corr_format, "json|csv (default: by extension)");
  correlate->add_option("--config", common.config_path, "config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "srr: usage error: " << e.what() << "\n";
    return 2;
  }

  if (show_version) {
    if (json_output) {
      std::cout << srr::ojson{{"name", "srr"},
                              {"version", kVersion},
                              {"schema_version", srr::kTrajectorySchemaVersion}}
                       .dump()
                << "\n";
    } else {
      std::cout << "srr " << kVersion << "\n";
    }
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }

  try {
    if (run->parsed())
      return cmd_run(common, run_questions, run_out, run_budget, run_parallel);
    if (refine->parsed())
      return cmd_refine(common, refine_questions, refine_out, refine_n, refine_threshold,
                        refine_budget, refine_parallel, refine_grader);
    if (annotate->parsed())
      return cmd_annotate(common, ann_in, ann_out, ann_runs, ann_grader);
    if (filter->parsed())
      return cmd_filter(common, filter_in, filter_out, filter_removed, filter_target,
                        filter_max_removed);
    if (rebalance->parsed())
      return cmd_rebalance(common, reb_in, reb_out, reb_preset, reb_seed,
                           seed_opt->count() > 0, reb_negatives, reb_trajectories);
    if (exp->parsed()) return cmd_export(common, exp_in, exp_out, exp_iteration);
    if (merge->parsed()) return cmd_merge(common, merge_manifests, merge_out);
    if (eval->parsed())
      return cmd_eval(common, eval_in, eval_grader, eval_runs, eval_report, eval_benchmark,
                      eval_format);
    if (correlate->parsed()) return cmd_correlate(common, corr_in, corr_report, corr_format);
  } catch (const srr::ConfigError& e) {
    std::cerr << "srr: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "srr: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
