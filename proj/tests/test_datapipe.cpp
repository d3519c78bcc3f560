#include <cmath>
#include <filesystem>

#include <catch2/catch_amalgamated.hpp>

#include "srr/srr.hpp"
#include "testutil.hpp"

using namespace srr;

namespace {

// Independent oracle: Pearson correlation of values against 0/1 labels,
// straight from the covariance definition.
double pearson_01(const std::vector<double>& values, const std::vector<bool>& labels) {
  size_t n = values.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += values[i];
    my += labels[i] ? 1.0 : 0.0;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dx = values[i] - mx;
    double dy = (labels[i] ? 1.0 : 0.0) - my;
    cov += dx * dy;
    vx += dx * dx;
    vy += dy * dy;
  }
  return cov / std::sqrt(vx * vy);
}

AnnotatedTrajectory labeled(const std::string& id, double avg, bool correct) {
  AnnotatedTrajectory at;
  at.trajectory = test::make_trajectory(id, 1, true);
  at.correctness = correct;
  at.avg_rating = avg;
  at.first_rating = avg;
  at.last_rating = avg;
  return at;
}

VotedAnnotation voted(int rating, int index) {
  VotedAnnotation va;
  va.step_ref = {"t#" + std::to_string(index), index};
  va.final_rating = rating;
  va.votes = {rating};
  va.donor_run = 0;
  va.explanation = "e";
  va.refined_thought = "t";
  va.refined_action = Action::search("q");
  return va;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("majority_vote picks the mode, lowest rating on ties") {
  CHECK(majority_vote({3, 3, 4, 5, 3}) == 3);
  CHECK(majority_vote({3, 3, 4, 4, 5}) == 3);
  CHECK(majority_vote({5}) == 5);
  CHECK(majority_vote({2, 5, 5, 2, 1}) == 2);
  CHECK_THROWS_AS(majority_vote({}), std::invalid_argument);
  CHECK_THROWS_AS(majority_vote({0}), std::invalid_argument);
  CHECK_THROWS_AS(majority_vote({6}), std::invalid_argument);
}

TEST_CASE("majority_vote output is always an element of its input") {
  test::Rng rng(555);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> votes;
    int n = 1 + static_cast<int>(rng.next(7));
    for (int i = 0; i < n; ++i) votes.push_back(1 + static_cast<int>(rng.next(5)));
    int winner = majority_vote(votes);
    CHECK(std::count(votes.begin(), votes.end(), winner) > 0);
  }
}

TEST_CASE("annotate_with_votes majority-votes five runs per step") {
  auto t = test::make_trajectory("q1", 1, true);  // 2 steps
  std::vector<std::string> script;
  for (int r : {3, 3, 4, 5, 3}) script.push_back(test::verdict_json(r, "s0 run"));
  for (int r : {4, 4, 5, 5, 4}) script.push_back(test::verdict_json(r, "s1 run"));
  auto judge = make_mock_endpoint(MockScript::sequence(script));

  auto at = annotate_with_votes(judge, t, 5, 17);
  REQUIRE(at.annotated_steps.size() == 2);
  CHECK(at.annotated_steps[0].final_rating == 3);
  CHECK(at.annotated_steps[0].votes == std::vector<int>{3, 3, 4, 5, 3});
  CHECK(at.annotated_steps[1].final_rating == 4);
  CHECK(*at.avg_rating == Catch::Approx(3.5));
  CHECK(*at.first_rating == 3.0);
  CHECK(*at.last_rating == 4.0);
  // donor run's rating equals the modal rating
  for (const auto& s : at.annotated_steps) {
    REQUIRE(s.donor_run.has_value());
    for (const auto& v : s.verdicts)
      if (v.run_index == *s.donor_run) CHECK(v.rating == s.final_rating);
  }
}

TEST_CASE("annotate_with_votes donor choice is deterministic under a fixed seed") {
  auto run = [](std::uint64_t seed) {
    auto t = test::make_trajectory("q1", 1, true);
    std::vector<std::string> script;
    for (int i = 0; i < 10; ++i) script.push_back(test::verdict_json(4, "same"));
    auto judge = make_mock_endpoint(MockScript::sequence(script));
    return annotate_with_votes(judge, t, 5, seed);
  };
  CHECK(run(17) == run(17));
}

TEST_CASE("annotate_with_votes raises InsufficientVotes below the parse quorum") {
  auto t = test::make_trajectory("q1", 0, true);  // answer-only, 1 step
  auto judge = make_mock_endpoint(MockScript::sequence(
      {test::verdict_json(3, "ok"), "junk", "junk", "junk", "junk"}));
  CHECK_THROWS_AS(annotate_with_votes(judge, t, 5, 17), InsufficientVotes);
}

TEST_CASE("annotate_with_votes rejects malformed/aborted trajectories") {
  auto t = test::make_trajectory("q1", 2, false);
  t.status = TrajectoryStatus::Malformed;
  auto judge = test::constant_judge(3);
  CHECK_THROWS_AS(annotate_with_votes(judge, t, 5, 17), std::invalid_argument);
}

TEST_CASE("extract_voted_annotations carries the donor's fields") {
  auto t = test::make_trajectory("q1", 0, true);
  auto judge = make_mock_endpoint(MockScript::sequence({
      test::verdict_json(3, "donor query", "donor explanation", "donor thought"),
      test::verdict_json(4, "x"),
      test::verdict_json(3, "donor query", "donor explanation", "donor thought"),
      test::verdict_json(3, "donor query", "donor explanation", "donor thought"),
      test::verdict_json(5, "y"),
  }));
  auto at = annotate_with_votes(judge, t, 5, 17);
  auto vas = extract_voted_annotations(at);
  REQUIRE(vas.size() == 1);
  CHECK(vas[0].final_rating == 3);
  CHECK(vas[0].explanation == "donor explanation");
  CHECK(vas[0].refined_action == Action::search("donor query"));
  CHECK(vas[0].step_ref.trajectory_id == trajectory_id(t));
  CHECK(vas[0].votes == std::vector<int>{3, 4, 3, 3, 5});
}

TEST_CASE("point_biserial matches the worked examples") {
  CHECK(point_biserial({5, 5, 1, 1}, {true, true, false, false}) == Catch::Approx(1.0));
  CHECK(point_biserial({4, 2, 5, 1}, {true, false, true, false}) ==
        Catch::Approx(0.94868).margin(1e-5));
  // analytic value of the second example is 3/sqrt(10)
  CHECK(point_biserial({4, 2, 5, 1}, {true, false, true, false}) ==
        Catch::Approx(3.0 / std::sqrt(10.0)).epsilon(1e-12));
}

TEST_CASE("point_biserial rejects degenerate inputs") {
  CHECK_THROWS_AS(point_biserial({1, 2}, {true, true}), DegenerateInput);
  CHECK_THROWS_AS(point_biserial({3, 3}, {true, false}), DegenerateInput);
  CHECK_THROWS_AS(point_biserial({1}, {true}), DegenerateInput);
  CHECK_THROWS_AS(point_biserial({1, 2, 3}, {true, false}), DegenerateInput);
}

TEST_CASE("point_biserial equals Pearson against 0/1 labels") {
  test::Rng rng(2024);
  int checked = 0;
  while (checked < 200) {
    size_t n = 2 + rng.next(60);
    std::vector<double> values;
    std::vector<bool> labels;
    for (size_t i = 0; i < n; ++i) {
      values.push_back(static_cast<double>(rng.next(500)) / 100.0);
      labels.push_back(rng.chance(0.5));
    }
    bool has_true = std::count(labels.begin(), labels.end(), true) > 0;
    bool has_false = std::count(labels.begin(), labels.end(), false) > 0;
    bool has_var = std::count(values.begin(), values.end(), values[0]) <
                   static_cast<long>(values.size());
    if (!has_true || !has_false || !has_var) continue;
    double r = point_biserial(values, labels);
    CHECK(std::abs(r - pearson_01(values, labels)) < 1e-9);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
    ++checked;
  }
}

TEST_CASE("filter is a no-op on already-consistent data") {
  std::vector<AnnotatedTrajectory> records;
  for (int i = 0; i < 10; ++i) records.push_back(labeled("good" + std::to_string(i), 5.0, true));
  for (int i = 0; i < 10; ++i) records.push_back(labeled("bad" + std::to_string(i), 1.0, false));
  auto result = filter_by_correlation(records, {.target_rpb = 0.7});
  CHECK(result.removed.empty());
  CHECK(result.target_met);
  CHECK(result.rpb_final == Catch::Approx(1.0));
  CHECK(result.kept.size() == 20);
}

TEST_CASE("filter removes the planted conflicts first") {
  // 10 correct@5, 10 incorrect@1, 2 incorrect@5; initial r_pb is ~0.833, so a
  // higher target forces the greedy loop to clean out exactly the 2 conflicts.
  std::vector<AnnotatedTrajectory> records;
  for (int i = 0; i < 10; ++i) records.push_back(labeled("c" + std::to_string(i), 5.0, true));
  for (int i = 0; i < 10; ++i) records.push_back(labeled("w" + std::to_string(i), 1.0, false));
  records.push_back(labeled("conflict-a", 5.0, false));
  records.push_back(labeled("conflict-b", 5.0, false));

  auto result = filter_by_correlation(records, {.target_rpb = 0.99});
  CHECK(result.rpb_before == Catch::Approx(0.8333333333).margin(1e-6));
  REQUIRE(result.removed.size() == 2);
  CHECK(trajectory_id(result.removed[0].trajectory).find("conflict") != std::string::npos);
  CHECK(trajectory_id(result.removed[1].trajectory).find("conflict") != std::string::npos);
  CHECK(result.target_met);
  CHECK(result.rpb_final == Catch::Approx(1.0));
  // monotone non-decreasing across removals
  double prev = result.rpb_before;
  for (const auto& r : result.removals) {
    CHECK(r.rpb_after >= prev);
    prev = r.rpb_after;
  }
}

TEST_CASE("filter flags an unreachable target instead of looping") {
  std::vector<AnnotatedTrajectory> records;
  // heavily mixed: ratings do not separate correctness at all
  test::Rng rng(31);
  for (int i = 0; i < 40; ++i) {
    double avg = 1.0 + static_cast<double>(rng.next(400)) / 100.0;
    records.push_back(labeled("m" + std::to_string(i), avg, i % 2 == 0));
  }
  auto result = filter_by_correlation(records, {.target_rpb = 0.999,
                                                .max_removed_fraction = 0.2});
  CHECK_FALSE(result.target_met);
  CHECK(result.removed.size() <= 8);  // 20% of 40
  // still monotone while it ran
  double prev = result.rpb_before;
  for (const auto& r : result.removals) {
    CHECK(r.rpb_after >= prev);
    prev = r.rpb_after;
  }
}

TEST_CASE("filter propagates DegenerateInput for single-class data") {
  std::vector<AnnotatedTrajectory> records;
  for (int i = 0; i < 5; ++i) records.push_back(labeled("x" + std::to_string(i), 3.0 + i, true));
  CHECK_THROWS_AS(filter_by_correlation(records, {}), DegenerateInput);
}

TEST_CASE("filter requires labels and ratings") {
  std::vector<AnnotatedTrajectory> records{labeled("a", 4.0, true)};
  records[0].correctness.reset();
  CHECK_THROWS_AS(filter_by_correlation(records, {}), std::invalid_argument);
}

TEST_CASE("rebalance subsamples the pooled 3-5 class to the cap") {
  std::vector<VotedAnnotation> steps;
  for (int i = 0; i < 30; ++i) steps.push_back(voted(3 + i % 3, i));
  auto out = rebalance(steps, {.high_pool_cap = 10, .rating2_upsample_factor = 3,
                               .negatives_count = 0, .rng_seed = 17});
  CHECK(out.size() == 10);
  for (const auto& va : out) CHECK(va.final_rating >= 3);
}

TEST_CASE("rebalance upsamples rating-2 items by the exact factor") {
  std::vector<VotedAnnotation> steps;
  for (int i = 0; i < 4; ++i) steps.push_back(voted(2, i));
  steps.push_back(voted(1, 100));
  auto out = rebalance(steps, {.high_pool_cap = 10, .rating2_upsample_factor = 3,
                               .negatives_count = 0, .rng_seed = 1});
  int twos = 0, ones = 0;
  for (const auto& va : out) {
    twos += va.final_rating == 2 ? 1 : 0;
    ones += va.final_rating == 1 ? 1 : 0;
  }
  CHECK(twos == 12);
  CHECK(ones == 1);
}

TEST_CASE("rebalance with cap above the pool is an identity on the high class") {
  std::vector<VotedAnnotation> steps;
  for (int i = 0; i < 5; ++i) steps.push_back(voted(4, i));
  auto out = rebalance(steps, {.high_pool_cap = 100, .rating2_upsample_factor = 3,
                               .negatives_count = 0, .rng_seed = 9});
  CHECK(out.size() == 5);
}

TEST_CASE("rebalance preserves ratings and never invents 1/4/5 items") {
  test::Rng rng(88);
  std::vector<VotedAnnotation> steps;
  for (int i = 0; i < 60; ++i) steps.push_back(voted(1 + static_cast<int>(rng.next(5)), i));
  auto out = rebalance(steps, {.high_pool_cap = 12, .rating2_upsample_factor = 3,
                               .negatives_count = 0, .rng_seed = 3});
  std::map<std::string, int> input_count, output_count;
  for (const auto& s : steps)
    if (s.final_rating != 2 && s.final_rating != 3) ++input_count[s.step_ref.trajectory_id];
  for (const auto& s : out)
    if (s.final_rating != 2 && s.final_rating != 3) ++output_count[s.step_ref.trajectory_id];
  for (const auto& [id, c] : output_count) {
    CHECK(input_count.count(id) == 1);
    CHECK(c <= input_count[id]);
  }
  // stable (rating, original index) order
  for (size_t i = 1; i < out.size(); ++i) CHECK(out[i - 1].final_rating <= out[i].final_rating);
}

TEST_CASE("rebalance is bit-reproducible under a fixed seed") {
  test::Rng rng(11);
  std::vector<VotedAnnotation> steps;
  for (int i = 0; i < 200; ++i) steps.push_back(voted(1 + static_cast<int>(rng.next(5)), i));
  RebalancePolicy policy{.high_pool_cap = 40, .rating2_upsample_factor = 3,
                         .negatives_count = 0, .rng_seed = 12345};
  CHECK(rebalance(steps, policy) == rebalance(steps, policy));
  RebalancePolicy other = policy;
  other.rng_seed = 54321;
  CHECK(rebalance(steps, policy) != rebalance(steps, other));
}

TEST_CASE("synthesize_negatives cross-pairs distinct questions") {
  std::vector<Trajectory> trajectories{test::make_trajectory("qa", 2, true),
                                       test::make_trajectory("qb", 2, true)};
  auto judge = test::constant_judge(1, "mismatched step");
  auto negatives = synthesize_negatives(trajectories, 3, judge, 7);
  REQUIRE(negatives.size() == 3);
  for (const auto& va : negatives) {
    CHECK(va.final_rating == 1);
    // id format neg:<historyTraj>+<donorTraj>; the two sides must differ
    auto plus = va.step_ref.trajectory_id.find('+');
    REQUIRE(plus != std::string::npos);
    std::string a = va.step_ref.trajectory_id.substr(4, plus - 4);
    std::string b = va.step_ref.trajectory_id.substr(plus + 1);
    CHECK(a != b);
  }
}

TEST_CASE("synthesize_negatives is seeded-deterministic") {
  std::vector<Trajectory> trajectories{test::make_trajectory("qa", 2, true),
                                       test::make_trajectory("qb", 3, true),
                                       test::make_trajectory("qc", 1, true)};
  auto run = [&](std::uint64_t seed) {
    auto judge = test::constant_judge(1);
    return synthesize_negatives(trajectories, 5, judge, seed);
  };
  CHECK(run(42) == run(42));
}

TEST_CASE("synthesize_negatives needs at least two distinct questions") {
  std::vector<Trajectory> trajectories{test::make_trajectory("qa", 2, true),
                                       test::make_trajectory("qa", 1, true)};
  auto judge = test::constant_judge(1);
  CHECK_THROWS_AS(synthesize_negatives(trajectories, 2, judge, 7), std::invalid_argument);
}

TEST_CASE("export_sft keeps only correct, well-formed trajectories") {
  AnnotatedTrajectory correct;
  correct.trajectory = test::make_trajectory("good", 1, true);
  correct.correctness = true;
  AnnotatedTrajectory incorrect;
  incorrect.trajectory = test::make_trajectory("wrong", 1, true);
  incorrect.correctness = false;
  AnnotatedTrajectory malformed;
  malformed.trajectory = test::make_trajectory("broken", 1, false);
  malformed.trajectory.status = TrajectoryStatus::Malformed;

  DatasetManifest base;
  base.iteration = 2;
  base.created_at = 1700000000;
  base.source_files = {"unit"};
  std::string out = tmp_path("srr_export_test.jsonl");
  auto manifest = export_sft({correct, incorrect, malformed}, base, out);

  CHECK(manifest.kept == 1);
  CHECK(manifest.dropped_incorrect == 1);
  CHECK(manifest.dropped_malformed == 1);
  CHECK(manifest.iteration == 2);
  CHECK_FALSE(manifest.empty_export);

  auto lines = read_lines(out);
  REQUIRE(lines.size() == 2);  // header + 1 record
  auto header = nlohmann::json::parse(lines[0]);
  CHECK(header["type"] == "sft_export");
  CHECK(header["iteration"] == 2);
  auto record = nlohmann::json::parse(lines[1]);
  CHECK(record["meta"]["question_id"] == "good");
  CHECK(record["meta"]["iteration"] == 2);
  CHECK(record["messages"][0]["role"] == "system");
  CHECK(record["messages"][1]["role"] == "user");
  CHECK(record["messages"][2]["role"] == "assistant");
  CHECK(record["messages"][3]["role"] == "tool");
}

TEST_CASE("export_sft records round-trip to the source trajectory") {
  test::Rng rng(606);
  for (int trial = 0; trial < 25; ++trial) {
    AnnotatedTrajectory at;
    at.trajectory = test::make_trajectory("rt" + std::to_string(trial),
                                          static_cast<int>(rng.next(4)), true);
    if (rng.chance(0.3)) {
      at.trajectory.steps[at.trajectory.steps.size() - 1].thought = rng.words(1, 8);
    }
    at.correctness = true;
    auto record = sft_record(at, 1, std::string(kDefaultSystemPromptV1));
    auto rebuilt = trajectory_from_sft_record(record);
    CHECK(rebuilt == at.trajectory);
  }
}

TEST_CASE("export_sft with zero survivors still writes the header and flags it") {
  AnnotatedTrajectory incorrect;
  incorrect.trajectory = test::make_trajectory("wrong", 1, true);
  incorrect.correctness = false;
  DatasetManifest base;
  base.iteration = 1;
  std::string out = tmp_path("srr_export_empty.jsonl");
  auto manifest = export_sft({incorrect}, base, out);
  CHECK(manifest.empty_export);
  CHECK(manifest.kept == 0);
  auto lines = read_lines(out);
  REQUIRE(lines.size() == 1);
  CHECK(nlohmann::json::parse(lines[0])["type"] == "sft_export");
}

TEST_CASE("merge_iterations deduplicates by question id and content hash") {
  auto build_export = [&](const std::string& name, int iteration,
                          const std::vector<std::string>& qids) {
    std::vector<AnnotatedTrajectory> records;
    for (const auto& qid : qids) {
      AnnotatedTrajectory at;
      at.trajectory = test::make_trajectory(qid, 1, true);
      at.correctness = true;
      records.push_back(std::move(at));
    }
    DatasetManifest base;
    base.iteration = iteration;
    base.created_at = 1700000000;
    std::string out = tmp_path(name);
    return export_sft(records, base, out);
  };

  auto m1 = build_export("srr_iter1.jsonl", 1, {"a", "b", "c", "d"});
  auto m2 = build_export("srr_iter2.jsonl", 2, {"c", "d", "e"});  // c, d duplicate iter1
  std::string merged_path = tmp_path("srr_merged.jsonl");
  auto merged = merge_iterations({m1, m2}, merged_path);

  CHECK(merged.kept == 5);  // 4 + 3 - 2 duplicates
  CHECK(merged.per_iteration_counts[1] == 4);
  CHECK(merged.per_iteration_counts[2] == 1);
  auto lines = read_lines(merged_path);
  CHECK(lines.size() == 6);  // header + 5

  SECTION("single manifest merge is identity") {
    auto only = merge_iterations({m1}, tmp_path("srr_merged_single.jsonl"));
    CHECK(only.kept == 4);
  }
  SECTION("duplicate iteration indices are rejected") {
    CHECK_THROWS_AS(merge_iterations({m1, m1}, tmp_path("srr_merged_dup.jsonl")),
                    DuplicateIteration);
  }
}

TEST_CASE("manifests round-trip through their JSON form") {
  DatasetManifest m;
  m.iteration = 3;
  m.source_files = {"a.jsonl", "b.jsonl"};
  m.dataset_file = "out.jsonl";
  m.rating_counts = {{1, 5}, {3, 10}};
  m.status_counts = {{"answered", 12}};
  m.kept = 9;
  m.dropped_incorrect = 3;
  m.filters_applied = {{"correlation", nlohmann::json{{"target", 0.7}}}};
  m.rpb_before = 0.41;
  m.rpb_after = 0.73;
  m.created_at = 1700000000;
  std::string path = tmp_path("srr_manifest.json");
  write_manifest(m, path);
  auto loaded = read_manifest(path);
  CHECK(loaded.iteration == m.iteration);
  CHECK(loaded.rating_counts == m.rating_counts);
  CHECK(loaded.kept == m.kept);
  CHECK(loaded.rpb_after == m.rpb_after);
  CHECK(loaded.filters_applied[0].name == "correlation");
}

TEST_CASE("voted annotations round-trip through JSON") {
  auto va = voted(2, 7);
  va.votes = {2, 2, 3, 1, 2};
  va.donor_run = 4;
  auto j = voted_annotation_to_json(va);
  CHECK(voted_annotation_from_json(j) == va);
}
