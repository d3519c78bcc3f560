#include <catch2/catch_amalgamated.hpp>

#include "srr/srr.hpp"
#include "testutil.hpp"

using namespace srr;

namespace {

ReactConfig make_config(Endpoint policy, int budget = 20) {
  ReactConfig cfg;
  cfg.budget = budget;
  cfg.policy = std::move(policy);
  cfg.clock = [] { return std::int64_t{1700000000}; };
  return cfg;
}

}  // namespace

TEST_CASE("scripted policy yields one search step and one answer step") {
  auto policy = test::policy_from({
      test::search_completion("t1", "pottery school"),
      test::answer_completion("t2", "Evelyne Porret"),
  });
  auto env = test::make_mock_env("the summary");
  auto t = run_react(test::make_question(), env, make_config(policy));

  REQUIRE(t.steps.size() == 2);
  CHECK(t.status == TrajectoryStatus::Answered);
  CHECK(t.steps[0].action == Action::search("pottery school"));
  CHECK(t.steps[0].observation->text == "the summary");
  CHECK(t.steps[1].action == Action::answer("Evelyne Porret"));
  CHECK(t.policy_id == "test-policy");
  CHECK_NOTHROW(validate_trajectory(t));
}

TEST_CASE("always-searching policy hits the budget and gets the verbatim notice") {
  auto policy = make_mock_endpoint(
      MockScript::constant(test::search_completion("keep digging", "pottery")));
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy, 2));

  REQUIRE(t.steps.size() == 2);
  CHECK(t.search_step_count() == 2);
  CHECK(t.steps[0].observation->text == "summary");  // first search executes for real
  CHECK(t.steps[1].observation->text ==
        "You have reached the search limit. You are not allowed to search.");
  CHECK(t.steps[1].observation->source_urls.empty());
  // final completion still searched
  CHECK(t.status == TrajectoryStatus::BudgetExhausted);
  CHECK_NOTHROW(validate_trajectory(t));
}

TEST_CASE("forced final completion may still answer") {
  auto policy = test::policy_from({
      test::search_completion("s1", "pottery"),
      test::search_completion("s2", "village"),
      test::answer_completion("best effort", "17"),
  });
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy, 2));

  REQUIRE(t.steps.size() == 3);
  CHECK(t.status == TrajectoryStatus::Answered);
  CHECK(t.steps[1].observation->text == kSearchLimitNotice);
  CHECK(t.steps[2].action == Action::answer("17"));
}

TEST_CASE("the forced final turn takes exactly one completion, no retries") {
  auto policy = test::policy_from({
      test::search_completion("s1", "pottery"),
      test::search_completion("s2", "village"),
      "malformed final",
      test::answer_completion("never reached", "x"),
  });
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy, 2));
  CHECK(t.status == TrajectoryStatus::BudgetExhausted);
  CHECK(t.steps.size() == 2);
}

TEST_CASE("parse failures re-sample then mark the trajectory malformed") {
  auto policy = make_mock_endpoint(MockScript::constant("untagged prose"));
  auto env = test::make_mock_env();
  auto cfg = make_config(policy);
  cfg.max_parse_retries = 2;
  auto t = run_react(test::make_question(), env, cfg);
  CHECK(t.status == TrajectoryStatus::Malformed);
  CHECK(t.steps.empty());
}

TEST_CASE("a malformed sample inside the retry budget is recovered") {
  auto policy = test::policy_from({
      "garbage first",
      test::answer_completion("ok", "42"),
  });
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy));
  CHECK(t.status == TrajectoryStatus::Answered);
}

TEST_CASE("policy failure mid-trajectory aborts with partial steps preserved") {
  int calls = 0;
  Endpoint flaky;
  flaky.config.model_id = "flaky";
  flaky.config.max_retries = 0;
  flaky.sleeper = [](std::chrono::milliseconds) {};
  flaky.transport = std::make_shared<LambdaTransport>(
      [&](const std::string&) -> std::optional<WireResult> {
        if (++calls == 1) {
          nlohmann::json out;
          out["choices"] = {{{"message",
                              {{"content", test::search_completion("t", "pottery")}}}}};
          return WireResult{200, out.dump()};
        }
        return std::nullopt;  // endpoint dies
      });
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(flaky));
  CHECK(t.status == TrajectoryStatus::Aborted);
  REQUIRE(t.steps.size() == 1);
  CHECK(t.steps[0].action == Action::search("pottery"));
  // aborted trajectories still serialize and round-trip
  CHECK(deserialize_trajectory(serialize_trajectory(t)) == t);
}

TEST_CASE("a query with no corpus match becomes a normal empty-result observation") {
  auto policy = test::policy_from({
      test::search_completion("t", "zzyzx unfindable"),
      test::answer_completion("ok", "none"),
  });
  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy));
  CHECK(t.status == TrajectoryStatus::Answered);
  CHECK(t.steps[0].observation->text == "No results found.");
}

TEST_CASE("prefix integrity: each prompt embeds exactly the stored history") {
  std::vector<std::string> seen_prompts;
  auto inner = std::make_shared<ScriptedTransport>(MockScript::sequence({
      test::search_completion("t1", "pottery school"),
      test::search_completion("t2", "sayed hegab poet"),
      test::answer_completion("t3", "Evelyne Porret"),
  }));
  Endpoint policy;
  policy.config.model_id = "spy";
  policy.transport = std::make_shared<LambdaTransport>(
      [&](const std::string& body) -> std::optional<WireResult> {
        auto j = nlohmann::json::parse(body);
        std::string assistant;
        for (const auto& m : j["messages"])
          if (m["role"] == "assistant") assistant = m["content"].get<std::string>();
        seen_prompts.push_back(assistant);
        return inner->post(body);
      });

  auto env = test::make_mock_env();
  auto t = run_react(test::make_question(), env, make_config(policy));
  REQUIRE(t.status == TrajectoryStatus::Answered);
  REQUIRE(seen_prompts.size() == 3);
  CHECK(seen_prompts[0] == "");  // empty history -> no assistant turn
  History first_step(t.steps.data(), 1);
  History two_steps(t.steps.data(), 2);
  CHECK(seen_prompts[1] == render_history(first_step));
  CHECK(seen_prompts[2] == render_history(two_steps));
}

TEST_CASE("termination and search-count bound under fuzzed always-search policies") {
  test::Rng rng(4242);
  for (int trial = 0; trial < 30; ++trial) {
    int budget = 1 + static_cast<int>(rng.next(5));
    auto policy = make_mock_endpoint(
        MockScript::constant(test::search_completion(rng.words(1, 4), rng.words(1, 3))));
    auto env = test::make_mock_env();
    auto t = run_react(test::make_question("fz" + std::to_string(trial)), env,
                       make_config(policy, budget));
    CHECK(t.search_step_count() <= budget);
    CHECK(t.status == TrajectoryStatus::BudgetExhausted);
    CHECK_NOTHROW(validate_trajectory(t));
  }
}

TEST_CASE("force_answer_on_exhaustion=false stops at the injected step") {
  auto policy = make_mock_endpoint(
      MockScript::constant(test::search_completion("t", "pottery")));
  auto env = test::make_mock_env();
  auto cfg = make_config(policy, 1);
  cfg.force_answer_on_exhaustion = false;
  auto t = run_react(test::make_question(), env, cfg);
  CHECK(t.status == TrajectoryStatus::BudgetExhausted);
  REQUIRE(t.steps.size() == 1);
  CHECK(t.steps[0].observation->text == kSearchLimitNotice);
}
