#include <catch2/catch_amalgamated.hpp>

#include "srr/srr.hpp"
#include "testutil.hpp"

using namespace srr;

TEST_CASE("parse_model_output extracts search actions") {
  auto parsed = parse_model_output(
      "I should check X. <|begin_search_query|>X founding date<|end_search_query|>");
  CHECK(parsed.thought == "I should check X.");
  CHECK(parsed.action == Action::search("X founding date"));
}

TEST_CASE("parse_model_output extracts boxed answers") {
  auto parsed = parse_model_output("All clues satisfied. \\boxed{Evelyne Porret}");
  CHECK(parsed.thought == "All clues satisfied.");
  CHECK(parsed.action == Action::answer("Evelyne Porret"));
}

TEST_CASE("parse_model_output rejects untagged prose") {
  CHECK_THROWS_AS(parse_model_output("Let me think more..."), MalformedOutput);
  CHECK_THROWS_AS(parse_model_output(""), MalformedOutput);
  CHECK_THROWS_AS(parse_model_output("   \n\t "), MalformedOutput);
}

TEST_CASE("search tags outrank a boxed answer in the same output") {
  auto parsed = parse_model_output(
      "hmm <|begin_search_query|>q1<|end_search_query|> then \\boxed{A}");
  CHECK(parsed.action == Action::search("q1"));

  // even when the boxed span comes first
  auto parsed2 = parse_model_output(
      "\\boxed{A} stray <|begin_search_query|>q2<|end_search_query|>");
  CHECK(parsed2.action == Action::search("q2"));
}

TEST_CASE("parse_model_output edge cases") {
  SECTION("empty query between tags") {
    CHECK_THROWS_AS(parse_model_output("t <|begin_search_query|>  <|end_search_query|>"),
                    MalformedOutput);
  }
  SECTION("empty boxed answer") {
    CHECK_THROWS_AS(parse_model_output("t \\boxed{  }"), MalformedOutput);
  }
  SECTION("multi-brace answers survive balanced matching") {
    auto parsed = parse_model_output("t \\boxed{f(x) = {a, {b}} + c}");
    CHECK(parsed.action == Action::answer("f(x) = {a, {b}} + c"));
  }
  SECTION("unbalanced boxed answer is malformed") {
    CHECK_THROWS_AS(parse_model_output("t \\boxed{never closed"), MalformedOutput);
  }
  SECTION("open tag without close falls through to boxed") {
    auto parsed = parse_model_output("t <|begin_search_query|>q \\boxed{A}");
    CHECK(parsed.action == Action::answer("A"));
  }
  SECTION("first well-formed pair wins") {
    auto parsed = parse_model_output(
        "t <|begin_search_query|>first<|end_search_query|> "
        "<|begin_search_query|>second<|end_search_query|>");
    CHECK(parsed.action == Action::search("first"));
  }
  SECTION("thought keeps internal newlines, sheds outer whitespace") {
    auto parsed = parse_model_output(
        "  line one\nline two  \n<|begin_search_query|>q<|end_search_query|>");
    CHECK(parsed.thought == "line one\nline two");
  }
  SECTION("query content is trimmed") {
    auto parsed = parse_model_output("t <|begin_search_query|>  q  <|end_search_query|>");
    CHECK(parsed.action == Action::search("q"));
  }
}

TEST_CASE("parser totality: arbitrary strings parse or throw MalformedOutput") {
  test::Rng rng(20240601);
  const std::string pieces[] = {"<|begin_search_query|>", "<|end_search_query|>",
                                "\\boxed{",              "}",
                                "{",                     "plain text ",
                                "\n",                    "<|begin_search_result|>"};
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    int n = 1 + static_cast<int>(rng.next(8));
    for (int i = 0; i < n; ++i) s += pieces[rng.next(std::size(pieces))];
    try {
      auto parsed = parse_model_output(s);
      CHECK_FALSE(parsed.action.payload.empty());
    } catch (const MalformedOutput&) {
      // acceptable outcome
    }
  }
}

TEST_CASE("render_history renders the documented concatenation") {
  CHECK(render_history({}) == "");

  std::vector<Step> steps{test::search_step(0, "T", "Q", "O")};
  steps[0].observation->source_urls.clear();
  CHECK(render_history(steps) ==
        "T\n<|begin_search_query|>Q<|end_search_query|>\n"
        "<|begin_search_result|>O<|end_search_result|>\n");
}

TEST_CASE("render_history golden fixture stays frozen") {
  // Frozen once from the artist-example step: any change to the rendering is
  // a breaking change to prompts and exports.
  std::vector<Step> steps;
  steps.push_back(test::search_step(
      0,
      "Okay, let's try to figure out this question step by step. The artist had a brief "
      "marriage to a colloquial poet who studied engineering.\nLet's do a search for poets "
      "born in September between 1938-1941.",
      "poets born September 1938 to 1941",
      "No direct match; partial leads (e.g., Jack Adair; Vasudev Nirmal)."));
  steps.push_back(test::search_step(1, "Checking the first lead.", "Vasudev Nirmal date of birth",
                                    "Most sources indicate June 2, 1936 (outside target range)."));

  const std::string golden =
      "Okay, let's try to figure out this question step by step. The artist had a brief "
      "marriage to a colloquial poet who studied engineering.\nLet's do a search for poets "
      "born in September between 1938-1941.\n"
      "<|begin_search_query|>poets born September 1938 to 1941<|end_search_query|>\n"
      "<|begin_search_result|>No direct match; partial leads (e.g., Jack Adair; Vasudev "
      "Nirmal).<|end_search_result|>\n"
      "Checking the first lead.\n"
      "<|begin_search_query|>Vasudev Nirmal date of birth<|end_search_query|>\n"
      "<|begin_search_result|>Most sources indicate June 2, 1936 (outside target "
      "range).<|end_search_result|>\n";
  CHECK(render_history(steps) == golden);
}

TEST_CASE("render_history is injective on differing histories") {
  test::Rng rng(7);
  auto random_history = [&](std::uint64_t seed) {
    test::Rng local(seed);
    std::vector<Step> steps;
    int n = 1 + static_cast<int>(local.next(4));
    for (int i = 0; i < n; ++i)
      steps.push_back(test::search_step(i, local.words(1, 6), local.words(1, 4),
                                        local.words(1, 8)));
    return steps;
  };
  for (int trial = 0; trial < 200; ++trial) {
    auto a = random_history(rng.engine());
    auto b = random_history(rng.engine());
    if (a == b) continue;
    // identical content must collide, differing content must not
    CHECK(render_history(a) != render_history(b));
  }
  auto h = random_history(42);
  auto mutated = h;
  mutated[0].thought += " extra";
  CHECK(render_history(h) != render_history(mutated));
  mutated = h;
  mutated.back().observation->text += "!";
  CHECK(render_history(h) != render_history(mutated));
}

TEST_CASE("render_action inverts through parse_model_output") {
  test::Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::string thought = rng.words(1, 6);
    Action action = rng.chance(0.5) ? Action::search(rng.words(1, 4))
                                    : Action::answer(rng.words(1, 3));
    auto parsed = parse_model_output(thought + "\n" + render_action(action));
    CHECK(parsed.thought == thought);
    CHECK(parsed.action == action);
  }
}

TEST_CASE("trajectory serialization round-trips") {
  test::Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = test::make_trajectory("q" + std::to_string(trial),
                                   static_cast<int>(rng.next(5)), rng.chance(0.7));
    if (!rng.chance(0.5)) t.question.gold_answer.reset();
    auto round = deserialize_trajectory(serialize_trajectory(t));
    CHECK(round == t);
  }
}

TEST_CASE("serialization enforces invariants at load time") {
  auto t = test::make_trajectory();
  auto j = trajectory_to_json(t);

  SECTION("two answer steps") {
    auto bad = j;
    bad["steps"].push_back(bad["steps"].back());
    bad["steps"].back()["index"] = static_cast<int>(bad["steps"].size()) - 1;
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("21 search steps under budget 20") {
    // build via json to bypass the serializer's own validation
    auto record = trajectory_to_json(test::make_trajectory("q-big", 19, false, 20));
    record["status"] = "budget_exhausted";
    for (int i = 19; i <= 20; ++i) {
      auto extra = record["steps"][0];
      extra["index"] = i;
      record["steps"].push_back(extra);
    }
    CHECK_THROWS_AS(trajectory_from_json(record), SchemaViolation);
  }
  SECTION("missing required field") {
    auto bad = j;
    bad.erase("policy_id");
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("extra field") {
    auto bad = j;
    bad["extra"] = 1;
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("status/terminal-step mismatch") {
    auto bad = j;
    bad["status"] = "budget_exhausted";
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("observation on an answer step") {
    auto bad = j;
    bad["steps"].back()["observation"] = {{"text", "x"},
                                          {"source_urls", nlohmann::json::array()},
                                          {"truncated", false}};
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("search step without observation") {
    auto bad = j;
    bad["steps"][0]["observation"] = nullptr;
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
  SECTION("non-contiguous indices") {
    auto bad = j;
    bad["steps"][1]["index"] = 7;
    CHECK_THROWS_AS(trajectory_from_json(bad), SchemaViolation);
  }
}

TEST_CASE("malformed and aborted trajectories still round-trip") {
  auto t = test::make_trajectory("q-bad", 2, false);
  t.status = TrajectoryStatus::Malformed;
  CHECK(deserialize_trajectory(serialize_trajectory(t)) == t);
  t.status = TrajectoryStatus::Aborted;
  CHECK(deserialize_trajectory(serialize_trajectory(t)) == t);
  t.steps.clear();
  CHECK(deserialize_trajectory(serialize_trajectory(t)) == t);
}

TEST_CASE("immediate answers form a single-step trajectory") {
  Trajectory t;
  t.question = test::make_question();
  t.policy_id = "p";
  t.steps.push_back(test::answer_step(0, "known immediately", "42"));
  t.status = TrajectoryStatus::Answered;
  CHECK_NOTHROW(validate_trajectory(t));
  CHECK(t.search_step_count() == 0);
}

TEST_CASE("tag grammar constants are bit-exact") {
  CHECK(kBeginSearchQuery == "<|begin_search_query|>");
  CHECK(kEndSearchQuery == "<|end_search_query|>");
  CHECK(kBeginSearchResult == "<|begin_search_result|>");
  CHECK(kEndSearchResult == "<|end_search_result|>");
  CHECK(kBoxedPrefix == "\\boxed{");
  CHECK(kSearchLimitNotice ==
        "You have reached the search limit. You are not allowed to search.");
}
