#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "deeprag/core.hpp"
#include "deeprag/metrics.hpp"

using namespace deeprag;

namespace {

QAInstance sample_question() {
  return QAInstance{"q1", "Who directed Inception and when was he born?", {"1970"}};
}

Response parametric(std::string answer) { return ParametricResponse{std::move(answer)}; }

Response retrieved(std::string answer) {
  return RetrievedResponse{{Document{"d1", "t", "body text", 1.0}}, std::move(answer)};
}

}  // namespace

TEST_CASE("append_step adds one step and leaves the input usable") {
  State empty(sample_question());
  State one = append_step(empty, "Who directed Inception?", parametric("Christopher Nolan"));
  CHECK(empty.depth() == 0);
  CHECK(one.depth() == 1);
  CHECK(retrieval_count(one) == 0);
  CHECK(one.steps()[0].subquery == "Who directed Inception?");

  State two = append_step(one, "When was he born?", retrieved("1970"));
  CHECK(two.depth() == 2);
  CHECK(retrieval_count(two) == 1);
  CHECK(one.depth() == 1);  // value semantics: parent untouched
}

TEST_CASE("append_step beyond the history cap raises DepthExceeded") {
  State state(sample_question(), 3);
  for (int i = 0; i < 3; ++i) state = append_step(state, "q" + std::to_string(i), parametric("a"));
  CHECK_THROWS_AS(append_step(state, "one more", parametric("a")), DepthExceeded);
}

TEST_CASE("append_step validates inputs") {
  State state(sample_question());
  CHECK_THROWS_AS(append_step(state, "   ", parametric("a")), Error);
  CHECK_THROWS_AS(append_step(state, "q", parametric("   ")), Error);
  CHECK_THROWS_AS(append_step(state, "q", RetrievedResponse{{}, "a"}), Error);
}

TEST_CASE("retrieval_count counts retrieved responses only") {
  State state(sample_question());
  CHECK(retrieval_count(state) == 0);

  State mixed = append_step(state, "q1", parametric("a"));
  mixed = append_step(mixed, "q2", retrieved("b"));
  mixed = append_step(mixed, "q3", parametric("c"));
  CHECK(retrieval_count(mixed) == 1);

  State both = append_step(append_step(state, "q1", retrieved("a")), "q2", retrieved("b"));
  CHECK(retrieval_count(both) == 2);
}

TEST_CASE("prefix preservation under append_step") {
  std::mt19937_64 rng(7);
  State state(sample_question());
  for (int i = 0; i < 6; ++i) {
    Response r = (rng() % 2 == 0) ? parametric("a" + std::to_string(i)) : retrieved("a" + std::to_string(i));
    std::size_t before_retrievals = retrieval_count(state);
    bool was_retrieved = is_retrieved(r);
    State next = append_step(state, "q" + std::to_string(i), std::move(r));
    REQUIRE(next.depth() == state.depth() + 1);
    for (std::size_t j = 0; j < state.depth(); ++j) {
      CHECK(next.steps()[j].subquery == state.steps()[j].subquery);
      CHECK(response_answer(next.steps()[j].response) == response_answer(state.steps()[j].response));
    }
    CHECK(retrieval_count(next) == before_retrievals + (was_retrieved ? 1 : 0));
    state = std::move(next);
  }
}

TEST_CASE("actions pair the termination decision with an atomic decision only when continuing") {
  Action stop = Action::terminate();
  CHECK(stop.termination() == Termination::Terminate);
  CHECK_FALSE(stop.atomic().has_value());

  Action fetch = Action::continue_with(Atomic::Retrieve);
  CHECK(fetch.termination() == Termination::Continue);
  CHECK(fetch.atomic() == Atomic::Retrieve);
  CHECK(Action::continue_with(Atomic::Parametric).atomic() == Atomic::Parametric);
}

TEST_CASE("reward ranking prefers correct answers then fewer retrievals") {
  auto em = [](const std::string& pred, const std::vector<std::string>& golds) {
    return exact_match(pred, golds);
  };
  QAInstance gold = sample_question();

  State s(gold);
  Trajectory one_retrieval = make_trajectory(append_step(s, "q", retrieved("1970")), "1970");
  Trajectory two_retrievals =
      make_trajectory(append_step(append_step(s, "q", retrieved("x")), "q2", retrieved("1970")), "1970");
  Trajectory wrong = make_trajectory(s, "1971");

  Reward r1 = trajectory_reward(one_retrieval, gold, em);
  Reward r2 = trajectory_reward(two_retrievals, gold, em);
  Reward rw = trajectory_reward(wrong, gold, em);

  CHECK(r1 > r2);   // fewer retrievals ranks strictly higher
  CHECK(r2 > rw);   // any correct beats incorrect, regardless of cost
  CHECK(rw == Reward::incorrect());
  CHECK(Reward::correct(3) == Reward::correct(3));
}

TEST_CASE("reward order is total, antisymmetric and transitive") {
  std::vector<Reward> rewards{Reward::incorrect()};
  for (std::size_t k = 0; k < 6; ++k) rewards.push_back(Reward::correct(k));
  for (const auto& a : rewards)
    for (const auto& b : rewards) {
      bool lt = a < b, gt = a > b, eq = a == b;
      CHECK((lt + gt + eq) == 1);  // totality
      for (const auto& c : rewards)
        if (a < b && b < c) CHECK(a < c);
    }
}

TEST_CASE("rl_shaped_reward reproduces the shaped branches") {
  CHECK(rl_shaped_reward(false, false, 3) == 0.0);
  CHECK(rl_shaped_reward(false, true, 0) == 0.1);
  CHECK(rl_shaped_reward(true, false, 2) == Catch::Approx(0.8));
  CHECK(rl_shaped_reward(true, true, 7) == Catch::Approx(0.5));
}

TEST_CASE("rl_shaped_reward is non-increasing in retrievals and flat past five") {
  for (std::size_t k = 0; k < 10; ++k) {
    double here = rl_shaped_reward(true, true, k);
    double next = rl_shaped_reward(true, true, k + 1);
    CHECK(here >= next);
    CHECK(here >= 0.0);
    CHECK(here <= 1.0);
    if (k >= 5) CHECK(here == rl_shaped_reward(true, true, 5));
  }
}

TEST_CASE("trajectory JSONL round-trip keeps structure") {
  State s(sample_question());
  s = append_step(s, "q1", parametric("a1"));
  s = append_step(s, "q2",
                  Response{RetrievedResponse{
                      {Document{"d7", "t", "b", 0.5}, Document{"d9", "t", "b", 0.3}}, "a2"}});
  Trajectory traj = make_trajectory(std::move(s), "final");
  traj.correct = true;

  nlohmann::json j = trajectory_to_json(traj);
  CHECK(j.at("retrieval_count") == 1);
  CHECK(j.at("steps").size() == 2);
  CHECK(j.at("steps")[1].at("doc_ids") == nlohmann::json::array({"d7", "d9"}));

  Trajectory back = trajectory_from_json(j);
  CHECK(back.final_answer == "final");
  CHECK(back.retrieval_count == 1);
  CHECK(back.correct == true);
  CHECK(back.state.steps()[0].subquery == "q1");
  CHECK(is_retrieved(back.state.steps()[1].response));
}

TEST_CASE("unjudged trajectories serialize correct as null") {
  Trajectory traj = make_trajectory(State(sample_question()), "answer");
  nlohmann::json j = trajectory_to_json(traj);
  CHECK(j.at("correct").is_null());
  CHECK_FALSE(trajectory_from_json(j).correct.has_value());
}
