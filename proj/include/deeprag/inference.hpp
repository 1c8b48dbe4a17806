#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/metrics.hpp"
#include "deeprag/model.hpp"
#include "deeprag/protocol.hpp"
#include "deeprag/retriever.hpp"
#include "deeprag/tree_search.hpp"

namespace deeprag {

enum class InferenceMode { Adaptive, RetrieveEveryStep, ParametricOnly };

inline std::string_view to_string(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::Adaptive: return "adaptive";
    case InferenceMode::RetrieveEveryStep: return "retrieve-all";
    case InferenceMode::ParametricOnly: return "parametric";
  }
  return "unknown";
}

inline InferenceMode inference_mode_from_string(std::string_view s) {
  if (s == "adaptive") return InferenceMode::Adaptive;
  if (s == "retrieve-all") return InferenceMode::RetrieveEveryStep;
  if (s == "parametric") return InferenceMode::ParametricOnly;
  throw Error("unknown inference mode: " + std::string(s));
}

/// Retrieval access point for the inference loop; lets tests interpose a
/// counting wrapper to prove a mode never touched the index.
class SearchBackend {
 public:
  virtual ~SearchBackend() = default;
  virtual std::vector<Document> search(std::string_view query, std::size_t k) const = 0;
};

class IndexSearcher : public SearchBackend {
 public:
  explicit IndexSearcher(const SearchIndex& index) : index_(index) {}
  std::vector<Document> search(std::string_view query, std::size_t k) const override {
    return index_.search(query, k);
  }

 private:
  const SearchIndex& index_;
};

class CountingSearcher : public SearchBackend {
 public:
  explicit CountingSearcher(const SearchBackend& inner) : inner_(inner) {}
  std::vector<Document> search(std::string_view query, std::size_t k) const override {
    ++count_;
    return inner_.search(query, k);
  }
  std::size_t count() const { return count_.load(); }

 private:
  const SearchBackend& inner_;
  mutable std::atomic<std::size_t> count_{0};
};

struct InferenceResult {
  std::string question_id;
  std::string final_answer;
  Trajectory trajectory;
  std::size_t n_subqueries = 0;
  std::size_t n_retrievals = 0;
  std::size_t model_calls = 0;
  double wall_time_s = 0.0;
  bool failed = false;
  std::string fail_reason;
};

/// Drives one question through the MDP. Adaptive mode lets the model's own
/// markers pick the knowledge source; RetrieveEveryStep forces retrieval on
/// every subquery; ParametricOnly never invokes the search backend. Failures
/// (double-malformed turns, budget exhaustion) come back as a failed result
/// with an empty answer, never as an exception.
inline InferenceResult run_question(const QAInstance& question, ModelGateway& gateway,
                                    const std::string& role, const SearchBackend& searcher,
                                    InferenceMode mode, const SearchBudget& budget, std::size_t k,
                                    std::string_view instruction = kDefaultInstruction) {
  validate(question);
  validate(budget);
  auto started = std::chrono::steady_clock::now();

  State state(question, budget.max_depth);
  std::size_t model_calls = 0;
  std::optional<std::string> final_answer;
  bool depth_forced = false;
  std::string fail_reason;
  std::unordered_set<std::string> seen_subqueries;

  auto generate = [&](const Prompt& prompt, std::vector<std::string> stop_markers,
                      std::int64_t seed) -> std::optional<std::string> {
    if (model_calls >= budget.max_model_calls) {
      fail_reason = "model-call budget exhausted";
      return std::nullopt;
    }
    ++model_calls;
    GenerationRequest request;
    request.prompt = prompt;
    request.stop_markers = std::move(stop_markers);
    request.seed = seed;
    return gateway.generate(role, request);
  };

  // Continuation after a forced prefix; empty answers count as malformed.
  auto forced_generate = [&](ForcedContinuation forced, std::string_view on_empty) -> std::optional<std::string> {
    Prompt prompt = render_prompt(instruction, state, std::move(forced));
    std::vector<std::string> stops{std::string(kFollowUpMarker), std::string(kFinalMarker),
                                   std::string(kQuestionMarker)};
    for (std::int64_t seed = 0; seed <= 1; ++seed) {
      auto raw = generate(prompt, stops, seed);
      if (!raw) return std::nullopt;
      std::string answer = std::get<FinalTurn>(parse_turn(*raw, ParseMode::AnswerContinuation)).answer;
      if (!answer.empty()) return answer;
    }
    fail_reason = std::string(on_empty);
    return std::nullopt;
  };

  auto force_final = [&](bool forced_by_depth) {
    auto answer = forced_generate(FinalAnswerContinuation{}, "empty forced final answer twice");
    if (answer) {
      final_answer = *answer;
      depth_forced = forced_by_depth;
    }
  };

  while (!final_answer && fail_reason.empty()) {
    if (state.depth() >= budget.max_depth) {
      force_final(true);
      break;
    }

    // Opening turn, with one retry at seed+1 on a malformed emission.
    Prompt prompt = render_prompt(instruction, state);
    std::optional<ParsedTurn> parsed;
    for (std::int64_t seed = 0; seed <= 1; ++seed) {
      auto raw = generate(prompt, {std::string(kContextMarker)}, seed);
      if (!raw) break;
      ParsedTurn turn = parse_turn(*raw, ParseMode::OpeningTurn);
      if (!std::holds_alternative<MalformedTurn>(turn)) {
        parsed = std::move(turn);
        break;
      }
      if (seed == 1) fail_reason = "malformed model turn twice: " + std::get<MalformedTurn>(turn).snippet;
    }
    if (!parsed) break;

    if (const auto* fin = std::get_if<FinalTurn>(&*parsed)) {
      final_answer = fin->answer;
      break;
    }

    const auto& follow = std::get<FollowUpTurn>(*parsed);
    const std::string& subquery = follow.subquery;
    if (!seen_subqueries.insert(normalize_answer(subquery)).second) {
      // Repetition guard: a repeated subquery would loop; wrap up instead.
      force_final(false);
      break;
    }

    bool want_retrieval = false;
    switch (mode) {
      case InferenceMode::Adaptive:
        want_retrieval = follow.decision == FollowUpTurn::Decision::Retrieve;
        break;
      case InferenceMode::RetrieveEveryStep:
        want_retrieval = true;
        break;
      case InferenceMode::ParametricOnly:
        want_retrieval = false;
        break;
    }

    if (want_retrieval) {
      std::vector<Document> documents = searcher.search(subquery, k);
      if (!documents.empty()) {
        auto answer = forced_generate(RetrievedContinuation{subquery, documents},
                                      "empty retrieved answer twice");
        if (!answer) break;
        state = append_step(state, subquery, RetrievedResponse{std::move(documents), *answer});
        continue;
      }
      // Nothing shares a token with the subquery; fall back to parametric.
    }

    if (!want_retrieval && follow.decision == FollowUpTurn::Decision::Parametric &&
        !follow.answer.empty()) {
      state = append_step(state, subquery, ParametricResponse{follow.answer});
      continue;
    }
    auto answer = forced_generate(ParametricContinuation{subquery}, "empty parametric answer twice");
    if (!answer) break;
    state = append_step(state, subquery, ParametricResponse{*answer});
  }

  InferenceResult result;
  result.question_id = question.id;
  result.n_subqueries = state.depth();
  result.n_retrievals = retrieval_count(state);
  result.model_calls = model_calls;
  if (final_answer) {
    result.final_answer = *final_answer;
    result.trajectory = make_trajectory(std::move(state), *final_answer);
    result.trajectory.depth_forced = depth_forced;
  } else {
    result.failed = true;
    result.fail_reason = fail_reason.empty() ? "no final answer" : fail_reason;
    result.trajectory = make_trajectory(std::move(state), "");
  }
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// Runs a batch across a worker pool; results come back in input order.
inline std::vector<InferenceResult> run_batch(std::span<const QAInstance> questions,
                                              ModelGateway& gateway, const std::string& role,
                                              const SearchBackend& searcher, InferenceMode mode,
                                              const SearchBudget& budget, std::size_t k,
                                              std::size_t jobs,
                                              std::string_view instruction = kDefaultInstruction) {
  if (jobs == 0) jobs = 1;
  std::vector<InferenceResult> results(questions.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= questions.size()) return;
      try {
        results[i] = run_question(questions[i], gateway, role, searcher, mode, budget, k, instruction);
      } catch (const std::exception& e) {
        InferenceResult failed;
        failed.question_id = questions[i].id;
        failed.failed = true;
        failed.fail_reason = e.what();
        failed.trajectory = make_trajectory(State(questions[i], budget.max_depth), "");
        results[i] = std::move(failed);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::min(jobs, questions.size()); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return results;
}

// ---- Serialization -------------------------------------------------------------------

inline nlohmann::json result_to_json(const InferenceResult& result) {
  nlohmann::json j{{"question_id", result.question_id},
                   {"final_answer", result.final_answer},
                   {"trajectory", trajectory_to_json(result.trajectory)},
                   {"n_subqueries", result.n_subqueries},
                   {"n_retrievals", result.n_retrievals},
                   {"model_calls", result.model_calls},
                   {"wall_time_s", result.wall_time_s},
                   {"failed", result.failed}};
  if (result.failed) j["fail_reason"] = result.fail_reason;
  return j;
}

inline InferenceResult result_from_json(const nlohmann::json& j) {
  InferenceResult result;
  result.question_id = j.at("question_id").get<std::string>();
  result.final_answer = j.at("final_answer").get<std::string>();
  result.trajectory = trajectory_from_json(j.at("trajectory"));
  result.n_subqueries = j.at("n_subqueries").get<std::size_t>();
  result.n_retrievals = j.at("n_retrievals").get<std::size_t>();
  result.model_calls = j.at("model_calls").get<std::size_t>();
  result.wall_time_s = j.at("wall_time_s").get<double>();
  result.failed = j.at("failed").get<bool>();
  if (j.contains("fail_reason")) result.fail_reason = j.at("fail_reason").get<std::string>();
  return result;
}

}  // namespace deeprag
