#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/metrics.hpp"
#include "deeprag/model.hpp"
#include "deeprag/protocol.hpp"
#include "deeprag/retriever.hpp"

namespace deeprag {

struct SearchBudget {
  std::size_t max_depth = kDefaultMaxHistory;  // max history length T
  std::size_t max_expansions = 64;
  std::size_t max_model_calls = 256;
};

inline void validate(const SearchBudget& budget) {
  if (budget.max_depth == 0 || budget.max_expansions == 0 || budget.max_model_calls == 0)
    throw Error("search budget fields must be positive");
}

struct SelectionPolicy {
  enum class Kind { Minimal, Most, Random };
  Kind kind = Kind::Minimal;
  std::uint64_t seed = 0;

  static SelectionPolicy minimal() { return {Kind::Minimal, 0}; }
  static SelectionPolicy most() { return {Kind::Most, 0}; }
  static SelectionPolicy random(std::uint64_t seed) { return {Kind::Random, seed}; }
};

struct SearchNode {
  State state;
  std::size_t retrieval_count;
  std::uint64_t sequence_number;
};

struct DequeueEvent {
  std::uint64_t sequence_number;
  std::size_t depth;
  std::size_t retrieval_count;
  // Extremes over the open list at dequeue time, dequeued node included;
  // lets logs prove the queue discipline (Minimal pops the min, Most the max).
  std::size_t open_min_count;
  std::size_t open_max_count;
};

enum class SearchOutcome { Found, QueueEmpty, BudgetExhausted };

inline std::string_view to_string(SearchOutcome outcome) {
  switch (outcome) {
    case SearchOutcome::Found: return "found";
    case SearchOutcome::QueueEmpty: return "queue_empty";
    case SearchOutcome::BudgetExhausted: return "budget_exhausted";
  }
  return "unknown";
}

struct SearchResult {
  std::optional<Trajectory> trajectory;
  SearchOutcome outcome = SearchOutcome::QueueEmpty;
  std::vector<DequeueEvent> dequeues;
  std::size_t terminals_judged = 0;
  std::size_t expansions = 0;
  std::size_t model_calls = 0;
};

namespace detail {

/// Rendering/generation/judging plumbing shared by the priority-queue search
/// and the exhaustive enumerator. Opening turns are memoized per transcript so
/// a state is never sent to the model twice within one search.
class NodeExpander {
 public:
  NodeExpander(ModelGateway& gateway, std::string decomposer_role, std::string target_role,
               const SearchIndex& index, std::size_t k, std::size_t max_model_calls,
               std::string_view instruction)
      : gateway_(gateway),
        decomposer_(std::move(decomposer_role)),
        target_(std::move(target_role)),
        index_(index),
        k_(k),
        max_model_calls_(max_model_calls),
        instruction_(instruction) {}

  std::size_t model_calls() const { return model_calls_; }

  ParsedTurn opening_turn(const State& state) {
    Prompt prompt = render_prompt(instruction_, state);
    auto it = opening_memo_.find(prompt.transcript);
    if (it != opening_memo_.end()) return it->second;
    std::string raw = generate(decomposer_, prompt, {std::string(kContextMarker)});
    ParsedTurn parsed = parse_turn(raw, ParseMode::OpeningTurn);
    if (std::holds_alternative<MalformedTurn>(parsed)) {
      raw = generate(decomposer_, prompt, {std::string(kContextMarker)}, /*seed=*/1);
      parsed = parse_turn(raw, ParseMode::OpeningTurn);
      if (const auto* bad = std::get_if<MalformedTurn>(&parsed))
        throw Error("malformed decomposer turn at depth " + std::to_string(state.depth()) + ": " +
                    bad->snippet);
    }
    opening_memo_.emplace(prompt.transcript, parsed);
    return parsed;
  }

  std::string forced_answer(const std::string& role, const State& state, ForcedContinuation forced) {
    Prompt prompt = render_prompt(instruction_, state, std::move(forced));
    std::string raw = generate(role, prompt,
                               {std::string(kFollowUpMarker), std::string(kFinalMarker),
                                std::string(kQuestionMarker)});
    return std::get<FinalTurn>(parse_turn(raw, ParseMode::AnswerContinuation)).answer;
  }

  /// Parametric child; answered by the target model role.
  State parametric_child(const State& state, const std::string& subquery) {
    std::string answer = forced_answer(target_, state, ParametricContinuation{subquery});
    return append_step(state, subquery, ParametricResponse{std::move(answer)});
  }

  /// Retrieved child, or nullopt when no document shares a token with the
  /// subquery (a Retrieved response cannot be empty).
  std::optional<State> retrieved_child(const State& state, const std::string& subquery) {
    std::vector<Document> documents = index_.search(subquery, k_);
    if (documents.empty()) return std::nullopt;
    std::string answer = forced_answer(decomposer_, state, RetrievedContinuation{subquery, documents});
    return append_step(state, subquery, RetrievedResponse{std::move(documents), std::move(answer)});
  }

  Trajectory finish(const State& state, std::string final_answer, bool depth_forced) {
    Trajectory traj = make_trajectory(state, std::move(final_answer));
    traj.depth_forced = depth_forced;
    traj.correct = exact_match(traj.final_answer, state.question().gold_answers);
    return traj;
  }

  /// Terminal handling for a dequeued node: final turn already emitted, or the
  /// depth cap forcing one. Returns nullopt for nonterminal nodes.
  std::optional<Trajectory> try_terminal(const State& state, const ParsedTurn* opening) {
    if (opening != nullptr) {
      if (const auto* fin = std::get_if<FinalTurn>(opening)) return finish(state, fin->answer, false);
      return std::nullopt;
    }
    // Depth cap reached before any opening turn was requested.
    std::string answer = forced_answer(decomposer_, state, FinalAnswerContinuation{});
    return finish(state, std::move(answer), true);
  }

 private:
  std::string generate(const std::string& role, const Prompt& prompt,
                       std::vector<std::string> stop_markers, std::int64_t seed = 0) {
    if (model_calls_ >= max_model_calls_)
      throw BudgetExhausted("model-call budget exhausted (" + std::to_string(max_model_calls_) + ")");
    ++model_calls_;
    GenerationRequest request;
    request.prompt = prompt;
    request.stop_markers = std::move(stop_markers);
    request.seed = seed;
    return gateway_.generate(role, request);
  }

  ModelGateway& gateway_;
  std::string decomposer_;
  std::string target_;
  const SearchIndex& index_;
  std::size_t k_;
  std::size_t max_model_calls_;
  std::string instruction_;
  std::unordered_map<std::string, ParsedTurn> opening_memo_;
  std::size_t model_calls_ = 0;
};

}  // namespace detail

/// Best-first search over the retrieve/parametric binary tree. Under Minimal
/// the open list is ordered by (retrieval count asc, insertion order asc), so
/// the first correct trajectory dequeued is one of minimal retrieval cost;
/// Most flips the count order; Random dequeues uniformly under the given seed.
/// Returns an absent trajectory when every branch judged incorrect (queue
/// empty) or when a budget cap stopped the search first.
inline SearchResult synthesize(const QAInstance& question, ModelGateway& gateway,
                               const std::string& decomposer_role, const std::string& target_role,
                               const SearchIndex& index, const SearchBudget& budget, std::size_t k,
                               const SelectionPolicy& policy,
                               std::string_view instruction = kDefaultInstruction) {
  validate(question);
  validate(budget);
  detail::NodeExpander expander(gateway, decomposer_role, target_role, index, k,
                                budget.max_model_calls, instruction);
  SearchResult result;
  std::mt19937_64 rng(policy.seed);

  std::vector<SearchNode> open;
  std::uint64_t next_seq = 0;
  open.push_back(SearchNode{State(question, budget.max_depth), 0, next_seq++});

  auto pick = [&]() -> std::size_t {
    if (policy.kind == SelectionPolicy::Kind::Random) {
      std::uniform_int_distribution<std::size_t> dist(0, open.size() - 1);
      return dist(rng);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < open.size(); ++i) {
      const auto& a = open[i];
      const auto& b = open[best];
      bool better;
      if (policy.kind == SelectionPolicy::Kind::Minimal)
        better = a.retrieval_count != b.retrieval_count ? a.retrieval_count < b.retrieval_count
                                                        : a.sequence_number < b.sequence_number;
      else
        better = a.retrieval_count != b.retrieval_count ? a.retrieval_count > b.retrieval_count
                                                        : a.sequence_number < b.sequence_number;
      if (better) best = i;
    }
    return best;
  };

  try {
    while (!open.empty()) {
      std::size_t idx = pick();
      std::size_t open_min = open[0].retrieval_count, open_max = open[0].retrieval_count;
      for (const auto& n : open) {
        open_min = std::min(open_min, n.retrieval_count);
        open_max = std::max(open_max, n.retrieval_count);
      }
      SearchNode node = std::move(open[idx]);
      open.erase(open.begin() + static_cast<std::ptrdiff_t>(idx));
      result.dequeues.push_back(DequeueEvent{node.sequence_number, node.state.depth(),
                                             node.retrieval_count, open_min, open_max});

      std::optional<ParsedTurn> opening;
      if (node.state.depth() < budget.max_depth) opening = expander.opening_turn(node.state);

      std::optional<Trajectory> terminal =
          expander.try_terminal(node.state, opening ? &*opening : nullptr);
      if (terminal) {
        ++result.terminals_judged;
        if (terminal->correct.value_or(false)) {
          result.trajectory = std::move(terminal);
          result.outcome = SearchOutcome::Found;
          break;
        }
        continue;  // incorrect terminal: discard, keep searching
      }

      if (result.expansions >= budget.max_expansions)
        throw BudgetExhausted("expansion budget exhausted (" + std::to_string(budget.max_expansions) + ")");
      ++result.expansions;

      const auto& follow = std::get<FollowUpTurn>(*opening);
      // Parametric child first: FIFO tie-breaking then prefers the cheap branch.
      State parametric = expander.parametric_child(node.state, follow.subquery);
      open.push_back(SearchNode{std::move(parametric), node.retrieval_count, next_seq++});
      std::optional<State> retrieved = expander.retrieved_child(node.state, follow.subquery);
      if (retrieved)
        open.push_back(SearchNode{std::move(*retrieved), node.retrieval_count + 1, next_seq++});
    }
  } catch (const BudgetExhausted&) {
    result.outcome = SearchOutcome::BudgetExhausted;
  }
  if (result.outcome != SearchOutcome::Found && result.outcome != SearchOutcome::BudgetExhausted)
    result.outcome = SearchOutcome::QueueEmpty;
  result.model_calls = expander.model_calls();
  return result;
}

/// Exhaustive oracle: walks every retrieve/parametric decision vector and
/// returns every terminal trajectory, each judged against gold. Exponential in
/// depth; meant for fixtures.
inline std::vector<Trajectory> enumerate_all(const QAInstance& question, ModelGateway& gateway,
                                             const std::string& decomposer_role,
                                             const std::string& target_role, const SearchIndex& index,
                                             const SearchBudget& budget, std::size_t k,
                                             std::string_view instruction = kDefaultInstruction) {
  validate(question);
  validate(budget);
  detail::NodeExpander expander(gateway, decomposer_role, target_role, index, k,
                                budget.max_model_calls, instruction);
  std::vector<Trajectory> terminals;
  std::size_t expansions = 0;

  std::vector<State> stack;
  stack.push_back(State(question, budget.max_depth));
  while (!stack.empty()) {
    State state = std::move(stack.back());
    stack.pop_back();

    std::optional<ParsedTurn> opening;
    if (state.depth() < budget.max_depth) opening = expander.opening_turn(state);
    std::optional<Trajectory> terminal = expander.try_terminal(state, opening ? &*opening : nullptr);
    if (terminal) {
      terminals.push_back(std::move(*terminal));
      continue;
    }

    if (expansions >= budget.max_expansions)
      throw BudgetExhausted("enumeration expansion budget exhausted (" +
                            std::to_string(budget.max_expansions) + ")");
    ++expansions;
    const auto& follow = std::get<FollowUpTurn>(*opening);
    std::optional<State> retrieved = expander.retrieved_child(state, follow.subquery);
    if (retrieved) stack.push_back(std::move(*retrieved));
    stack.push_back(expander.parametric_child(state, follow.subquery));
  }
  return terminals;
}

// ---- Run logs ---------------------------------------------------------------------

/// One JSON object per line: every dequeue, then the outcome; the record the
/// ablation and acceptance checks read.
inline std::vector<std::string> search_log_lines(const QAInstance& question, const SearchResult& result) {
  std::vector<std::string> lines;
  for (const auto& d : result.dequeues) {
    nlohmann::json j{{"event", "dequeue"},
                     {"question_id", question.id},
                     {"sequence_number", d.sequence_number},
                     {"depth", d.depth},
                     {"retrieval_count", d.retrieval_count},
                     {"open_min_count", d.open_min_count},
                     {"open_max_count", d.open_max_count}};
    lines.push_back(j.dump());
  }
  nlohmann::json j{{"event", "result"},
                   {"question_id", question.id},
                   {"outcome", std::string(to_string(result.outcome))},
                   {"terminals_judged", result.terminals_judged},
                   {"expansions", result.expansions},
                   {"model_calls", result.model_calls}};
  if (result.trajectory) j["retrieval_count"] = result.trajectory->retrieval_count;
  lines.push_back(j.dump());
  return lines;
}

}  // namespace deeprag
