#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/protocol.hpp"

namespace deeprag {

struct ImitationExample {
  std::string prompt;      // instruction + question
  std::string completion;  // steps + final answer in the answer format
  // Disjoint, sorted [start, end) character spans over completion covering
  // exactly the Context document text; external trainers mask these from the loss.
  std::vector<std::pair<std::size_t, std::size_t>> mask_spans;
};

struct PreferencePair {
  std::string context;  // exact prompt at the decision point
  std::string chosen;
  std::string rejected;
};

inline std::string imitation_prompt(std::string_view instruction, const QAInstance& question) {
  return std::string(instruction) + "\n\n" + std::string(kQuestionMarker) + " " + question.question + "\n";
}

/// Converts a judged-correct trajectory into a Stage-I example. The completion
/// is the gateway rendering of the steps plus the final-answer line; only the
/// Context document text falls inside mask spans.
inline ImitationExample to_imitation_example(const Trajectory& traj, std::string_view instruction,
                                             std::size_t budget = kDefaultContextBudget) {
  if (!traj.correct.has_value() || !*traj.correct)
    throw RejectedTrajectory("trajectory for question " + traj.state.question().id +
                             " is not judged correct");
  ImitationExample example;
  example.prompt = imitation_prompt(instruction, traj.state.question());

  std::string& out = example.completion;
  for (const auto& step : traj.state.steps()) {
    out += std::string(kFollowUpMarker) + " " + step.subquery + "\n";
    if (const auto* r = std::get_if<RetrievedResponse>(&step.response)) {
      out += std::string(kRetrieveMarker) + "\n";
      out += std::string(kContextMarker) + " ";
      std::size_t start = out.size();
      out += render_context(r->documents, budget);
      example.mask_spans.emplace_back(start, out.size());
      out += "\n";
    }
    out += std::string(kIntermediateMarker) + " " + response_answer(step.response) + "\n";
  }
  out += std::string(kFinalMarker) + " " + traj.final_answer;
  return example;
}

/// One pair per step of the optimal trajectory: the chosen snippet head is the
/// decision the minimal-retrieval path actually took at that subquery.
inline std::vector<PreferencePair> build_preference_pairs(const QAInstance& question,
                                                          const Trajectory& optimal,
                                                          std::string_view instruction,
                                                          std::size_t budget = kDefaultContextBudget) {
  std::vector<PreferencePair> pairs;
  std::string context = imitation_prompt(instruction, question);
  for (const auto& step : optimal.state.steps()) {
    PreferencePair pair;
    pair.context = context + std::string(kFollowUpMarker) + " " + step.subquery + "\n";
    if (is_retrieved(step.response)) {
      pair.chosen = std::string(kRetrieveMarker);
      pair.rejected = std::string(kIntermediateMarker);
    } else {
      pair.chosen = std::string(kIntermediateMarker);
      pair.rejected = std::string(kRetrieveMarker);
    }
    pairs.push_back(std::move(pair));

    context += std::string(kFollowUpMarker) + " " + step.subquery + "\n";
    if (const auto* r = std::get_if<RetrievedResponse>(&step.response)) {
      context += std::string(kRetrieveMarker) + "\n";
      context += std::string(kContextMarker) + " " + render_context(r->documents, budget) + "\n";
    }
    context += std::string(kIntermediateMarker) + " " + response_answer(step.response) + "\n";
  }
  return pairs;
}

// ---- Ablation emitters --------------------------------------------------------------

/// Pairs for every explored tree node instead of only the optimal path. A
/// node's preferred branch is the one whose correct completions reach the
/// lower total retrieval count (ties prefer parametric); nodes with no correct
/// completion under either branch emit nothing. Driven by the exhaustive
/// enumeration, so fixture scale only.
inline std::vector<PreferencePair> preference_pairs_all_nodes(const QAInstance& question,
                                                              std::span<const Trajectory> terminals,
                                                              std::string_view instruction,
                                                              std::size_t budget = kDefaultContextBudget) {
  struct NodeInfo {
    std::string context;
    std::optional<std::size_t> best_parametric;  // min total cost of a correct completion
    std::optional<std::size_t> best_retrieved;
  };
  std::map<std::string, NodeInfo> nodes;  // keyed by decision-path prefix, insertion-stable

  for (const auto& traj : terminals) {
    if (!traj.correct.value_or(false)) continue;
    std::string context = imitation_prompt(instruction, question);
    std::string key;
    for (const auto& step : traj.state.steps()) {
      bool retrieved = is_retrieved(step.response);
      std::string node_key = key + "|" + step.subquery;
      NodeInfo& info = nodes.try_emplace(node_key).first->second;
      if (info.context.empty())
        info.context = context + std::string(kFollowUpMarker) + " " + step.subquery + "\n";
      auto& best = retrieved ? info.best_retrieved : info.best_parametric;
      if (!best || traj.retrieval_count < *best) best = traj.retrieval_count;

      key = node_key + (retrieved ? "#R" : "#P");
      context += std::string(kFollowUpMarker) + " " + step.subquery + "\n";
      if (const auto* r = std::get_if<RetrievedResponse>(&step.response)) {
        context += std::string(kRetrieveMarker) + "\n";
        context += std::string(kContextMarker) + " " + render_context(r->documents, budget) + "\n";
      }
      context += std::string(kIntermediateMarker) + " " + response_answer(step.response) + "\n";
    }
  }

  std::vector<PreferencePair> pairs;
  for (const auto& [key, info] : nodes) {
    if (!info.best_parametric && !info.best_retrieved) continue;
    bool prefer_parametric =
        info.best_parametric && (!info.best_retrieved || *info.best_parametric <= *info.best_retrieved);
    PreferencePair pair;
    pair.context = info.context;
    pair.chosen = prefer_parametric ? std::string(kIntermediateMarker) : std::string(kRetrieveMarker);
    pair.rejected = prefer_parametric ? std::string(kRetrieveMarker) : std::string(kIntermediateMarker);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

/// Sentence-level partial-order pairs: correct completions ranked by retrieval
/// cost, each cheaper completion preferred over the next costlier one.
inline std::vector<PreferencePair> preference_pairs_sentence_wise(const QAInstance& question,
                                                                  std::span<const Trajectory> terminals,
                                                                  std::string_view instruction,
                                                                  std::size_t budget = kDefaultContextBudget) {
  std::vector<const Trajectory*> correct;
  for (const auto& traj : terminals)
    if (traj.correct.value_or(false)) correct.push_back(&traj);
  std::stable_sort(correct.begin(), correct.end(),
                   [](const Trajectory* a, const Trajectory* b) { return a->retrieval_count < b->retrieval_count; });

  auto completion = [&](const Trajectory& traj) {
    std::string out = render_steps(traj.state, budget);
    if (!out.empty()) out += "\n";
    out += std::string(kFinalMarker) + " " + traj.final_answer;
    return out;
  };

  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i + 1 < correct.size(); ++i) {
    if (correct[i]->retrieval_count == correct[i + 1]->retrieval_count) continue;
    pairs.push_back(PreferencePair{imitation_prompt(instruction, question), completion(*correct[i]),
                                   completion(*correct[i + 1])});
  }
  return pairs;
}

// ---- File formats ---------------------------------------------------------------------

inline nlohmann::json imitation_to_json(const ImitationExample& example) {
  nlohmann::json spans = nlohmann::json::array();
  for (auto [start, end] : example.mask_spans) spans.push_back({start, end});
  return nlohmann::json{
      {"prompt", example.prompt}, {"completion", example.completion}, {"mask_spans", std::move(spans)}};
}

inline nlohmann::json pair_to_json(const PreferencePair& pair) {
  return nlohmann::json{{"context", pair.context}, {"chosen", pair.chosen}, {"rejected", pair.rejected}};
}

}  // namespace deeprag
