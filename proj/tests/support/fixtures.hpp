#pragma once

// Deterministic fixture builders shared by the unit and acceptance suites.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "deeprag/core.hpp"
#include "deeprag/model.hpp"
#include "deeprag/retriever.hpp"
#include "deeprag/tree_search.hpp"

namespace fixtures {

using deeprag::BehaviorScriptModel;
using deeprag::CorpusRecord;
using deeprag::Document;
using deeprag::QAInstance;

// ---- Random protocol trajectories (round-trip / mask checks) -------------------------

struct TrajectoryFixture {
  deeprag::Trajectory trajectory;
};

/// Random well-formed trajectory. Vocabulary is partitioned so document bodies
/// ("ctx..." words) never share long substrings with subqueries or answers.
inline deeprag::Trajectory random_trajectory(std::mt19937_64& rng, int index, bool allow_empty = true) {
  std::uniform_int_distribution<int> step_count(allow_empty ? 0 : 1, 5);
  std::uniform_int_distribution<int> doc_count(1, 3);
  std::uniform_int_distribution<int> body_tokens(5, 9);
  std::uniform_int_distribution<int> coin(0, 1);
  static const char* kWh[] = {"who", "what", "when", "where", "why"};

  QAInstance question{"q" + std::to_string(index),
                      "question topic" + std::to_string(index) + " alpha",
                      {"final entity" + std::to_string(index)}};
  int n = step_count(rng);
  deeprag::State state(question, deeprag::kDefaultMaxHistory);
  for (int s = 0; s < n; ++s) {
    std::string tag = std::to_string(index) + "x" + std::to_string(s);
    std::string subquery = std::string(kWh[static_cast<std::size_t>(s) % 5]) + " made entity" + tag +
                           (coin(rng) != 0 ? " and why" : "");
    std::string answer = "entity" + tag + (coin(rng) != 0 ? " of note" : "");
    if (coin(rng) != 0) {
      deeprag::RetrievedResponse response;
      int docs = doc_count(rng);
      for (int d = 0; d < docs; ++d) {
        std::string body;
        int tokens = body_tokens(rng);
        for (int t = 0; t < tokens; ++t) {
          if (!body.empty()) body += " ";
          body += "ctx" + tag + "d" + std::to_string(d) + "w" + std::to_string(t);
        }
        response.documents.push_back(Document{"doc" + tag + "d" + std::to_string(d), "title" + tag, body, 0.0});
      }
      response.answer = answer;
      state = deeprag::append_step(state, subquery, std::move(response));
    } else {
      state = deeprag::append_step(state, subquery, deeprag::ParametricResponse{answer});
    }
  }
  deeprag::Trajectory traj = deeprag::make_trajectory(std::move(state), question.gold_answers[0]);
  traj.correct = true;
  return traj;
}

// ---- Tree-search fixtures (behavior scripts + corpus) ---------------------------------

struct TreeFixture {
  QAInstance question;
  BehaviorScriptModel::QuestionScript script;
  std::vector<CorpusRecord> records;
  std::vector<bool> parametric_ok;
  std::vector<bool> retrieved_ok;

  /// Minimal retrieval count of a correct trajectory, or nullopt when some
  /// step cannot be answered correctly either way.
  std::optional<std::size_t> analytic_minimum() const {
    std::size_t cost = 0;
    for (std::size_t i = 0; i < parametric_ok.size(); ++i) {
      if (parametric_ok[i]) continue;
      if (!retrieved_ok[i]) return std::nullopt;
      ++cost;
    }
    return cost;
  }
};

/// One question whose step answers follow the given correctness pattern. Every
/// step gets a dedicated corpus document keyed by a unique token in the
/// subquery, so the retrieved branch always finds something.
inline TreeFixture make_tree_fixture(int index, const std::vector<bool>& parametric_ok,
                                     const std::vector<bool>& retrieved_ok) {
  TreeFixture fx;
  fx.parametric_ok = parametric_ok;
  fx.retrieved_ok = retrieved_ok;
  std::string qtag = std::to_string(index);
  fx.question = QAInstance{"tq" + qtag, "tree question " + qtag, {"final" + qtag}};
  fx.script.question = fx.question.question;
  fx.script.final_correct = "final" + qtag;
  fx.script.final_wrong = "offtrack" + qtag;
  for (std::size_t s = 0; s < parametric_ok.size(); ++s) {
    std::string tag = qtag + "x" + std::to_string(s);
    BehaviorScriptModel::ScriptStep step;
    step.subquery = "sq" + tag + " alpha";
    step.correct_answer = "ans" + tag;
    step.parametric_answer = parametric_ok[s] ? step.correct_answer : "guess" + tag;
    step.retrieved_answer = retrieved_ok[s] ? step.correct_answer : "noise" + tag;
    fx.script.steps.push_back(std::move(step));
    fx.records.push_back(CorpusRecord{
        "d" + tag,
        "sq" + tag + " ctxa" + tag + " ctxb" + tag + " ctxc" + tag + " ctxd" + tag,
        "passage " + tag});
  }
  return fx;
}

inline TreeFixture random_tree_fixture(std::mt19937_64& rng, int index) {
  std::uniform_int_distribution<int> depth(1, 4);
  std::uniform_int_distribution<int> percent(0, 99);
  int n = depth(rng);
  std::vector<bool> parametric_ok, retrieved_ok;
  for (int s = 0; s < n; ++s) {
    parametric_ok.push_back(percent(rng) < 50);
    retrieved_ok.push_back(percent(rng) < 80);
  }
  return make_tree_fixture(index, parametric_ok, retrieved_ok);
}

inline std::string decision_name(deeprag::FollowUpTurn::Decision d) {
  switch (d) {
    case deeprag::FollowUpTurn::Decision::Retrieve: return "retrieve";
    case deeprag::FollowUpTurn::Decision::Parametric: return "parametric";
    case deeprag::FollowUpTurn::Decision::Undecided: return "undecided";
  }
  return "undecided";
}

inline nlohmann::json script_to_json(const BehaviorScriptModel::QuestionScript& script) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : script.steps)
    steps.push_back({{"subquery", s.subquery},
                     {"correct_answer", s.correct_answer},
                     {"parametric_answer", s.parametric_answer},
                     {"retrieved_answer", s.retrieved_answer},
                     {"adaptive", decision_name(s.adaptive)}});
  return nlohmann::json{{"question", script.question},
                        {"final_correct", script.final_correct},
                        {"final_wrong", script.final_wrong},
                        {"steps", std::move(steps)}};
}

inline nlohmann::json scripts_to_json(const std::vector<TreeFixture>& fixtures) {
  nlohmann::json questions = nlohmann::json::array();
  for (const auto& fx : fixtures) questions.push_back(script_to_json(fx.script));
  return nlohmann::json{{"questions", std::move(questions)}};
}

inline std::string corpus_to_tsv(const std::vector<CorpusRecord>& records, bool header = true) {
  std::string out;
  if (header) out += "id\ttext\ttitle\n";
  for (const auto& r : records) out += r.doc_id + "\t" + r.body + "\t" + r.title + "\n";
  return out;
}

inline std::string dataset_to_jsonl(const std::vector<QAInstance>& dataset) {
  std::string out;
  for (const auto& qa : dataset) {
    nlohmann::json j{{"id", qa.id}, {"question", qa.question}, {"answers", qa.gold_answers}};
    out += j.dump() + "\n";
  }
  return out;
}

/// Index + gateway wired for a set of tree fixtures, decomposer and target
/// sharing one behavior script. The index sits behind a shared_ptr so its
/// address survives moves of the harness.
struct TreeHarness {
  std::shared_ptr<const deeprag::SearchIndex> index_ptr;
  std::shared_ptr<deeprag::ModelGateway> gateway;

  const deeprag::SearchIndex& index() const { return *index_ptr; }

  static TreeHarness make(const std::vector<TreeFixture>& fixtures) {
    std::vector<CorpusRecord> records;
    auto model = std::make_shared<BehaviorScriptModel>();
    for (const auto& fx : fixtures) {
      records.insert(records.end(), fx.records.begin(), fx.records.end());
      model->add(fx.script);
    }
    TreeHarness harness{
        std::make_shared<const deeprag::SearchIndex>(deeprag::SearchIndex::build(records)),
        std::make_shared<deeprag::ModelGateway>()};
    harness.gateway->set_role(std::string(deeprag::kDecomposerRole), model);
    harness.gateway->set_role(std::string(deeprag::kTargetRole), model);
    return harness;
  }
};

}  // namespace fixtures
