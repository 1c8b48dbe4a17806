#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeprag/errors.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

/// Default cap on subqueries per question. Most multi-hop questions resolve in
/// 3-5 steps; 8 leaves headroom without letting runaway decompositions grow.
inline constexpr std::size_t kDefaultMaxHistory = 8;

struct QAInstance {
  std::string id;
  std::string question;
  std::vector<std::string> gold_answers;  // aliases, all acceptable
};

inline void validate(const QAInstance& qa) {
  if (trim_view(qa.question).empty()) throw Error("question is empty: id=" + qa.id);
  if (qa.gold_answers.empty()) throw Error("no gold answers: id=" + qa.id);
  for (const auto& g : qa.gold_answers)
    if (g.empty()) throw Error("empty gold answer: id=" + qa.id);
}

struct Document {
  std::string doc_id;
  std::string title;
  std::string body;
  double score = 0.0;
};

struct ParametricResponse {
  std::string answer;
};

struct RetrievedResponse {
  std::vector<Document> documents;  // never empty
  std::string answer;
};

using Response = std::variant<ParametricResponse, RetrievedResponse>;

inline bool is_retrieved(const Response& r) { return std::holds_alternative<RetrievedResponse>(r); }

inline const std::string& response_answer(const Response& r) {
  if (const auto* p = std::get_if<ParametricResponse>(&r)) return p->answer;
  return std::get<RetrievedResponse>(r).answer;
}

struct Step {
  std::string subquery;
  Response response;
};

/// Partial solution: the question plus the ordered subquery/response steps
/// taken so far. Immutable; append_step returns a fresh value.
class State {
 public:
  State() : State(QAInstance{}) {}  // placeholder; validate() gates real use

  State(QAInstance question, std::size_t max_steps = kDefaultMaxHistory)
      : question_(std::make_shared<const QAInstance>(std::move(question))), max_steps_(max_steps) {}

  const QAInstance& question() const { return *question_; }
  std::span<const Step> steps() const { return steps_; }
  std::size_t depth() const { return steps_.size(); }
  std::size_t max_steps() const { return max_steps_; }

  friend State append_step(const State& state, std::string_view subquery, Response response);

 private:
  std::shared_ptr<const QAInstance> question_;
  std::vector<Step> steps_;
  std::size_t max_steps_;
};

inline std::size_t retrieval_count(const State& state) {
  std::size_t n = 0;
  for (const auto& s : state.steps())
    if (is_retrieved(s.response)) ++n;
  return n;
}

/// Returns a state with one more step; the input is untouched. Stored subquery
/// and answer are whitespace-trimmed.
inline State append_step(const State& state, std::string_view subquery, Response response) {
  if (state.depth() >= state.max_steps())
    throw DepthExceeded("state already holds " + std::to_string(state.max_steps()) + " steps");
  std::string q = trim(subquery);
  if (q.empty()) throw Error("subquery is empty");
  if (auto* r = std::get_if<RetrievedResponse>(&response)) {
    if (r->documents.empty()) throw Error("retrieved response carries no documents");
    r->answer = trim(r->answer);
    if (r->answer.empty()) throw Error("response answer is empty");
  } else {
    auto& p = std::get<ParametricResponse>(response);
    p.answer = trim(p.answer);
    if (p.answer.empty()) throw Error("response answer is empty");
  }
  State next = state;
  next.steps_.push_back(Step{std::move(q), std::move(response)});
  return next;
}

enum class Termination { Continue, Terminate };
enum class Atomic { Retrieve, Parametric };

/// Per-step action: the termination decision, plus the atomic decision when
/// continuing. The atomic half exists exactly when termination == Continue.
class Action {
 public:
  static Action terminate() { return Action(Termination::Terminate, std::nullopt); }
  static Action continue_with(Atomic atomic) { return Action(Termination::Continue, atomic); }

  Termination termination() const { return termination_; }
  std::optional<Atomic> atomic() const { return atomic_; }

 private:
  Action(Termination t, std::optional<Atomic> a) : termination_(t), atomic_(a) {}
  Termination termination_;
  std::optional<Atomic> atomic_;
};

struct Trajectory {
  State state;
  std::string final_answer;
  std::size_t retrieval_count = 0;
  std::optional<bool> correct;
  bool depth_forced = false;  // final answer was forced by hitting the depth cap
};

inline Trajectory make_trajectory(State state, std::string final_answer) {
  std::size_t n = retrieval_count(state);
  return Trajectory{std::move(state), std::move(final_answer), n, std::nullopt, false};
}

/// Terminal reward ordered so that any correct outcome beats an incorrect one,
/// and among correct outcomes fewer retrievals rank higher. Encoding the
/// infinite miss penalty as a bottom element keeps the ranking exact without
/// floating-point infinities.
class Reward {
 public:
  static Reward incorrect() { return Reward(false, 0); }
  static Reward correct(std::size_t retrievals) { return Reward(true, retrievals); }

  bool is_correct() const { return correct_; }
  std::size_t retrievals() const { return retrievals_; }

  friend bool operator==(const Reward& a, const Reward& b) {
    if (a.correct_ != b.correct_) return false;
    return !a.correct_ || a.retrievals_ == b.retrievals_;
  }

  friend std::strong_ordering operator<=>(const Reward& a, const Reward& b) {
    if (a.correct_ != b.correct_) return a.correct_ ? std::strong_ordering::greater : std::strong_ordering::less;
    if (!a.correct_) return std::strong_ordering::equal;
    return b.retrievals_ <=> a.retrievals_;  // fewer retrievals ranks higher
  }

 private:
  Reward(bool correct, std::size_t retrievals) : correct_(correct), retrievals_(retrievals) {}
  bool correct_;
  std::size_t retrievals_;
};

using AnswerMatcher = std::function<bool(const std::string&, const std::vector<std::string>&)>;

inline Reward trajectory_reward(const Trajectory& traj, const QAInstance& gold, const AnswerMatcher& matcher) {
  if (traj.final_answer.empty()) throw Error("trajectory has no final answer");
  return matcher(traj.final_answer, gold.gold_answers) ? Reward::correct(traj.retrieval_count)
                                                       : Reward::incorrect();
}

/// Shaped scalar reward: 0 for wrong answer + wrong format, 0.1 for wrong
/// answer in the right format, and 1 - 0.1*min(5, retrievals) for a correct
/// answer. Always in [0, 1].
inline double rl_shaped_reward(bool answer_correct, bool format_ok, std::size_t retrieve_count) {
  if (!answer_correct) return format_ok ? 0.1 : 0.0;
  return 1.0 - 0.1 * static_cast<double>(std::min<std::size_t>(5, retrieve_count));
}

// ---- JSONL serialization ----------------------------------------------------

inline nlohmann::json trajectory_to_json(const Trajectory& traj) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& step : traj.state.steps()) {
    nlohmann::json js{{"subquery", step.subquery},
                      {"retrieved", is_retrieved(step.response)},
                      {"answer", response_answer(step.response)}};
    nlohmann::json ids = nlohmann::json::array();
    if (const auto* r = std::get_if<RetrievedResponse>(&step.response))
      for (const auto& d : r->documents) ids.push_back(d.doc_id);
    js["doc_ids"] = std::move(ids);
    steps.push_back(std::move(js));
  }
  nlohmann::json out{{"id", traj.state.question().id},
                     {"question", traj.state.question().question},
                     {"steps", std::move(steps)},
                     {"final_answer", traj.final_answer},
                     {"retrieval_count", traj.retrieval_count},
                     {"depth_forced", traj.depth_forced}};
  out["correct"] = traj.correct.has_value() ? nlohmann::json(*traj.correct) : nlohmann::json(nullptr);
  return out;
}

/// Rebuilds a trajectory from its JSONL form. Retrieved documents come back as
/// id-only shells (bodies are not serialized); gold answers are not part of
/// the record, so the embedded question carries none.
inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  QAInstance qa{j.at("id").get<std::string>(), j.at("question").get<std::string>(), {}};
  std::size_t n_steps = j.at("steps").size();
  State state(std::move(qa), std::max(kDefaultMaxHistory, n_steps));
  for (const auto& js : j.at("steps")) {
    std::string subquery = js.at("subquery").get<std::string>();
    std::string answer = js.at("answer").get<std::string>();
    if (js.at("retrieved").get<bool>()) {
      RetrievedResponse r;
      for (const auto& id : js.at("doc_ids")) r.documents.push_back(Document{id.get<std::string>(), "", "", 0.0});
      r.answer = std::move(answer);
      state = append_step(state, subquery, std::move(r));
    } else {
      state = append_step(state, subquery, ParametricResponse{std::move(answer)});
    }
  }
  Trajectory traj = make_trajectory(std::move(state), j.at("final_answer").get<std::string>());
  if (j.contains("correct") && !j.at("correct").is_null()) traj.correct = j.at("correct").get<bool>();
  if (j.contains("depth_forced")) traj.depth_forced = j.at("depth_forced").get<bool>();
  return traj;
}

}  // namespace deeprag
