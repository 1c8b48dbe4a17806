#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "deeprag/core.hpp"
#include "deeprag/errors.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

// The marker grammar is the training format: line-anchored, case-sensitive,
// byte-for-byte. Surrounding whitespace on a line is tolerated when parsing.
inline constexpr std::string_view kQuestionMarker = "Question:";
inline constexpr std::string_view kFollowUpMarker = "Follow up:";
inline constexpr std::string_view kRetrieveMarker = "Let's search the question in Wikipedia.";
inline constexpr std::string_view kContextMarker = "Context:";
inline constexpr std::string_view kIntermediateMarker = "Intermediate answer:";
inline constexpr std::string_view kFinalMarker = "So the final answer is:";

inline constexpr std::string_view kDefaultInstruction =
    "Instruction: You are a helpful Retrieval-Augmented Generation (RAG) model. Your task is to "
    "answer questions by logically decomposing them into clear sub-questions and iteratively "
    "addressing each one.\n"
    "Use \"Follow up:\" to introduce each sub-question and \"Intermediate answer:\" to provide "
    "answers.\n"
    "For each sub-question, decide whether you can provide a direct answer or if additional "
    "information is required. If additional information is needed, state, \"Let's search the "
    "question in Wikipedia.\" and then use the retrieved information to respond comprehensively. "
    "If a direct answer is possible, provide it immediately without searching.";

/// Per-document byte budget when document bodies are rendered into a prompt.
/// The index keeps full text; only the rendering is bounded.
inline constexpr std::size_t kDefaultContextBudget = 1500;

struct Prompt {
  std::string instruction;
  std::string transcript;                    // starts with "Question: "
  std::optional<std::string> forced_prefix;  // protocol line(s) the model must continue from

  /// Transcript plus forced prefix; the text a completion backend sees after
  /// the instruction.
  std::string full_text() const {
    if (!forced_prefix) return transcript;
    return transcript + "\n" + *forced_prefix;
  }
};

struct ParametricContinuation {
  std::string subquery;
};
struct RetrievedContinuation {
  std::string subquery;
  std::vector<Document> documents;  // non-empty
};
struct FinalAnswerContinuation {};

using ForcedContinuation = std::variant<ParametricContinuation, RetrievedContinuation, FinalAnswerContinuation>;

/// Document bodies truncated to the budget and joined with single spaces:
/// the text of one "Context:" line.
inline std::string render_context(std::span<const Document> documents,
                                  std::size_t budget = kDefaultContextBudget) {
  std::string out;
  for (const auto& doc : documents) {
    if (!out.empty()) out.push_back(' ');
    out += truncate_to_budget(doc.body, budget);
  }
  return out;
}

namespace detail {

inline void append_step_lines(std::string& out, const Step& step, std::size_t budget) {
  out += std::string(kFollowUpMarker) + " " + step.subquery + "\n";
  if (const auto* r = std::get_if<RetrievedResponse>(&step.response)) {
    out += std::string(kRetrieveMarker) + "\n";
    out += std::string(kContextMarker) + " " + render_context(r->documents, budget) + "\n";
  }
  out += std::string(kIntermediateMarker) + " " + response_answer(step.response);
}

}  // namespace detail

/// Serializes the steps of a state in the answer format, one block per step,
/// blocks separated by newlines, no trailing newline.
inline std::string render_steps(const State& state, std::size_t budget = kDefaultContextBudget) {
  std::string out;
  for (const auto& step : state.steps()) {
    if (!out.empty()) out.push_back('\n');
    detail::append_step_lines(out, step, budget);
  }
  return out;
}

/// Renders a state into a prompt. A forced continuation pins the next
/// protocol line(s): for step continuations the forced prefix ends with
/// "Intermediate answer:" so the model emits only the answer text; for a
/// forced final answer it ends with "So the final answer is:".
inline Prompt render_prompt(std::string_view instruction, const State& state,
                            std::optional<ForcedContinuation> forced = std::nullopt,
                            std::size_t budget = kDefaultContextBudget) {
  Prompt prompt;
  prompt.instruction = std::string(instruction);
  prompt.transcript = std::string(kQuestionMarker) + " " + state.question().question;
  std::string steps = render_steps(state, budget);
  if (!steps.empty()) {
    prompt.transcript += "\n";
    prompt.transcript += steps;
  }
  if (!forced) return prompt;

  std::string prefix;
  if (const auto* p = std::get_if<ParametricContinuation>(&*forced)) {
    prefix = std::string(kFollowUpMarker) + " " + p->subquery + "\n" + std::string(kIntermediateMarker);
  } else if (const auto* r = std::get_if<RetrievedContinuation>(&*forced)) {
    if (r->documents.empty()) throw Error("forced retrieved continuation without documents");
    prefix = std::string(kFollowUpMarker) + " " + r->subquery + "\n";
    prefix += std::string(kRetrieveMarker) + "\n";
    prefix += std::string(kContextMarker) + " " + render_context(r->documents, budget) + "\n";
    prefix += std::string(kIntermediateMarker);
  } else {
    prefix = std::string(kFinalMarker);
  }
  prompt.forced_prefix = std::move(prefix);
  return prompt;
}

// ---- Parsing --------------------------------------------------------------------

struct FollowUpTurn {
  enum class Decision { Retrieve, Parametric, Undecided };
  std::string subquery;
  Decision decision = Decision::Undecided;
  std::string answer;  // set when decision == Parametric
};

struct FinalTurn {
  std::string answer;
};

struct MalformedTurn {
  std::string snippet;
};

using ParsedTurn = std::variant<FollowUpTurn, FinalTurn, MalformedTurn>;

enum class ParseMode { OpeningTurn, AnswerContinuation };

namespace detail {

/// If the line (leading whitespace tolerated) starts with the marker, returns
/// the text after it; otherwise nullopt.
inline std::optional<std::string_view> after_marker(std::string_view line, std::string_view marker) {
  std::string_view t = trim_view(line);
  if (t.substr(0, marker.size()) != marker) return std::nullopt;
  return t.substr(marker.size());
}

inline bool is_retrieve_line(std::string_view line) { return trim_view(line) == kRetrieveMarker; }

inline bool is_any_marker_line(std::string_view line) {
  return after_marker(line, kFollowUpMarker) || after_marker(line, kFinalMarker) ||
         after_marker(line, kIntermediateMarker) || after_marker(line, kContextMarker) ||
         after_marker(line, kQuestionMarker) || is_retrieve_line(line);
}

/// Joins lines [begin, end) and trims; used to collect text that may continue
/// over several lines until the next marker.
inline std::string collect_until_marker(std::span<const std::string_view> lines, std::size_t begin) {
  std::string out;
  for (std::size_t i = begin; i < lines.size(); ++i) {
    if (is_any_marker_line(lines[i])) break;
    if (!out.empty()) out.push_back('\n');
    out.append(lines[i]);
  }
  return trim(out);
}

inline std::string snippet_of(std::string_view text) {
  return std::string(text.substr(0, std::min<std::size_t>(text.size(), 120)));
}

}  // namespace detail

/// Parses one model emission. OpeningTurn mode anchors on the first line that
/// opens a turn ("So the final answer is:" or "Follow up:") and reads the
/// decision that follows; AnswerContinuation mode treats everything up to the
/// first protocol marker as the answer text. Never throws on arbitrary input.
inline ParsedTurn parse_turn(std::string_view emission, ParseMode mode) {
  std::vector<std::string_view> lines = split_lines(emission);
  if (mode == ParseMode::AnswerContinuation) {
    return FinalTurn{detail::collect_until_marker(lines, 0)};
  }

  std::size_t anchor = lines.size();
  bool anchor_final = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::after_marker(lines[i], kFinalMarker)) {
      anchor = i;
      anchor_final = true;
      break;
    }
    if (detail::after_marker(lines[i], kFollowUpMarker)) {
      anchor = i;
      break;
    }
  }
  if (anchor == lines.size()) return MalformedTurn{detail::snippet_of(emission)};

  if (anchor_final) {
    std::string head = trim(*detail::after_marker(lines[anchor], kFinalMarker));
    std::string rest = detail::collect_until_marker(lines, anchor + 1);
    if (!rest.empty()) head += (head.empty() ? "" : "\n") + rest;
    if (head.empty()) return MalformedTurn{detail::snippet_of(emission)};
    return FinalTurn{std::move(head)};
  }

  FollowUpTurn turn;
  turn.subquery = trim(*detail::after_marker(lines[anchor], kFollowUpMarker));
  if (turn.subquery.empty()) return MalformedTurn{detail::snippet_of(emission)};
  for (std::size_t i = anchor + 1; i < lines.size(); ++i) {
    if (detail::is_retrieve_line(lines[i])) {
      turn.decision = FollowUpTurn::Decision::Retrieve;
      return turn;
    }
    if (auto rest = detail::after_marker(lines[i], kIntermediateMarker)) {
      std::string head = trim(*rest);
      std::string cont = detail::collect_until_marker(lines, i + 1);
      if (!cont.empty()) head += (head.empty() ? "" : "\n") + cont;
      if (head.empty()) break;  // bare marker with no answer: undecided
      turn.decision = FollowUpTurn::Decision::Parametric;
      turn.answer = std::move(head);
      return turn;
    }
    if (detail::after_marker(lines[i], kFollowUpMarker) || detail::after_marker(lines[i], kFinalMarker)) {
      break;  // next turn began without a decision for this one
    }
  }
  return turn;  // Undecided
}

// ---- Whole-transcript reconstruction ----------------------------------------------

struct TranscriptStep {
  std::string subquery;
  bool retrieved = false;
  std::string context_text;  // text of the Context: line, retrieved steps only
  std::string answer;
};

struct ParsedTranscript {
  std::string question;
  std::vector<TranscriptStep> steps;
  std::optional<std::string> final_answer;
};

/// Replays a full transcript turn-by-turn through parse_turn. Throws Error on
/// transcripts that do not follow the grammar end to end.
inline ParsedTranscript parse_transcript(std::string_view text) {
  std::vector<std::string_view> lines = split_lines(text);
  ParsedTranscript out;
  std::size_t pos = 0;
  if (pos < lines.size()) {
    if (auto q = detail::after_marker(lines[pos], kQuestionMarker)) {
      out.question = trim(*q);
      ++pos;
    }
  }

  auto is_opener = [](std::string_view line) {
    return detail::after_marker(line, kFollowUpMarker).has_value() ||
           detail::after_marker(line, kFinalMarker).has_value();
  };
  auto join_range = [&lines](std::size_t b, std::size_t e) {
    std::string s;
    for (std::size_t i = b; i < e; ++i) {
      if (i > b) s.push_back('\n');
      s.append(lines[i]);
    }
    return s;
  };

  while (pos < lines.size()) {
    if (!is_opener(lines[pos])) {
      if (trim_view(lines[pos]).empty()) {
        ++pos;
        continue;
      }
      throw Error("transcript line is not a turn opener: " + detail::snippet_of(lines[pos]));
    }
    std::size_t end = pos + 1;
    while (end < lines.size() && !is_opener(lines[end])) ++end;
    std::string turn_text = join_range(pos, end);
    ParsedTurn parsed = parse_turn(turn_text, ParseMode::OpeningTurn);

    if (const auto* fin = std::get_if<FinalTurn>(&parsed)) {
      out.final_answer = fin->answer;
      pos = end;
      continue;
    }
    const auto* follow = std::get_if<FollowUpTurn>(&parsed);
    if (follow == nullptr) throw Error("malformed turn in transcript: " + detail::snippet_of(turn_text));

    TranscriptStep step;
    step.subquery = follow->subquery;
    switch (follow->decision) {
      case FollowUpTurn::Decision::Parametric:
        step.answer = follow->answer;
        break;
      case FollowUpTurn::Decision::Retrieve: {
        step.retrieved = true;
        std::size_t i = pos + 1;
        std::size_t intermediate = end;
        for (; i < end; ++i) {
          if (auto ctx = detail::after_marker(lines[i], kContextMarker)) step.context_text = trim(*ctx);
          if (detail::after_marker(lines[i], kIntermediateMarker)) {
            intermediate = i;
            break;
          }
        }
        if (intermediate == end) throw Error("retrieved step lacks an intermediate answer: " + step.subquery);
        std::string after = trim(*detail::after_marker(lines[intermediate], kIntermediateMarker));
        std::string cont = join_range(intermediate + 1, end);
        ParsedTurn rest = parse_turn(cont, ParseMode::AnswerContinuation);
        std::string tail = std::get<FinalTurn>(rest).answer;
        if (!tail.empty()) after += (after.empty() ? "" : "\n") + tail;
        step.answer = after;
        break;
      }
      case FollowUpTurn::Decision::Undecided:
        throw Error("undecided step in transcript: " + step.subquery);
    }
    if (step.answer.empty()) throw Error("step without answer in transcript: " + step.subquery);
    out.steps.push_back(std::move(step));
    pos = end;
  }
  return out;
}

}  // namespace deeprag
