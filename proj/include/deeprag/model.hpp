#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "deeprag/errors.hpp"
#include "deeprag/protocol.hpp"
#include "deeprag/util.hpp"

namespace deeprag {

struct GenerationRequest {
  Prompt prompt;
  std::vector<std::string> stop_markers;
  std::size_t max_new_tokens = 512;
  double temperature = 0.0;  // greedy by default: decompositions stay reproducible
  std::optional<std::int64_t> seed;
};

/// A generation backend. Implementations must be safe to call concurrently.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual std::string generate_raw(const GenerationRequest& request) = 0;
};

namespace detail {

inline std::string scripted_key(std::string_view transcript, std::string_view forced_prefix) {
  std::string key(transcript);
  key.push_back('\x1f');
  key.append(forced_prefix);
  return to_hex(fnv1a64(key));
}

}  // namespace detail

// ---- Scripted table model ---------------------------------------------------------

/// Fixture model: a lookup table from rendered prompts to emissions. Entries
/// match either the verbatim transcript (+ forced prefix) or a stable hash of
/// the pair.
class ScriptedTableModel : public ModelBackend {
 public:
  struct Entry {
    std::optional<std::string> transcript;       // verbatim match
    std::string forced_prefix;                   // paired with transcript match
    std::optional<std::string> transcript_hash;  // hex fnv1a64(transcript \x1f forced)
    std::string emit;
  };

  void add(Entry entry) { entries_.push_back(std::move(entry)); }

  void add_verbatim(std::string transcript, std::string forced_prefix, std::string emit) {
    add(Entry{std::move(transcript), std::move(forced_prefix), std::nullopt, std::move(emit)});
  }

  std::string generate_raw(const GenerationRequest& request) override {
    const std::string& transcript = request.prompt.transcript;
    const std::string forced = request.prompt.forced_prefix.value_or("");
    std::string hash = detail::scripted_key(transcript, forced);
    for (const auto& entry : entries_) {
      if (entry.transcript_hash && *entry.transcript_hash == hash) return entry.emit;
      if (entry.transcript && *entry.transcript == transcript && entry.forced_prefix == forced)
        return entry.emit;
    }
    throw ScriptMiss("no scripted entry for prompt (hash " + hash + "): " +
                     detail::snippet_of(transcript + "\x1f" + forced));
  }

  static ScriptedTableModel from_json(const nlohmann::json& j) {
    ScriptedTableModel model;
    for (const auto& je : j) {
      const auto& match = je.at("match");
      Entry entry;
      if (match.contains("transcript")) entry.transcript = match.at("transcript").get<std::string>();
      if (match.contains("forced_prefix")) entry.forced_prefix = match.at("forced_prefix").get<std::string>();
      if (match.contains("transcript_hash"))
        entry.transcript_hash = match.at("transcript_hash").get<std::string>();
      entry.emit = je.at("emit").get<std::string>();
      model.add(std::move(entry));
    }
    return model;
  }

 private:
  std::vector<Entry> entries_;
};

// ---- Behavior-script model ----------------------------------------------------------

/// Deterministic stand-in for a real model: a per-question playbook of
/// subqueries and step answers. The emission is a pure function of the
/// rendered prompt; the model reads the transcript to find its place, like a
/// greedy-decoded LLM would.
class BehaviorScriptModel : public ModelBackend {
 public:
  struct ScriptStep {
    std::string subquery;
    std::string correct_answer;     // what a right intermediate answer looks like
    std::string parametric_answer;  // emitted without retrieval
    std::string retrieved_answer;   // emitted when documents are forced in
    FollowUpTurn::Decision adaptive = FollowUpTurn::Decision::Undecided;
  };

  struct QuestionScript {
    std::string question;
    std::vector<ScriptStep> steps;
    std::string final_correct;
    std::string final_wrong;
  };

  void add(QuestionScript script) { scripts_[script.question] = std::move(script); }

  std::string generate_raw(const GenerationRequest& request) override {
    ParsedTranscript transcript = parse_transcript(request.prompt.transcript);
    auto it = scripts_.find(transcript.question);
    if (it == scripts_.end()) throw ScriptMiss("no behavior script for question: " + transcript.question);
    const QuestionScript& script = it->second;
    std::size_t done = transcript.steps.size();
    const std::string forced = request.prompt.forced_prefix.value_or("");

    if (forced.empty()) return opening_turn(script, transcript, done);

    if (forced.find(kFinalMarker) != std::string::npos)
      return " " + final_answer(script, transcript, done);

    if (done >= script.steps.size())
      throw ScriptMiss("continuation past scripted steps for question: " + script.question);
    const ScriptStep& step = script.steps[done];
    bool retrieved = forced.find(kRetrieveMarker) != std::string::npos;
    return " " + (retrieved ? step.retrieved_answer : step.parametric_answer);
  }

 private:
  static std::string opening_turn(const QuestionScript& script, const ParsedTranscript& transcript,
                                  std::size_t done) {
    if (done >= script.steps.size())
      return std::string(kFinalMarker) + " " + final_answer(script, transcript, done);
    const ScriptStep& step = script.steps[done];
    std::string out = std::string(kFollowUpMarker) + " " + step.subquery;
    switch (step.adaptive) {
      case FollowUpTurn::Decision::Retrieve:
        out += "\n" + std::string(kRetrieveMarker);
        break;
      case FollowUpTurn::Decision::Parametric:
        out += "\n" + std::string(kIntermediateMarker) + " " + step.parametric_answer;
        break;
      case FollowUpTurn::Decision::Undecided:
        break;
    }
    return out;
  }

  /// Correct only when every scripted step was completed with its correct
  /// intermediate answer.
  static std::string final_answer(const QuestionScript& script, const ParsedTranscript& transcript,
                                  std::size_t done) {
    if (done != script.steps.size()) return script.final_wrong;
    for (std::size_t i = 0; i < done; ++i)
      if (transcript.steps[i].answer != script.steps[i].correct_answer) return script.final_wrong;
    return script.final_correct;
  }

  std::map<std::string, QuestionScript> scripts_;
};

inline BehaviorScriptModel behavior_model_from_json(const nlohmann::json& j) {
  BehaviorScriptModel model;
  for (const auto& jq : j.at("questions")) {
    BehaviorScriptModel::QuestionScript script;
    script.question = jq.at("question").get<std::string>();
    script.final_correct = jq.at("final_correct").get<std::string>();
    script.final_wrong = jq.at("final_wrong").get<std::string>();
    for (const auto& js : jq.at("steps")) {
      BehaviorScriptModel::ScriptStep step;
      step.subquery = js.at("subquery").get<std::string>();
      step.correct_answer = js.at("correct_answer").get<std::string>();
      step.parametric_answer = js.at("parametric_answer").get<std::string>();
      step.retrieved_answer = js.at("retrieved_answer").get<std::string>();
      if (js.contains("adaptive")) {
        std::string a = js.at("adaptive").get<std::string>();
        if (a == "retrieve") step.adaptive = FollowUpTurn::Decision::Retrieve;
        else if (a == "parametric") step.adaptive = FollowUpTurn::Decision::Parametric;
        else if (a == "undecided") step.adaptive = FollowUpTurn::Decision::Undecided;
        else throw Error("unknown adaptive decision in script: " + a);
      }
      script.steps.push_back(std::move(step));
    }
    model.add(std::move(script));
  }
  return model;
}

/// Loads either scripted-model file shape: a JSON array of {match, emit}
/// entries, or an object with a "questions" behavior playbook.
inline std::shared_ptr<ModelBackend> load_scripted_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model script: " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.is_array()) return std::make_shared<ScriptedTableModel>(ScriptedTableModel::from_json(j));
  if (j.is_object() && j.contains("questions"))
    return std::make_shared<BehaviorScriptModel>(behavior_model_from_json(j));
  throw Error("unrecognized model script shape: " + path.string());
}

// ---- HTTP endpoint model -------------------------------------------------------------

struct EndpointConfig {
  std::string base_url;  // e.g. http://localhost:8000
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string auth_env;  // name of the env var holding the bearer token
  double timeout_s = 60.0;
  std::size_t retries = 2;  // additional attempts after the first
};

/// Chat-completion-style client. The instruction travels as the system
/// message; transcript plus forced prefix as the user message.
class HttpEndpointModel : public ModelBackend {
 public:
  explicit HttpEndpointModel(EndpointConfig config) : config_(std::move(config)) {}

  std::string generate_raw(const GenerationRequest& request) override {
    nlohmann::json body{
        {"model", config_.model},
        {"messages",
         {{{"role", "system"}, {"content", request.prompt.instruction}},
          {{"role", "user"}, {"content", request.prompt.full_text()}}}},
        {"temperature", request.temperature},
        {"max_tokens", request.max_new_tokens},
        {"stop", request.stop_markers},
    };
    if (request.seed) body["seed"] = *request.seed;
    std::string payload = body.dump();

    std::string last_error;
    for (std::size_t attempt = 0; attempt <= config_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
      httplib::Client client(config_.base_url);
      client.set_connection_timeout(std::chrono::duration<double>(config_.timeout_s));
      client.set_read_timeout(std::chrono::duration<double>(config_.timeout_s));
      httplib::Headers headers;
      if (!config_.auth_env.empty()) {
        const char* token = std::getenv(config_.auth_env.c_str());
        if (token == nullptr) throw Error("auth env var not set: " + config_.auth_env);
        headers.emplace("Authorization", std::string("Bearer ") + token);
      }
      auto res = client.Post(config_.path, headers, payload, "application/json");
      if (!res) {
        last_error = "connection failed: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "server error: status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw EndpointUnreachable("endpoint " + config_.base_url + " returned status " +
                                  std::to_string(res->status) + ": " + res->body);
      nlohmann::json reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    }
    throw EndpointUnreachable("endpoint " + config_.base_url + " unreachable after " +
                              std::to_string(config_.retries + 1) + " attempts (" + last_error + ")");
  }

 private:
  EndpointConfig config_;
};

// ---- Gateway -----------------------------------------------------------------------

inline bool is_protocol_marker(std::string_view s) {
  return s == kQuestionMarker || s == kFollowUpMarker || s == kRetrieveMarker || s == kContextMarker ||
         s == kIntermediateMarker || s == kFinalMarker;
}

/// Routes generation calls to named model roles ("decomposer", "target"),
/// truncates emissions at stop markers, enforces the per-run call cap, and
/// bounds in-flight requests.
class ModelGateway {
 public:
  static constexpr std::size_t kDefaultConcurrency = 8;

  explicit ModelGateway(std::size_t concurrency = kDefaultConcurrency)
      : semaphore_(static_cast<std::ptrdiff_t>(concurrency == 0 ? 1 : concurrency)) {}

  void set_role(const std::string& role, std::shared_ptr<ModelBackend> backend) {
    std::lock_guard lock(mutex_);
    roles_[role] = std::move(backend);
  }

  void set_call_cap(std::size_t cap) { call_cap_ = cap; }  // 0 = unlimited
  std::size_t call_count() const { return call_count_.load(); }

  std::string generate(const std::string& role, const GenerationRequest& request) {
    for (const auto& marker : request.stop_markers)
      if (!is_protocol_marker(marker)) throw Error("stop marker outside protocol set: " + marker);
    std::shared_ptr<ModelBackend> backend;
    {
      std::lock_guard lock(mutex_);
      auto it = roles_.find(role);
      if (it == roles_.end()) throw Error("no model configured for role: " + role);
      backend = it->second;
    }
    std::size_t count = ++call_count_;
    if (call_cap_ > 0 && count > call_cap_)
      throw BudgetExceeded("model call cap reached (" + std::to_string(call_cap_) + ")");

    semaphore_.acquire();
    std::string raw;
    try {
      raw = backend->generate_raw(request);
    } catch (...) {
      semaphore_.release();
      throw;
    }
    semaphore_.release();
    return truncate_at_stop(raw, request.stop_markers);
  }

  static std::string truncate_at_stop(std::string_view raw, std::span<const std::string> stop_markers) {
    std::size_t cut = raw.size();
    for (const auto& marker : stop_markers) {
      std::size_t pos = raw.find(marker);
      if (pos != std::string_view::npos) cut = std::min(cut, pos);
    }
    return std::string(raw.substr(0, cut));
  }

 private:
  std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<ModelBackend>> roles_;
  std::atomic<std::size_t> call_count_{0};
  std::size_t call_cap_ = 0;
  std::counting_semaphore<4096> semaphore_;
};

inline constexpr std::string_view kDecomposerRole = "decomposer";
inline constexpr std::string_view kTargetRole = "target";

}  // namespace deeprag
