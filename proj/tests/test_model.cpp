#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <memory>
#include <thread>

#include <httplib.h>

#include "deeprag/model.hpp"
#include "support/fixtures.hpp"

using namespace deeprag;

namespace {

GenerationRequest request_for(std::string transcript, std::optional<std::string> forced = std::nullopt) {
  GenerationRequest request;
  request.prompt.instruction = std::string(kDefaultInstruction);
  request.prompt.transcript = std::move(transcript);
  request.prompt.forced_prefix = std::move(forced);
  return request;
}

}  // namespace

TEST_CASE("scripted table matches verbatim transcript and forced prefix") {
  ScriptedTableModel model;
  model.add_verbatim("Question: x", "", "Follow up: X");
  model.add_verbatim("Question: x", "So the final answer is:", " done");

  CHECK(model.generate_raw(request_for("Question: x")) == "Follow up: X");
  CHECK(model.generate_raw(request_for("Question: x", "So the final answer is:")) == " done");
  CHECK_THROWS_AS(model.generate_raw(request_for("Question: other")), ScriptMiss);
}

TEST_CASE("scripted table matches by stable hash") {
  std::string transcript = "Question: hashed";
  std::string hash = to_hex(fnv1a64(transcript + '\x1f'));
  ScriptedTableModel model;
  model.add(ScriptedTableModel::Entry{std::nullopt, "", hash, "So the final answer is: 42"});
  CHECK(model.generate_raw(request_for(transcript)) == "So the final answer is: 42");
}

TEST_CASE("scripted table round-trips through its JSON shape") {
  nlohmann::json j = nlohmann::json::array();
  j.push_back({{"match", {{"transcript", "Question: a"}}}, {"emit", "Follow up: b"}});
  j.push_back({{"match", {{"transcript_hash", to_hex(fnv1a64(std::string("Question: c") + '\x1f'))}}},
               {"emit", "So the final answer is: d"}});
  ScriptedTableModel model = ScriptedTableModel::from_json(j);
  CHECK(model.generate_raw(request_for("Question: a")) == "Follow up: b");
  CHECK(model.generate_raw(request_for("Question: c")) == "So the final answer is: d");
}

TEST_CASE("behavior model walks its script from the transcript alone") {
  fixtures::TreeFixture fx = fixtures::make_tree_fixture(1, {true, false}, {true, true});
  BehaviorScriptModel model;
  model.add(fx.script);

  std::string transcript = "Question: " + fx.question.question;
  CHECK(model.generate_raw(request_for(transcript)) == "Follow up: " + fx.script.steps[0].subquery);

  // Parametric continuation for step 0.
  std::string forced0 = "Follow up: " + fx.script.steps[0].subquery + "\nIntermediate answer:";
  CHECK(trim(model.generate_raw(request_for(transcript, forced0))) == fx.script.steps[0].parametric_answer);

  // After both steps answered correctly the model closes with the right answer.
  transcript += "\nFollow up: " + fx.script.steps[0].subquery +
                "\nIntermediate answer: " + fx.script.steps[0].correct_answer;
  transcript += "\nFollow up: " + fx.script.steps[1].subquery +
                "\nLet's search the question in Wikipedia.\nContext: anything\nIntermediate answer: " +
                fx.script.steps[1].correct_answer;
  CHECK(model.generate_raw(request_for(transcript)) ==
        "So the final answer is: " + fx.script.final_correct);

  // A wrong intermediate answer anywhere derails the final answer.
  std::string bad = "Question: " + fx.question.question + "\nFollow up: " + fx.script.steps[0].subquery +
                    "\nIntermediate answer: " + fx.script.steps[0].parametric_answer +  // correct one
                    "\nFollow up: " + fx.script.steps[1].subquery + "\nIntermediate answer: " +
                    fx.script.steps[1].parametric_answer;  // wrong one (parametric_ok[1] = false)
  CHECK(model.generate_raw(request_for(bad)) == "So the final answer is: " + fx.script.final_wrong);

  CHECK_THROWS_AS(model.generate_raw(request_for("Question: unknown question")), ScriptMiss);
}

TEST_CASE("behavior model honors forced final continuations") {
  fixtures::TreeFixture fx = fixtures::make_tree_fixture(2, {true}, {true});
  BehaviorScriptModel model;
  model.add(fx.script);
  std::string transcript = "Question: " + fx.question.question + "\nFollow up: " +
                           fx.script.steps[0].subquery +
                           "\nIntermediate answer: " + fx.script.steps[0].correct_answer;
  std::string emitted = model.generate_raw(request_for(transcript, "So the final answer is:"));
  CHECK(trim(emitted) == fx.script.final_correct);

  // Forced final before the script completes yields the wrong answer.
  std::string early = "Question: " + fx.question.question;
  CHECK(trim(model.generate_raw(request_for(early, "So the final answer is:"))) == fx.script.final_wrong);
}

TEST_CASE("behavior model JSON loader") {
  nlohmann::json j{{"questions",
                    {{{"question", "q text"},
                      {"final_correct", "yes"},
                      {"final_wrong", "no"},
                      {"steps",
                       {{{"subquery", "s1"},
                         {"correct_answer", "c1"},
                         {"parametric_answer", "c1"},
                         {"retrieved_answer", "c1"},
                         {"adaptive", "retrieve"}}}}}}}};
  BehaviorScriptModel model = behavior_model_from_json(j);
  std::string emitted = model.generate_raw(request_for("Question: q text"));
  CHECK(emitted == "Follow up: s1\nLet's search the question in Wikipedia.");
}

TEST_CASE("gateway truncates at the earliest stop marker") {
  auto table = std::make_shared<ScriptedTableModel>();
  table->add_verbatim("Question: x", "", " some answer\nFollow up: should be cut");
  ModelGateway gateway;
  gateway.set_role("target", table);

  GenerationRequest request = request_for("Question: x");
  request.stop_markers = {std::string(kFollowUpMarker)};
  CHECK(gateway.generate("target", request) == " some answer\n");

  request.stop_markers = {"not a marker"};
  CHECK_THROWS_AS(gateway.generate("target", request), Error);
  CHECK_THROWS_AS(gateway.generate("missing-role", request_for("Question: x")), Error);
}

TEST_CASE("gateway enforces the per-run call cap") {
  auto table = std::make_shared<ScriptedTableModel>();
  table->add_verbatim("Question: x", "", "Follow up: y");
  ModelGateway gateway;
  gateway.set_role("target", table);
  gateway.set_call_cap(2);
  CHECK_NOTHROW(gateway.generate("target", request_for("Question: x")));
  CHECK_NOTHROW(gateway.generate("target", request_for("Question: x")));
  CHECK_THROWS_AS(gateway.generate("target", request_for("Question: x")), BudgetExceeded);
  CHECK(gateway.call_count() == 3);
}

TEST_CASE("gateway bounds in-flight generations at its concurrency cap") {
  struct SlowBackend : ModelBackend {
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};
    std::string generate_raw(const GenerationRequest&) override {
      int now = ++in_flight;
      int seen = peak.load();
      while (now > seen && !peak.compare_exchange_weak(seen, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      --in_flight;
      return "So the final answer is: ok";
    }
  };
  auto backend = std::make_shared<SlowBackend>();
  ModelGateway gateway(/*concurrency=*/2);
  gateway.set_role("target", backend);

  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i)
    threads.emplace_back([&] { gateway.generate("target", request_for("Question: x")); });
  for (auto& t : threads) t.join();
  CHECK(backend->peak.load() <= 2);
  CHECK(gateway.call_count() == 8);
}

TEST_CASE("http endpoint model speaks the chat-completion shape") {
  httplib::Server server;
  std::atomic<int> hits{0};
  nlohmann::json last_body;
  std::mutex body_mutex;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    {
      std::lock_guard lock(body_mutex);
      last_body = nlohmann::json::parse(req.body);
    }
    int n = ++hits;
    if (n == 1) {  // first attempt fails; the client retries
      res.status = 500;
      return;
    }
    nlohmann::json reply{{"choices", {{{"message", {{"content", "Follow up: from server"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server_thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  EndpointConfig config;
  config.base_url = "http://127.0.0.1:" + std::to_string(port);
  config.model = "test-model";
  config.retries = 2;
  HttpEndpointModel model(config);

  GenerationRequest request = request_for("Question: remote");
  request.stop_markers = {std::string(kContextMarker)};
  request.seed = 7;
  CHECK(model.generate_raw(request) == "Follow up: from server");
  CHECK(hits.load() == 2);
  {
    std::lock_guard lock(body_mutex);
    CHECK(last_body.at("model") == "test-model");
    CHECK(last_body.at("messages")[0].at("role") == "system");
    CHECK(last_body.at("messages")[1].at("content") == "Question: remote");
    CHECK(last_body.at("stop") == nlohmann::json::array({"Context:"}));
    CHECK(last_body.at("seed") == 7);
  }

  server.stop();
  server_thread.join();

  EndpointConfig dead = config;
  dead.base_url = "http://127.0.0.1:1";  // nothing listens there
  dead.retries = 1;
  dead.timeout_s = 1.0;
  HttpEndpointModel unreachable(dead);
  CHECK_THROWS_AS(unreachable.generate_raw(request), EndpointUnreachable);
}

TEST_CASE("load_scripted_model dispatches on file shape") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "deeprag_model_tests";
  fs::create_directories(dir);

  fs::path table_path = dir / "table.json";
  {
    std::ofstream out(table_path);
    out << R"([{"match": {"transcript": "Question: t"}, "emit": "Follow up: u"}])";
  }
  auto table = load_scripted_model(table_path);
  CHECK(table->generate_raw(request_for("Question: t")) == "Follow up: u");

  fs::path behavior_path = dir / "behavior.json";
  {
    std::ofstream out(behavior_path);
    nlohmann::json j{{"questions",
                      {{{"question", "bq"},
                        {"final_correct", "fc"},
                        {"final_wrong", "fw"},
                        {"steps", nlohmann::json::array()}}}}};
    out << j.dump();
  }
  auto behavior = load_scripted_model(behavior_path);
  CHECK(behavior->generate_raw(request_for("Question: bq")) == "So the final answer is: fc");
}
