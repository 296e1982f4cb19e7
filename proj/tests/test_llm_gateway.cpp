#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stackrev/llm_gateway.hpp"
#include "stackrev/rng.hpp"

using namespace stackrev;
using namespace stackrev::llm;
using nlohmann::json;

TEST_CASE("token_count rule") {
  CHECK(token_count("") == 0);
  CHECK(token_count("12345678") == 2);
  CHECK(token_count("123456789") == 3);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::string a(rng.below(64), 'a');
    std::string b(rng.below(64), 'b');
    CHECK(token_count(a + b) >=
          std::max(token_count(a), token_count(b)));
  }
}

TEST_CASE("extract_json handles fences and prose") {
  CHECK(extract_json("```json\n{\"a\":1}\n```") == json{{"a", 1}});
  const auto inner = extract_json(
      "Sure! {\"Q1\":\"A\",\"Q2\":\"B\",\"Q3\":\"C\",\"Q4\":\"C\"} hope this helps");
  CHECK(inner["Q1"] == "A");
  CHECK(inner["Q4"] == "C");
  CHECK(extract_json("[1, 2, 3] trailing").is_array());
  CHECK(extract_json("text with {\"nested\": {\"x\": [1, \"{\"]}} tail")
            ["nested"]["x"][1] == "{");
}

TEST_CASE("extract_json error paths") {
  CHECK_THROWS_WITH_AS(extract_json("no braces here"),
                       doctest::Contains("NoJsonFound"), Error);
  CHECK_THROWS_WITH_AS(extract_json("{\"a\": }"),
                       doctest::Contains("MalformedJson"), Error);
  CHECK_THROWS_WITH_AS(extract_json("{\"a\": 1"),
                       doctest::Contains("MalformedJson"), Error);
}

TEST_CASE("extract_json is idempotent on clean JSON") {
  const std::string clean = R"({"k": [1, 2, {"x": "y"}]})";
  const auto once = extract_json(clean);
  CHECK(extract_json(once.dump()) == once);
}

TEST_CASE("scripted backend consumes entries in order") {
  ScriptedBackend backend({{".*", "first"}, {".*", "second"}});
  TokenLedger ledger;
  ChatRequest req{"sys", "same user text", 0.0, 100, "t"};
  CHECK(complete(backend, req, ledger).text == "first");
  CHECK(complete(backend, req, ledger).text == "second");
  CHECK_THROWS_WITH_AS(complete(backend, req, ledger),
                       doctest::Contains("ScriptExhausted"), Error);
}

TEST_CASE("scripted backend matches the first unconsumed pattern") {
  ScriptedBackend backend({{"alpha", "A"}, {"beta", "B"}});
  TokenLedger ledger;
  CHECK(complete(backend, {"s", "about beta things", 0.0, 100, "t"}, ledger)
            .text == "B");
  CHECK(complete(backend, {"s", "now alpha", 0.0, 100, "t"}, ledger).text ==
        "A");
  CHECK(backend.remaining() == 0);
}

TEST_CASE("scripted replays are byte identical") {
  Rng rng(99);
  std::vector<ScriptedBackend::Entry> entries;
  std::vector<std::string> users;
  for (int i = 0; i < 12; ++i) {
    std::string payload;
    for (int k = 0; k < 24; ++k)
      payload.push_back(static_cast<char>('a' + rng.below(26)));
    entries.push_back({".*", payload});
    users.push_back("request " + std::to_string(rng.below(1000)));
  }
  ScriptedBackend first{entries}, second{entries};
  TokenLedger ledger;
  for (const auto& user : users) {
    ChatRequest req{"sys", user, 0.0, 100, "t"};
    CHECK(complete(first, req, ledger).text ==
          complete(second, req, ledger).text);
  }
}

TEST_CASE("ledger conservation and per-tag accounting") {
  ScriptedBackend backend(
      {{".*", "aaaa"}, {".*", "bbbbbbbb"}, {".*", "cc"}});
  TokenLedger ledger;
  std::int64_t expected = 0;
  for (const std::string tag : {"leader", "follower", "leader"}) {
    ChatRequest req{"ssss", "uuuuuuuu", 0.0, 100, tag};
    const auto resp = complete(backend, req, ledger);
    expected += resp.prompt_tokens + resp.completion_tokens;
  }
  CHECK(ledger.grand_total() == expected);
  CHECK(ledger.by_tag("leader").prompt_tokens ==
        2 * (token_count("ssss") + token_count("uuuuuuuu")));
  CHECK(ledger.by_tag("missing").total() == 0);
}

TEST_CASE("request validation") {
  ScriptedBackend backend({{".*", "x"}});
  TokenLedger ledger;
  CHECK_THROWS_AS(complete(backend, {"", "user", 0.0, 10, "t"}, ledger), Error);
  CHECK_THROWS_AS(complete(backend, {"sys", "", 0.0, 10, "t"}, ledger), Error);
  CHECK_THROWS_AS(complete(backend, {"sys", "user", 0.0, 0, "t"}, ledger),
                  Error);
}

TEST_CASE("scripted backend flags truncation at max_tokens") {
  ScriptedBackend backend({{".*", std::string(400, 'x')}});
  TokenLedger ledger;
  const auto resp = complete(backend, {"s", "u", 0.0, 10, "t"}, ledger);
  CHECK(resp.truncated);
}

TEST_CASE("render_prompt fills placeholders") {
  const auto leader = render_prompt("leader_extract", {{"CONTRACT_TEXT", "X"}});
  CHECK(leader.user.find("<<<CONTRACT>>>") != std::string::npos);
  CHECK(leader.user.find("\nX\n") != std::string::npos);
  CHECK(leader.system.find("strictly logical contract risk auditor") !=
        std::string::npos);
  CHECK(leader.user.find("{CONTRACT_TEXT}") == std::string::npos);

  const auto force = render_prompt("force_rewrite",
                                   {{"DETECTED_RISK_LOCATION", "Section 3"},
                                    {"RISK_CATEGORY", "Liability"},
                                    {"CONTRACT_TEXT", "body"}});
  CHECK(force.user.find("DETECTED SADDLE POINT IN OPTIMIZATION") !=
        std::string::npos);
  CHECK(force.user.find("Section 3") != std::string::npos);

  // Deterministic for a fixed context.
  CHECK(render_prompt("leader_extract", {{"CONTRACT_TEXT", "X"}}).user ==
        leader.user);
}

TEST_CASE("render_prompt error paths") {
  CHECK_THROWS_WITH_AS(render_prompt("leader_extract", {}),
                       doctest::Contains("MissingPlaceholder"), Error);
  CHECK_THROWS_WITH_AS(render_prompt("nonesuch", {}),
                       doctest::Contains("UnknownTemplate"), Error);
  // Fragments are not full prompts.
  CHECK_THROWS_AS(render_prompt("cra_outer_block", {{"OUTER_HINT", "x"}}),
                  Error);
  CHECK(render_fragment("cra_outer_block", {{"OUTER_HINT", "hint text"}})
            .find("hint text") != std::string::npos);
}

TEST_CASE("template inventory") {
  const auto ids = template_ids();
  for (const char* required :
       {"leader_extract", "qscore", "cra_revise", "lva_audit", "force_rewrite",
        "stage2_standardize", "stage3_enrich", "judge_resolution",
        "judge_quality"})
    CHECK(std::find(ids.begin(), ids.end(), required) != ids.end());
  CHECK(template_source("qscore").find("choose an option from A/B/C") !=
        std::string::npos);
}

TEST_CASE("http backend round trip against a local server") {
  httplib::Server server;
  server.Post("/v1/chat/completions",
              [](const httplib::Request& req, httplib::Response& res) {
                const json body = json::parse(req.body);
                json reply = {
                    {"choices",
                     {{{"message",
                        {{"content",
                          "echo:" + body["messages"][1]["content"]
                                        .get<std::string>()}}},
                       {"finish_reason", "stop"}}}},
                    {"usage",
                     {{"prompt_tokens", 7}, {"completion_tokens", 3}}}};
                res.set_content(reply.dump(), "application/json");
              });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread serve([&server] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpBackend::Options opts;
  opts.endpoint =
      "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  opts.model = "test-model";
  opts.backoff_base_ms = 1;
  HttpBackend backend(opts);
  TokenLedger ledger;
  const auto resp =
      complete(backend, {"sys", "ping", 0.0, 64, "http"}, ledger);
  CHECK(resp.text == "echo:ping");
  CHECK(resp.prompt_tokens == 7);
  CHECK(resp.completion_tokens == 3);
  CHECK_FALSE(resp.truncated);
  CHECK(ledger.grand_total() == 10);

  server.stop();
  serve.join();
}

TEST_CASE("http backend fails after retries on an unreachable endpoint") {
  HttpBackend::Options opts;
  opts.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  opts.model = "m";
  opts.backoff_base_ms = 1;
  opts.timeout_sec = 1;
  HttpBackend backend(opts);
  TokenLedger ledger;
  CHECK_THROWS_WITH_AS(
      complete(backend, {"sys", "user", 0.0, 16, "http"}, ledger),
      doctest::Contains("BackendUnavailable"), Error);
}

TEST_CASE("http backend endpoint validation") {
  HttpBackend::Options opts;
  opts.endpoint = "ftp://example";
  CHECK_THROWS_WITH_AS(HttpBackend{opts}, doctest::Contains("ConfigError"),
                       Error);
}
