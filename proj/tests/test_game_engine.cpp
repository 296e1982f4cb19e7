#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "stackrev/game_engine.hpp"

using namespace stackrev;
using namespace stackrev::engine;

namespace {

const std::string kFixtures = STACKREV_FIXTURE_DIR;

std::string read_fixture(const std::string& name) {
  std::ifstream in(kFixtures + "/" + name, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::unique_ptr<llm::ScriptedBackend> script(const std::string& name) {
  return llm::ScriptedBackend::from_file(kFixtures + "/" + name);
}

risk::InstructionVector hint_with_ids(const std::vector<std::string>& ids) {
  risk::InstructionVector hint;
  for (const auto& id : ids) {
    risk::ScoredRisk sr;
    sr.risk = {id, "category " + id, "Section 1", "Missing clause",
               "issue " + id, "suggestion " + id};
    sr.severity = 0.5;
    sr.attention = 1.0 / static_cast<double>(ids.size());
    hint.hints.push_back(std::move(sr));
  }
  hint.serialized_tokens =
      llm::token_count(risk::serialize_hint(hint.hints));
  return hint;
}

}  // namespace

TEST_CASE("detect_stall thresholds") {
  const std::string base = "alpha beta gamma";
  CHECK(detect_stall(base, base, 0.0));
  CHECK(detect_stall("alpha  beta\n gamma", base, 0.0));  // whitespace only

  std::string a, b;
  for (int i = 0; i < 100; ++i) {
    a += "tok" + std::to_string(i) + " ";
    b += (i == 50 ? std::string("changed ") : "tok" + std::to_string(i) + " ");
  }
  CHECK_FALSE(detect_stall(a, b, 0.0));   // distance 0.01 > 0
  CHECK(detect_stall(a, b, 0.02));        // 0.01 <= 0.02
  CHECK(normalized_edit_distance(a, b) == doctest::Approx(0.01));
}

TEST_CASE("audit status closed enumeration") {
  CHECK(audit_status_from_string("RESOLVED") == AuditStatus::Resolved);
  CHECK(audit_status_from_string("PARTIALLY_RESOLVED") ==
        AuditStatus::PartiallyResolved);
  CHECK(audit_status_from_string("UNRESOLVED") == AuditStatus::Unresolved);
  CHECK_THROWS_WITH_AS(audit_status_from_string("FIXED"),
                       doctest::Contains("SchemaViolation"), Error);
}

TEST_CASE("game config parsing and validation") {
  GameConfig cfg;
  cfg.apply_kv({{"k_rounds", "5"},
                {"tau", "0.7"},
                {"weights", "0.4, 0.2, 0.2, 0.2"},
                {"beta_audit", "900"},
                {"lambda", "0.02"},
                {"five_dim_hints", "false"},
                {"evidence_policy", "drop"}});
  CHECK(cfg.k_rounds == 5);
  CHECK(cfg.tau == 0.7);
  CHECK(cfg.budgets.beta_audit == 900);
  CHECK_FALSE(cfg.ablation.five_dim_hints);
  CHECK(cfg.evidence_policy == EvidencePolicy::Drop);

  CHECK_THROWS_WITH_AS(cfg.apply_kv({{"bogus_key", "1"}}),
                       doctest::Contains("ConfigError"), Error);
  CHECK_THROWS_AS(cfg.apply_kv({{"tau", "0"}}), Error);
  CHECK_THROWS_AS(cfg.apply_kv({{"k_rounds", "0"}}), Error);
  CHECK_THROWS_AS(parse_kv_file("/nonexistent/nope.cfg"), Error);
}

TEST_CASE("fuse combines outer severities with audit weights") {
  std::vector<risk::ScoredRisk> outer(2);
  outer[0].risk.id = "R_01";
  outer[0].severity = 1.0;
  outer[1].risk.id = "R_02";
  outer[1].severity = 0.5;

  AuditReport audit;
  audit.entries = {{"R_01", AuditStatus::Unresolved, 0.9, "", "", "cap it"},
                   {"R_02", AuditStatus::Unresolved, 0.2, "", "", "date it"}};
  const auto fusion = fuse(outer, audit);
  REQUIRE(fusion.residuals.size() == 2);
  CHECK(fusion.residuals[0].risk_id == "R_01");
  CHECK(fusion.residuals[0].priority == 0.9);
  CHECK(fusion.residuals[1].priority == 0.1);
  CHECK(fusion.render().find("cap it") != std::string::npos);

  audit.entries[0].status = AuditStatus::Resolved;
  const auto partial = fuse(outer, audit);
  REQUIRE(partial.residuals.size() == 1);
  CHECK(partial.residuals[0].risk_id == "R_02");
  CHECK(partial.residuals[0].priority == 1.0);

  audit.entries[1].status = AuditStatus::Resolved;
  CHECK(fuse(outer, audit).empty());
}

TEST_CASE("leader_step scores and selects the scripted risks") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_happy.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  GameConfig cfg;

  const auto result = leader_step(contract, cfg, *backend, ledger, transcript);
  REQUIRE(result.risks.size() == 3);
  CHECK(result.risks[0].severity == 0.5);  // (A,B,C,C)
  CHECK(result.risks[1].severity == 1.0);  // (A,A,A,A)
  CHECK(result.risks[2].severity == 0.0);  // (C,C,C,C)

  double total_attention = 0.0;
  for (const auto& sr : result.risks) total_attention += sr.attention;
  CHECK(total_attention == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(result.risks[1].attention > result.risks[0].attention);
  CHECK(result.risks[0].attention > result.risks[2].attention);

  REQUIRE(result.hint.hints.size() == 3);
  CHECK(result.hint.hints[0].risk.id == "R_02");
  CHECK(result.hint.hints[1].risk.id == "R_01");
  CHECK(result.hint.hints[2].risk.id == "R_03");
  CHECK_FALSE(result.hint.over_budget);

  // 3 risks on a short text: the out-of-range warning is logged, not fatal.
  bool warned = false;
  for (const auto& e : transcript.events())
    if (e.tag == "warning" && e.message.find("8-15") != std::string::npos)
      warned = true;
  CHECK(warned);
}

TEST_CASE("leader_step with qscore weighting off never calls the qscore prompt") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_ablation_nq.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  GameConfig cfg;
  cfg.ablation.qscore_weighting = false;

  const auto result = leader_step(contract, cfg, *backend, ledger, transcript);
  REQUIRE(result.risks.size() == 3);
  for (const auto& sr : result.risks)
    CHECK(sr.attention == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(transcript.exchange_count("qscore") == 0);
  CHECK(ledger.by_tag("qscore").total() == 0);
}

TEST_CASE("leader_step rejects an empty risk set") {
  llm::ScriptedBackend backend({{".*", "{\"risk_categories\": []}"}});
  llm::TokenLedger ledger;
  Transcript transcript;
  CHECK_THROWS_WITH_AS(
      leader_step("contract body", GameConfig{}, backend, ledger, transcript),
      doctest::Contains("EmptyRiskSet"), Error);
}

TEST_CASE("evidence policy drop removes violating risks") {
  llm::ScriptedBackend backend(
      {{".*",
        R"({"risk_categories": [
        {"category": "real", "location": "s", "evidence": "present words",
         "issue": "i", "suggestion": "g"},
        {"category": "fake", "location": "s", "evidence": "not in contract",
         "issue": "i", "suggestion": "g"}]})"}});
  llm::TokenLedger ledger;
  Transcript transcript;
  GameConfig cfg;
  cfg.evidence_policy = EvidencePolicy::Drop;
  cfg.ablation.qscore_weighting = false;  // no qscore entries scripted

  const auto result = leader_step("contract with present words", cfg, backend,
                                  ledger, transcript);
  REQUIRE(result.risks.size() == 1);
  CHECK(result.risks[0].risk.category == "real");
}

TEST_CASE("inner_audit validates the report") {
  const auto hint = hint_with_ids({"R_01", "R_02"});
  GameConfig cfg;
  llm::TokenLedger ledger;
  Transcript transcript;

  SUBCASE("all resolved") {
    llm::ScriptedBackend backend({{".*", R"json({"audit_report": [
      {"risk_id": "R_01 (Liability)", "status": "RESOLVED", "severity_weight": 1.0,
       "location_quote": "q", "issue_description": "d", "gradient_feedback": ""},
      {"risk_id": "R_02", "status": "RESOLVED"}],
      "global_safety_score": 1.0})json"}});
    const auto report =
        inner_audit("contract", hint, cfg, backend, ledger, transcript, 1);
    CHECK(report.global_safety_score == 1.0);
    REQUIRE(report.entries.size() == 2);
    CHECK(report.entries[0].risk_id == "R_01");  // annotation stripped
    // Omitted severity_weight defaults to the outer severity.
    CHECK(report.entries[1].severity_weight == 0.5);
  }

  SUBCASE("status outside the closed enum") {
    llm::ScriptedBackend backend({{".*", R"({"audit_report": [
      {"risk_id": "R_01", "status": "FIXED"}], "global_safety_score": 0.5})"}});
    CHECK_THROWS_WITH_AS(
        inner_audit("contract", hint, cfg, backend, ledger, transcript, 1),
        doctest::Contains("SchemaViolation"), Error);
  }

  SUBCASE("unknown risk id") {
    llm::ScriptedBackend backend({{".*", R"({"audit_report": [
      {"risk_id": "R_09", "status": "RESOLVED"}], "global_safety_score": 0.5})"}});
    CHECK_THROWS_WITH_AS(
        inner_audit("contract", hint, cfg, backend, ledger, transcript, 1),
        doctest::Contains("UnknownRiskId"), Error);
  }
}

TEST_CASE("follower prompt blocks come and go with the round") {
  const auto hint = hint_with_ids({"R_01"});
  GameConfig cfg;
  llm::TokenLedger ledger;

  SUBCASE("round one has no inner feedback block") {
    llm::ScriptedBackend backend({{".*", "revised text"}});
    Transcript transcript;
    FollowerInput in;
    const std::string contract = "contract body";
    in.contract = &contract;
    in.hint = &hint;
    in.round = 1;
    CHECK(follower_step(in, cfg, backend, ledger, transcript) ==
          "revised text");
    const auto& user = transcript.events().front().request_user;
    CHECK(user.find("[Input 1: Global Strategic Constraints") !=
          std::string::npos);
    CHECK(user.find("[Input 2: Optimization Constraints") != std::string::npos);
    CHECK(user.find("[Input 3: Gradient Feedback") == std::string::npos);
    CHECK(user.find("category R_01") != std::string::npos);
    CHECK(user.find("15%") != std::string::npos);  // deviation cap clause
  }

  SUBCASE("later rounds carry the audit feedback verbatim") {
    llm::ScriptedBackend backend({{".*", "revised text"}});
    Transcript transcript;
    FusionHint fusion;
    fusion.residuals.push_back(
        {"R_01", 1.0, "Specify exact dollar amount or fee multiplier."});
    FollowerInput in;
    const std::string contract = "contract body";
    in.contract = &contract;
    in.hint = &hint;
    in.fusion = &fusion;
    in.round = 2;
    follower_step(in, cfg, backend, ledger, transcript);
    const auto& user = transcript.events().front().request_user;
    CHECK(user.find("[Input 3: Gradient Feedback") != std::string::npos);
    CHECK(user.find("Specify exact dollar amount or fee multiplier.") !=
          std::string::npos);
  }

  SUBCASE("empty revision is an error") {
    llm::ScriptedBackend backend({{".*", "   \n "}});
    Transcript transcript;
    FollowerInput in;
    const std::string contract = "contract body";
    in.contract = &contract;
    in.hint = &hint;
    in.round = 1;
    CHECK_THROWS_WITH_AS(follower_step(in, cfg, backend, ledger, transcript),
                         doctest::Contains("EmptyRevision"), Error);
  }
}

TEST_CASE("run_game happy path stops on the safety threshold") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_happy.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  GameConfig cfg;

  const auto outcome =
      run_game(contract, cfg, *backend, ledger, transcript);
  CHECK_FALSE(outcome.aborted.has_value());
  CHECK(outcome.state.round == 2);
  CHECK(outcome.state.last_audit.global_safety_score == 1.0);
  CHECK(transcript.exchange_count("follower") == 2);
  CHECK(transcript.exchange_count("auditor") == 2);
  CHECK(outcome.state.force_rewrites_fired == 0);

  REQUIRE(outcome.state.j_l_trace.size() == 2);
  CHECK(outcome.state.j_l_trace[0] == 1.0);
  CHECK(outcome.state.j_l_trace[1] == 1.5);
  CHECK(outcome.state.j_l_trace[1] > outcome.state.j_l_trace[0]);
  CHECK(outcome.final_contract.find("total aggregate liability") !=
        std::string::npos);
}

TEST_CASE("ledger total equals the sum of transcript exchange usages") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_happy.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  run_game(contract, GameConfig{}, *backend, ledger, transcript);

  std::int64_t expected = 0;
  for (const auto& e : transcript.events()) {
    if (e.tag == "warning" || e.tag == "final") continue;
    expected += llm::token_count(e.request_system) +
                llm::token_count(e.request_user) +
                llm::token_count(e.response);
  }
  CHECK(ledger.grand_total() == expected);
}

TEST_CASE("run_game replay reproduces the final contract byte for byte") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_happy.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  GameConfig cfg;
  const auto first = run_game(contract, cfg, *backend, ledger, transcript);

  auto replay = transcript.to_replay_backend();
  llm::TokenLedger ledger2;
  Transcript transcript2;
  const auto second = run_game(contract, cfg, *replay, ledger2, transcript2);
  CHECK(first.final_contract == second.final_contract);
  CHECK(first.final_j_l == second.final_j_l);

  // And through the persisted form (written into the test working dir).
  const std::string path = "replay_roundtrip.jsonl";
  transcript.write_jsonl(path);
  auto replay_file = Transcript::replay_backend_from_file(path);
  llm::TokenLedger ledger3;
  Transcript transcript3;
  const auto third =
      run_game(contract, cfg, *replay_file, ledger3, transcript3);
  CHECK(third.final_contract == first.final_contract);
}

TEST_CASE("stalled follower with residual risks triggers one force rewrite") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_stall.json");
  llm::TokenLedger ledger;
  Transcript transcript;

  const auto outcome =
      run_game(contract, GameConfig{}, *backend, ledger, transcript);
  CHECK(outcome.state.force_rewrites_fired == 1);
  CHECK(outcome.state.round == 1);  // resolved within round one

  int force_prompts = 0;
  for (const auto& e : transcript.events())
    if (e.tag == "force_rewrite") {
      ++force_prompts;
      CHECK(e.round == 1);
      CHECK(e.request_user.find("DETECTED SADDLE POINT IN OPTIMIZATION") !=
            std::string::npos);
    }
  CHECK(force_prompts == 1);
  CHECK(outcome.final_contract.find("total aggregate liability") !=
        std::string::npos);
}

TEST_CASE("force rewrites never exceed the cap against a degenerate backend") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_livelock.json");
  llm::TokenLedger ledger;
  Transcript transcript;

  const auto outcome =
      run_game(contract, GameConfig{}, *backend, ledger, transcript);
  CHECK(outcome.state.force_rewrites_fired == 2);
  CHECK(outcome.state.round == 3);  // ran to the k_rounds bound
  CHECK(transcript.exchange_count("follower") == 5);  // 3 steps + 2 forced
  CHECK(transcript.exchange_count("auditor") == 3);
}

TEST_CASE("ablation toggles change the transcript structurally") {
  const auto contract = read_fixture("contract_service.txt");

  SUBCASE("iterate off runs exactly one round") {
    auto backend = script("script_game_happy.json");
    llm::TokenLedger ledger;
    Transcript transcript;
    GameConfig cfg;
    cfg.ablation.iterate = false;
    run_game(contract, cfg, *backend, ledger, transcript);
    CHECK(transcript.exchange_count("follower") == 1);
    CHECK(transcript.exchange_count("auditor") == 1);
  }

  SUBCASE("five_dim off strips evidence and suggestion text from the hints") {
    auto backend = script("script_game_happy.json");
    llm::TokenLedger ledger;
    Transcript transcript;
    GameConfig cfg;
    cfg.ablation.five_dim_hints = false;
    run_game(contract, cfg, *backend, ledger, transcript);
    for (const auto& e : transcript.events()) {
      if (e.agent != "follower") continue;
      // Everything before the contract block is hint material; the contract
      // itself necessarily contains its own quoted evidence.
      const auto hints = e.request_user.substr(
          0, e.request_user.find("<<<CONTRACT>>>"));
      CHECK(hints.find("any and all claims") == std::string::npos);
      CHECK(hints.find("Evidence:") == std::string::npos);
      CHECK(hints.find("Suggestion:") == std::string::npos);
      CHECK(hints.find("Category:") != std::string::npos);
      // Suggestions are not contract text, so they must be absent entirely.
      CHECK(e.request_user.find("Cap aggregate liability") ==
            std::string::npos);
    }
  }

  SUBCASE("budget penalty off zeroes the effective lambda") {
    GameConfig on;
    on.budgets.beta_audit = 50;  // forces the over-budget single-hint path
    GameConfig off = on;
    off.ablation.budget_penalty = false;

    auto backend_on = script("script_game_budget.json");
    llm::TokenLedger ledger_on;
    Transcript t_on;
    const auto with_penalty =
        run_game(contract, on, *backend_on, ledger_on, t_on);

    auto backend_off = script("script_game_budget.json");
    llm::TokenLedger ledger_off;
    Transcript t_off;
    const auto without_penalty =
        run_game(contract, off, *backend_off, ledger_off, t_off);

    REQUIRE(with_penalty.state.hint.over_budget);
    const auto theta = risk::budget_penalty(with_penalty.state.hint, 50);
    REQUIRE(theta > 0);
    CHECK(without_penalty.final_j_l == 1.0);
    CHECK(with_penalty.final_j_l ==
          doctest::Approx(1.0 - 0.01 * static_cast<double>(theta))
              .epsilon(1e-12));
  }
}

TEST_CASE("script exhaustion aborts the game but keeps the transcript") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_exhaust.json");
  llm::TokenLedger ledger;
  Transcript transcript;

  const auto outcome =
      run_game(contract, GameConfig{}, *backend, ledger, transcript);
  REQUIRE(outcome.aborted.has_value());
  CHECK(outcome.aborted->find("ScriptExhausted") != std::string::npos);
  CHECK(transcript.exchange_count("leader") == 1);
  CHECK(transcript.exchange_count("follower") == 1);
  CHECK(transcript.exchange_count("auditor") == 0);
  CHECK_FALSE(outcome.final_contract.empty());
}

TEST_CASE("transcript jsonl round trip") {
  const auto contract = read_fixture("contract_service.txt");
  auto backend = script("script_game_happy.json");
  llm::TokenLedger ledger;
  Transcript transcript;
  run_game(contract, GameConfig{}, *backend, ledger, transcript);

  const std::string jsonl = transcript.to_jsonl();
  std::istringstream lines(jsonl);
  std::string line;
  int events = 0;
  bool saw_final = false;
  while (std::getline(lines, line)) {
    const auto doc = nlohmann::json::parse(line);  // every line parses
    ++events;
    if (doc.value("tag", "") == "final") {
      saw_final = true;
      CHECK(doc["final_contract"] == transcript.final_contract());
    }
  }
  CHECK(saw_final);
  CHECK(events == static_cast<int>(transcript.events().size()) + 1);
}
