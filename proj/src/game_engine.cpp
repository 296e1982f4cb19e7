#include "stackrev/game_engine.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace stackrev::engine {

using llm::ChatRequest;
using llm::ChatResponse;
using nlohmann::json;

AuditStatus audit_status_from_string(const std::string& s) {
  if (s == "RESOLVED") return AuditStatus::Resolved;
  if (s == "PARTIALLY_RESOLVED") return AuditStatus::PartiallyResolved;
  if (s == "UNRESOLVED") return AuditStatus::Unresolved;
  throw Error(Errc::SchemaViolation,
              "audit status must be RESOLVED/PARTIALLY_RESOLVED/UNRESOLVED, "
              "got \"" + s + "\"");
}

const char* audit_status_to_string(AuditStatus s) {
  switch (s) {
    case AuditStatus::Resolved: return "RESOLVED";
    case AuditStatus::PartiallyResolved: return "PARTIALLY_RESOLVED";
    case AuditStatus::Unresolved: return "UNRESOLVED";
  }
  return "?";
}

void GameConfig::validate() const {
  if (k_rounds < 1) throw Error(Errc::ConfigError, "k_rounds must be >= 1");
  if (!(tau > 0.0)) throw Error(Errc::ConfigError, "tau must be > 0");
  if (!(deviation_cap > 0.0 && deviation_cap <= 1.0))
    throw Error(Errc::ConfigError, "deviation_cap must be in (0, 1]");
  if (epsilon_edit < 0.0 || epsilon_edit > 1.0)
    throw Error(Errc::ConfigError, "epsilon_edit must be in [0, 1]");
  if (safety_threshold < 0.0 || safety_threshold > 1.0)
    throw Error(Errc::ConfigError, "safety_threshold must be in [0, 1]");
  if (force_rewrite_cap < 0)
    throw Error(Errc::ConfigError, "force_rewrite_cap must be >= 0");
  budgets.validate();
}

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on")
    return true;
  if (value == "false" || value == "0" || value == "no" || value == "off")
    return false;
  throw Error(Errc::ConfigError, key + ": expected a boolean, got " + value);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, key + ": expected a number, got " + value);
  }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, key + ": expected an integer, got " + value);
  }
}

std::string trim_copy(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<std::string>& GameConfig::known_keys() {
  static const std::vector<std::string> keys = {
      "k_rounds",       "tau",
      "weights",        "beta_contract",
      "beta_audit",     "lambda",
      "epsilon_edit",   "safety_threshold",
      "deviation_cap",  "five_dim_hints",
      "budget_penalty", "iterate",
      "qscore_weighting", "evidence_policy",
      "force_rewrite_cap",
  };
  return keys;
}

void GameConfig::apply_kv(const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "k_rounds") {
      k_rounds = static_cast<int>(parse_int(key, value));
    } else if (key == "tau") {
      tau = parse_double(key, value);
    } else if (key == "weights") {
      std::array<double, 4> w{};
      std::stringstream ss(value);
      std::string part;
      std::size_t i = 0;
      while (std::getline(ss, part, ',')) {
        if (i >= 4) throw Error(Errc::ConfigError, "weights: expected 4 values");
        w[i++] = parse_double(key, trim_copy(part));
      }
      if (i != 4) throw Error(Errc::ConfigError, "weights: expected 4 values");
      weights = risk::SeverityWeights(w);
    } else if (key == "beta_contract") {
      budgets.beta_contract = parse_int(key, value);
    } else if (key == "beta_audit") {
      budgets.beta_audit = parse_int(key, value);
    } else if (key == "lambda") {
      budgets.lambda = parse_double(key, value);
    } else if (key == "epsilon_edit") {
      epsilon_edit = parse_double(key, value);
    } else if (key == "safety_threshold") {
      safety_threshold = parse_double(key, value);
    } else if (key == "deviation_cap") {
      deviation_cap = parse_double(key, value);
    } else if (key == "five_dim_hints") {
      ablation.five_dim_hints = parse_bool(key, value);
    } else if (key == "budget_penalty") {
      ablation.budget_penalty = parse_bool(key, value);
    } else if (key == "iterate") {
      ablation.iterate = parse_bool(key, value);
    } else if (key == "qscore_weighting") {
      ablation.qscore_weighting = parse_bool(key, value);
    } else if (key == "evidence_policy") {
      if (value == "keep") evidence_policy = EvidencePolicy::Keep;
      else if (value == "drop") evidence_policy = EvidencePolicy::Drop;
      else throw Error(Errc::ConfigError, "evidence_policy must be keep|drop");
    } else if (key == "force_rewrite_cap") {
      force_rewrite_cap = static_cast<int>(parse_int(key, value));
    } else {
      throw Error(Errc::ConfigError, "unknown config key \"" + key + "\"");
    }
  }
  validate();
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_copy(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(Errc::ConfigError, path + ":" + std::to_string(lineno) +
                                         ": expected key = value");
    kv[trim_copy(line.substr(0, eq))] = trim_copy(line.substr(eq + 1));
  }
  return kv;
}

std::string request_digest(const ChatRequest& req) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  mix(req.system);
  h ^= 0x1f;
  h *= 1099511628211ull;
  mix(req.user);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Transcript::add_exchange(int round, const std::string& agent,
                              const ChatRequest& req, const ChatResponse& resp,
                              json parsed) {
  Event e;
  e.round = round;
  e.agent = agent;
  e.tag = req.tag;
  e.request_digest = request_digest(req);
  e.request_system = req.system;
  e.request_user = req.user;
  e.response = resp.text;
  e.parsed = std::move(parsed);
  events_.push_back(std::move(e));
}

void Transcript::add_warning(int round, const std::string& message) {
  Event e;
  e.round = round;
  e.agent = "engine";
  e.tag = "warning";
  e.message = message;
  events_.push_back(std::move(e));
}

void Transcript::set_final(const std::string& final_contract,
                           double final_j_l) {
  final_contract_ = final_contract;
  final_j_l_ = final_j_l;
}

std::size_t Transcript::exchange_count(const std::string& agent) const {
  std::size_t n = 0;
  for (const auto& e : events_)
    if (e.agent == agent && !e.response.empty()) ++n;
  return n;
}

std::string Transcript::to_jsonl() const {
  std::ostringstream os;
  for (const auto& e : events_) {
    json line;
    line["round"] = e.round;
    line["agent"] = e.agent;
    line["tag"] = e.tag;
    if (e.tag == "warning") {
      line["message"] = e.message;
    } else {
      line["request_digest"] = e.request_digest;
      line["response"] = e.response;
      line["parsed"] = e.parsed;
    }
    os << line.dump() << "\n";
  }
  json fin;
  fin["agent"] = "engine";
  fin["tag"] = "final";
  fin["final_contract"] = final_contract_;
  fin["final_j_l"] = final_j_l_;
  os << fin.dump() << "\n";
  return os.str();
}

void Transcript::write_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::ConfigError, "cannot write transcript " + path);
  out << to_jsonl();
}

std::unique_ptr<llm::ScriptedBackend> Transcript::to_replay_backend() const {
  std::vector<llm::ScriptedBackend::Entry> entries;
  for (const auto& e : events_)
    if (e.tag != "warning" && !e.response.empty())
      entries.push_back({".*", e.response});
  return std::make_unique<llm::ScriptedBackend>(std::move(entries));
}

std::unique_ptr<llm::ScriptedBackend> Transcript::replay_backend_from_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot open transcript " + path);
  std::vector<llm::ScriptedBackend::Entry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (trim_copy(line).empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception& err) {
      throw Error(Errc::MalformedJson,
                  std::string("bad transcript line: ") + err.what());
    }
    if (e.contains("response") && e["response"].is_string() &&
        !e["response"].get<std::string>().empty())
      entries.push_back({".*", e["response"].get<std::string>()});
  }
  return std::make_unique<llm::ScriptedBackend>(std::move(entries));
}

namespace {

std::vector<std::string> tokenize_ws(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::size_t levenshtein(const std::vector<std::string>& a,
                        const std::vector<std::string>& b) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0) return m;
  if (m == 0) return n;
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t cost = a[i - 1] == b[j - 1] ? 0 : 1;
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

std::string canonical_risk_id(const std::string& raw) {
  std::string s = trim_copy(raw);
  const auto cut = s.find_first_of(" (");
  return cut == std::string::npos ? s : trim_copy(s.substr(0, cut));
}

std::string render_qscore_content(const risk::RiskItem& item) {
  std::ostringstream os;
  os << "Category: " << item.category << "\n"
     << "Location: " << item.location << "\n"
     << "Evidence: " << item.evidence << "\n"
     << "Issue: " << item.issue << "\n"
     << "Suggestion: " << item.suggestion;
  return os.str();
}

bool is_backend_failure(const Error& e) {
  return e.code() == Errc::BackendUnavailable ||
         e.code() == Errc::ScriptExhausted;
}

}  // namespace

double normalized_edit_distance(const std::string& a, const std::string& b) {
  const auto ta = tokenize_ws(a);
  const auto tb = tokenize_ws(b);
  const std::size_t longest = std::max(ta.size(), tb.size());
  if (longest == 0) return 0.0;
  return static_cast<double>(levenshtein(ta, tb)) /
         static_cast<double>(longest);
}

bool detect_stall(const std::string& x_t, const std::string& x_prev,
                  double epsilon) {
  return normalized_edit_distance(x_t, x_prev) <= epsilon;
}

std::string FusionHint::render() const {
  std::ostringstream os;
  char buf[32];
  for (const auto& r : residuals) {
    std::snprintf(buf, sizeof buf, "%.3f", r.priority);
    os << "- [" << r.risk_id << "] (priority " << buf << ") " << r.directive
       << "\n";
  }
  std::string out = os.str();
  if (!out.empty() && out.back() == '\n') out.pop_back();
  return out;
}

FusionHint fuse(const std::vector<risk::ScoredRisk>& outer,
                const AuditReport& audit) {
  std::map<std::string, double> outer_severity;
  for (const auto& sr : outer) outer_severity[sr.risk.id] = sr.severity;

  FusionHint hint;
  double total = 0.0;
  for (const auto& entry : audit.entries) {
    if (entry.status == AuditStatus::Resolved) continue;
    const auto it = outer_severity.find(canonical_risk_id(entry.risk_id));
    const double sev = it == outer_severity.end() ? 0.0 : it->second;
    FusionResidual residual;
    residual.risk_id = canonical_risk_id(entry.risk_id);
    residual.priority = sev * entry.severity_weight;
    residual.directive = entry.gradient_feedback;
    total += residual.priority;
    hint.residuals.push_back(std::move(residual));
  }
  if (total > 0.0)
    for (auto& r : hint.residuals) r.priority /= total;
  else if (!hint.residuals.empty()) {
    const double uniform = 1.0 / static_cast<double>(hint.residuals.size());
    for (auto& r : hint.residuals) r.priority = uniform;
  }
  std::stable_sort(hint.residuals.begin(), hint.residuals.end(),
                   [](const FusionResidual& a, const FusionResidual& b) {
                     return a.priority > b.priority;
                   });
  return hint;
}

LeaderResult leader_step(const std::string& contract, const GameConfig& cfg,
                         llm::ChatBackend& backend, llm::TokenLedger& ledger,
                         Transcript& transcript) {
  if (contract.empty())
    throw Error(Errc::InvalidArgument, "empty contract");

  auto parts = llm::render_prompt("leader_extract",
                                  {{"CONTRACT_TEXT", contract}});
  ChatRequest req{parts.system, parts.user, 0.0, cfg.budgets.beta_contract,
                  "leader"};
  ChatResponse resp = llm::complete(backend, req, ledger);

  // Record the exchange before parsing so malformed responses still leave
  // their evidence in the transcript.
  json extracted = nullptr;
  try {
    extracted = llm::extract_json(resp.text);
  } catch (const Error&) {
  }
  transcript.add_exchange(0, "leader", req, resp, extracted);
  if (resp.truncated)
    transcript.add_warning(0, "leader completion hit max_tokens");

  auto parsed = risk::parse_risk_list(resp.text, contract);

  for (std::size_t idx : parsed.evidence_violations)
    transcript.add_warning(
        0, "evidence of " + parsed.items[idx].id +
               " is not a contract quote (" +
               (cfg.evidence_policy == EvidencePolicy::Drop ? "dropped"
                                                            : "kept") + ")");
  std::vector<risk::RiskItem> items;
  if (cfg.evidence_policy == EvidencePolicy::Drop) {
    std::vector<bool> bad(parsed.items.size(), false);
    for (std::size_t idx : parsed.evidence_violations) bad[idx] = true;
    for (std::size_t i = 0; i < parsed.items.size(); ++i)
      if (!bad[i]) items.push_back(parsed.items[i]);
  } else {
    items = parsed.items;
  }
  if (items.empty())
    throw Error(Errc::EmptyRiskSet, "no valid risks extracted");
  if (items.size() < 8 || items.size() > 15)
    transcript.add_warning(0, "leader returned " +
                                  std::to_string(items.size()) +
                                  " risks (prompt asks for 8-15)");

  std::vector<risk::ScoredRisk> scored;
  scored.reserve(items.size());
  for (const auto& item : items) {
    risk::ScoredRisk sr;
    sr.risk = item;
    if (cfg.ablation.qscore_weighting) {
      auto qparts = llm::render_prompt(
          "qscore", {{"RISK_CONTENT", render_qscore_content(item)}});
      ChatRequest qreq{qparts.system, qparts.user, 0.0, 256, "qscore"};
      ChatResponse qresp = llm::complete(backend, qreq, ledger);
      json qdoc = nullptr;
      try {
        qdoc = llm::extract_json(qresp.text);
      } catch (const Error&) {
      }
      transcript.add_exchange(0, "qscore", qreq, qresp, qdoc);
      if (qdoc.is_null())
        throw Error(Errc::NoJsonFound,
                    "qscore response for " + item.id + " carries no JSON");
      auto grade_at = [&qdoc](const char* key) {
        if (!qdoc.contains(key) || !qdoc[key].is_string())
          throw Error(Errc::SchemaViolation,
                      std::string("qscore response missing \"") + key + "\"");
        return risk::grade_from_string(qdoc[key].get<std::string>());
      };
      sr.qscore = {grade_at("Q1"), grade_at("Q2"), grade_at("Q3"),
                   grade_at("Q4")};
      sr.severity = risk::severity(sr.qscore, cfg.weights);
    } else {
      sr.severity = 0.5;  // uniform: severities play no role in this ablation
    }
    scored.push_back(std::move(sr));
  }

  std::vector<double> severities;
  severities.reserve(scored.size());
  for (const auto& sr : scored) severities.push_back(sr.severity);
  const auto attentions = risk::softmax_attention(severities, cfg.tau);
  for (std::size_t i = 0; i < scored.size(); ++i)
    scored[i].attention = attentions[i];

  LeaderResult out;
  out.hint = risk::select_under_budget(scored, cfg.budgets.beta_audit,
                                       cfg.ablation.five_dim_hints);
  if (out.hint.over_budget)
    transcript.add_warning(0, "top hint alone exceeds the audit budget");
  out.risks = std::move(scored);
  return out;
}

std::string follower_step(const FollowerInput& in, const GameConfig& cfg,
                          llm::ChatBackend& backend, llm::TokenLedger& ledger,
                          Transcript& transcript) {
  if (in.hint == nullptr || in.hint->hints.empty())
    throw Error(Errc::InvalidArgument, "follower_step needs a hint");

  const bool five_dim = cfg.ablation.five_dim_hints;
  const std::string outer_block =
      llm::render_fragment(
          "cra_outer_block",
          {{"OUTER_HINT", risk::serialize_hint(in.hint->hints, five_dim)}}) +
      "\n";

  char cap_buf[16];
  std::snprintf(cap_buf, sizeof cap_buf, "%g", cfg.deviation_cap * 100.0);
  const std::string fusion_block =
      llm::render_fragment("cra_fusion_block",
                           {{"DEVIATION_CAP_PERCENT", cap_buf}}) +
      "\n";

  std::string inner_block;
  if (in.fusion != nullptr && !in.fusion->empty()) {
    inner_block = llm::render_fragment(
                      "cra_inner_block",
                      {{"ITERATION", std::to_string(in.round - 1)},
                       {"INNER_FEEDBACK", in.fusion->render()}}) +
                  "\n";
  }

  auto parts = llm::render_prompt("cra_revise",
                                  {{"OUTER_HINT_BLOCK", outer_block},
                                   {"FUSION_HINT_BLOCK", fusion_block},
                                   {"INNER_HINT_BLOCK", inner_block},
                                   {"CONTRACT_TEXT", *in.contract}});
  ChatRequest req{parts.system, parts.user, 0.0, cfg.budgets.beta_contract,
                  "follower"};
  ChatResponse resp = llm::complete(backend, req, ledger);
  transcript.add_exchange(in.round, "follower", req, resp);
  if (resp.truncated)
    transcript.add_warning(in.round, "revision hit max_tokens (truncated)");

  const std::string revision = trim_copy(resp.text);
  if (revision.empty())
    throw Error(Errc::EmptyRevision, "follower returned an empty revision");
  return revision;
}

AuditReport inner_audit(const std::string& contract,
                        const risk::InstructionVector& hint,
                        const GameConfig& cfg, llm::ChatBackend& backend,
                        llm::TokenLedger& ledger, Transcript& transcript,
                        int round) {
  if (hint.hints.empty())
    throw Error(Errc::InvalidArgument, "inner_audit needs a non-empty hint");

  auto parts = llm::render_prompt(
      "lva_audit",
      {{"REVISED_CONTRACT", contract},
       {"RISK_DEFINITIONS",
        risk::serialize_hint(hint.hints, cfg.ablation.five_dim_hints)}});
  ChatRequest req{parts.system, parts.user, 0.0, cfg.budgets.beta_audit,
                  "auditor"};
  ChatResponse resp = llm::complete(backend, req, ledger);
  json doc = nullptr;
  try {
    doc = llm::extract_json(resp.text);
  } catch (const Error&) {
  }
  transcript.add_exchange(round, "auditor", req, resp, doc);
  if (resp.truncated)
    transcript.add_warning(round, "audit completion hit max_tokens");
  if (doc.is_null())
    throw Error(Errc::NoJsonFound, "audit response carries no JSON");

  if (!doc.is_object() || !doc.contains("audit_report") ||
      !doc["audit_report"].is_array())
    throw Error(Errc::SchemaViolation,
                "audit response needs an \"audit_report\" array");
  if (!doc.contains("global_safety_score") ||
      !doc["global_safety_score"].is_number())
    throw Error(Errc::SchemaViolation,
                "audit response needs a numeric \"global_safety_score\"");

  std::map<std::string, double> known;
  for (const auto& sr : hint.hints) known[sr.risk.id] = sr.severity;

  AuditReport report;
  report.global_safety_score = doc["global_safety_score"].get<double>();
  if (report.global_safety_score < 0.0 || report.global_safety_score > 1.0)
    throw Error(Errc::SchemaViolation, "global_safety_score outside [0, 1]");

  for (const auto& item : doc["audit_report"]) {
    if (!item.is_object() || !item.contains("risk_id") ||
        !item["risk_id"].is_string() || !item.contains("status") ||
        !item["status"].is_string())
      throw Error(Errc::SchemaViolation,
                  "audit entries need \"risk_id\" and \"status\"");
    AuditEntry entry;
    entry.risk_id = canonical_risk_id(item["risk_id"].get<std::string>());
    const auto it = known.find(entry.risk_id);
    if (it == known.end())
      throw Error(Errc::UnknownRiskId,
                  "audit references unknown risk \"" + entry.risk_id + "\"");
    entry.status = audit_status_from_string(item["status"].get<std::string>());
    if (item.contains("severity_weight")) {
      if (!item["severity_weight"].is_number())
        throw Error(Errc::SchemaViolation, "severity_weight must be a number");
      entry.severity_weight = item["severity_weight"].get<double>();
      if (entry.severity_weight < 0.0 || entry.severity_weight > 1.0)
        throw Error(Errc::SchemaViolation, "severity_weight outside [0, 1]");
    } else {
      entry.severity_weight = it->second;  // default to the outer severity
    }
    entry.location_quote = item.value("location_quote", "");
    entry.issue_description = item.value("issue_description", "");
    entry.gradient_feedback = item.value("gradient_feedback", "");
    report.entries.push_back(std::move(entry));
  }
  return report;
}

namespace {

std::vector<bool> resolved_flags(const risk::InstructionVector& hint,
                                 const AuditReport& audit) {
  std::vector<bool> flags(hint.hints.size(), false);
  for (std::size_t i = 0; i < hint.hints.size(); ++i)
    for (const auto& entry : audit.entries)
      if (entry.risk_id == hint.hints[i].risk.id &&
          entry.status == AuditStatus::Resolved)
        flags[i] = true;
  return flags;
}

}  // namespace

RunOutcome run_game(const std::string& contract, const GameConfig& cfg,
                    llm::ChatBackend& backend, llm::TokenLedger& ledger,
                    Transcript& transcript) {
  cfg.validate();
  if (contract.empty())
    throw Error(Errc::InvalidArgument, "empty contract");

  GameConfig effective = cfg;
  if (!cfg.ablation.budget_penalty) effective.budgets.lambda = 0.0;
  const int k_eff = cfg.ablation.iterate ? cfg.k_rounds : 1;

  RunOutcome outcome;
  GameState& state = outcome.state;
  state.contract_current = contract;

  auto abort_with = [&](const Error& e) {
    outcome.aborted = e.what();
    outcome.final_contract = state.contract_current;
    outcome.final_j_l =
        state.j_l_trace.empty() ? 0.0 : state.j_l_trace.back();
    transcript.add_warning(state.round,
                           std::string("game aborted: ") + e.what());
    transcript.set_final(outcome.final_contract, outcome.final_j_l);
    return outcome;
  };

  try {
    auto leader = leader_step(contract, effective, backend, ledger, transcript);
    state.outer_risks = std::move(leader.risks);
    state.hint = std::move(leader.hint);
  } catch (const Error& e) {
    if (is_backend_failure(e)) return abort_with(e);
    throw;
  }

  FusionHint fusion;
  for (int round = 1; round <= k_eff; ++round) {
    state.round = round;

    std::string revision;
    try {
      FollowerInput in;
      in.contract = &state.contract_current;
      in.hint = &state.hint;
      in.fusion = round > 1 ? &fusion : nullptr;
      in.round = round;
      revision = follower_step(in, effective, backend, ledger, transcript);
    } catch (const Error& e) {
      if (is_backend_failure(e)) return abort_with(e);
      throw;
    }

    const bool stalled =
        detect_stall(revision, state.contract_current, cfg.epsilon_edit);
    const bool residual_nonempty =
        round == 1 ? !state.hint.hints.empty() : !fusion.empty();

    if (stalled && !residual_nonempty) {
      // Converged: identical draft and nothing left to fix.
      transcript.add_warning(round, "stall with empty residual; stopping");
      state.contract_previous = state.contract_current;
      state.contract_current = revision;
      break;
    }

    if (stalled && residual_nonempty &&
        state.force_rewrites_fired < cfg.force_rewrite_cap) {
      ++state.force_rewrites_fired;
      std::string location, category;
      if (round == 1 || fusion.empty()) {
        location = state.hint.hints.front().risk.location;
        category = state.hint.hints.front().risk.category;
      } else {
        const auto& top = fusion.residuals.front();
        location = top.risk_id;
        for (const auto& sr : state.hint.hints)
          if (sr.risk.id == top.risk_id) {
            location = sr.risk.location;
            category = sr.risk.category;
            break;
          }
      }
      transcript.add_warning(round, "stall detected with residual risks; "
                                    "forcing a rewrite");
      try {
        auto parts = llm::render_prompt(
            "force_rewrite", {{"DETECTED_RISK_LOCATION", location},
                              {"RISK_CATEGORY", category},
                              {"CONTRACT_TEXT", state.contract_current}});
        ChatRequest req{parts.system, parts.user, 0.0,
                        effective.budgets.beta_contract, "force_rewrite"};
        ChatResponse resp = llm::complete(backend, req, ledger);
        transcript.add_exchange(round, "follower", req, resp);
        const std::string forced = trim_copy(resp.text);
        if (forced.empty())
          throw Error(Errc::EmptyRevision, "force rewrite returned nothing");
        revision = forced;
      } catch (const Error& e) {
        if (is_backend_failure(e)) return abort_with(e);
        throw;
      }
    }

    const double deviation = normalized_edit_distance(revision, contract);
    if (deviation > cfg.deviation_cap) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3f exceeds cap %.3f", deviation,
                    cfg.deviation_cap);
      transcript.add_warning(round, std::string("deviation ") + buf);
    }

    state.contract_previous = state.contract_current;
    state.contract_current = revision;

    AuditReport audit;
    try {
      audit = inner_audit(state.contract_current, state.hint, effective,
                          backend, ledger, transcript, round);
    } catch (const Error& e) {
      if (is_backend_failure(e)) return abort_with(e);
      throw;
    }
    state.last_audit = audit;

    state.j_l_trace.push_back(
        risk::leader_utility(state.hint.hints, resolved_flags(state.hint, audit),
                             state.hint, effective.budgets));

    fusion = fuse(state.hint.hints, audit);

    if (audit.global_safety_score >= cfg.safety_threshold) break;
  }

  outcome.final_contract = state.contract_current;
  outcome.final_j_l = state.j_l_trace.empty() ? 0.0 : state.j_l_trace.back();
  transcript.set_final(outcome.final_contract, outcome.final_j_l);
  return outcome;
}

}  // namespace stackrev::engine
