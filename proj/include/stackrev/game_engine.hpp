#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stackrev/llm_gateway.hpp"
#include "stackrev/risk_model.hpp"

#include <nlohmann/json.hpp>

namespace stackrev::engine {

enum class AuditStatus { Resolved, PartiallyResolved, Unresolved };

AuditStatus audit_status_from_string(const std::string& s);
const char* audit_status_to_string(AuditStatus s);

struct AuditEntry {
  std::string risk_id;
  AuditStatus status = AuditStatus::Unresolved;
  double severity_weight = 0.0;
  std::string location_quote;
  std::string issue_description;
  std::string gradient_feedback;
};

struct AuditReport {
  std::vector<AuditEntry> entries;
  double global_safety_score = 0.0;
};

struct AblationFlags {
  bool five_dim_hints = true;
  bool budget_penalty = true;
  bool iterate = true;
  bool qscore_weighting = true;
};

enum class EvidencePolicy { Keep, Drop };

struct GameConfig {
  int k_rounds = 3;
  double tau = 1.0;
  risk::SeverityWeights weights = risk::SeverityWeights::defaults();
  risk::BudgetConfig budgets;
  double epsilon_edit = 0.0;       // 0 = exact-match stall
  double safety_threshold = 0.95;  // early stop on audit safety
  double deviation_cap = 0.15;     // transcript warning, not a rejection
  AblationFlags ablation;
  EvidencePolicy evidence_policy = EvidencePolicy::Keep;
  int force_rewrite_cap = 2;

  void validate() const;

  /// Applies `key = value` pairs; unknown keys are rejected.
  void apply_kv(const std::map<std::string, std::string>& kv);

  static const std::vector<std::string>& known_keys();
};

/// Reads a `key = value` file ('#' comments, blank lines ignored).
std::map<std::string, std::string> parse_kv_file(const std::string& path);

/// Round-by-round record of every model exchange plus warnings and the final
/// result. Holds full request text in memory so a finished game can be
/// replayed bit-for-bit through a scripted backend.
class Transcript {
 public:
  struct Event {
    int round = 0;
    std::string agent;  // leader | qscore | follower | auditor | engine
    std::string tag;
    std::string request_digest;
    std::string request_system;
    std::string request_user;
    std::string response;
    nlohmann::json parsed;  // null when nothing was parsed
    std::string message;    // warnings / final notes
  };

  void add_exchange(int round, const std::string& agent,
                    const llm::ChatRequest& req, const llm::ChatResponse& resp,
                    nlohmann::json parsed = nullptr);
  void add_warning(int round, const std::string& message);
  void set_final(const std::string& final_contract, double final_j_l);

  const std::vector<Event>& events() const { return events_; }
  const std::string& final_contract() const { return final_contract_; }
  double final_j_l() const { return final_j_l_; }

  std::size_t exchange_count(const std::string& agent) const;

  void write_jsonl(const std::string& path) const;
  std::string to_jsonl() const;

  /// Ordered scripted backend that replays this transcript's responses.
  std::unique_ptr<llm::ScriptedBackend> to_replay_backend() const;

  /// Same, but reading a persisted transcript file.
  static std::unique_ptr<llm::ScriptedBackend> replay_backend_from_file(
      const std::string& path);

 private:
  std::vector<Event> events_;
  std::string final_contract_;
  double final_j_l_ = 0.0;
};

/// FNV-1a over system + 0x1f + user, hex encoded.
std::string request_digest(const llm::ChatRequest& req);

struct GameState {
  int round = 0;
  std::string contract_current;
  std::string contract_previous;
  std::vector<risk::ScoredRisk> outer_risks;
  risk::InstructionVector hint;
  AuditReport last_audit;
  int force_rewrites_fired = 0;
  std::vector<double> j_l_trace;
};

struct FusionResidual {
  std::string risk_id;
  double priority = 0.0;      // product-of-experts weight, renormalized
  std::string directive;      // one-line instruction for the next revision
};

struct FusionHint {
  std::vector<FusionResidual> residuals;

  bool empty() const { return residuals.empty(); }
  /// Priority-ordered feedback lines for the next revision prompt.
  std::string render() const;
};

/// Product-of-experts combination of outer severities and inner audit
/// weights. RESOLVED risks are dropped; the rest are renormalized.
FusionHint fuse(const std::vector<risk::ScoredRisk>& outer,
                const AuditReport& audit);

/// True iff the normalized token-level Levenshtein distance between the two
/// texts is <= epsilon. epsilon = 0 means equality up to whitespace.
bool detect_stall(const std::string& x_t, const std::string& x_prev,
                  double epsilon);

double normalized_edit_distance(const std::string& a, const std::string& b);

struct LeaderResult {
  std::vector<risk::ScoredRisk> risks;  // all extracted, with attentions
  risk::InstructionVector hint;         // budget-selected subset
};

LeaderResult leader_step(const std::string& contract, const GameConfig& cfg,
                         llm::ChatBackend& backend, llm::TokenLedger& ledger,
                         Transcript& transcript);

struct FollowerInput {
  const std::string* contract = nullptr;
  const risk::InstructionVector* hint = nullptr;
  const FusionHint* fusion = nullptr;  // null/empty on the first round
  int round = 1;
};

std::string follower_step(const FollowerInput& in, const GameConfig& cfg,
                          llm::ChatBackend& backend, llm::TokenLedger& ledger,
                          Transcript& transcript);

AuditReport inner_audit(const std::string& contract,
                        const risk::InstructionVector& hint,
                        const GameConfig& cfg, llm::ChatBackend& backend,
                        llm::TokenLedger& ledger, Transcript& transcript,
                        int round);

struct RunOutcome {
  std::string final_contract;
  GameState state;
  double final_j_l = 0.0;
  /// Set when an unrecoverable backend failure aborted the game; the
  /// transcript passed to run_game holds everything up to that point.
  std::optional<std::string> aborted;
};

/// One leader prescription driving up to k_rounds revision-audit iterations.
/// The transcript is filled in place so partial games survive aborts.
RunOutcome run_game(const std::string& contract, const GameConfig& cfg,
                    llm::ChatBackend& backend, llm::TokenLedger& ledger,
                    Transcript& transcript);

}  // namespace stackrev::engine
