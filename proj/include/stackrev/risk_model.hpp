#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stackrev/errors.hpp"

namespace stackrev::risk {

/// One extracted risk point: the five-field tuple the auditor emits per
/// finding. `evidence` is either a verbatim quote from the source contract or
/// the literal sentinel "Missing clause".
struct RiskItem {
  std::string id;
  std::string category;
  std::string location;
  std::string evidence;
  std::string issue;
  std::string suggestion;
};

inline constexpr const char* kMissingClauseSentinel = "Missing clause";

enum class Grade : std::uint8_t { A, B, C };

Grade grade_from_string(const std::string& s);
const char* grade_to_string(Grade g);

/// Four-dimension A/B/C severity grading of a single risk.
struct QScore {
  Grade q1 = Grade::C;
  Grade q2 = Grade::C;
  Grade q3 = Grade::C;
  Grade q4 = Grade::C;
};

/// Non-negative weights over the four Q dimensions, summing to 1.
class SeverityWeights {
 public:
  /// Validates components >= 0 and sum == 1 within 1e-9.
  explicit SeverityWeights(std::array<double, 4> w);

  /// Scales an arbitrary non-negative vector to sum 1.
  static SeverityWeights normalized(std::array<double, 4> raw);

  static SeverityWeights defaults() {
    return SeverityWeights({0.4, 0.2, 0.2, 0.2});
  }

  const std::array<double, 4>& values() const noexcept { return w_; }

 private:
  std::array<double, 4> w_;
};

struct ScoredRisk {
  RiskItem risk;
  QScore qscore;
  double severity = 0.0;   // dot(weights, grade units), in [0, 1]
  double attention = 0.0;  // softmax weight over the risk set, in (0, 1)
};

/// The budget-selected hint set, sorted by attention descending.
struct InstructionVector {
  std::vector<ScoredRisk> hints;
  std::int64_t serialized_tokens = 0;
  bool over_budget = false;  // the single top risk alone exceeded the budget
};

struct BudgetConfig {
  std::int64_t beta_contract = 3000;  // tokens per revision completion
  std::int64_t beta_audit = 1500;     // tokens for the serialized hint block
  double lambda = 0.01;               // budget-violation penalty coefficient

  void validate() const;
};

/// A -> 1.0, B -> 0.5, C -> 0.0.
double grade_to_unit(Grade g);

/// Weighted sum of grade units; bounded in [0, 1].
double severity(const QScore& q, const SeverityWeights& w);

/// alpha_k = exp(s_k / tau) / sum_j exp(s_j / tau). Computed with the usual
/// max-shift so extreme tau values stay finite.
std::vector<double> softmax_attention(const std::vector<double>& severities,
                                      double tau);

/// Deterministic field-labelled rendering of a hint set; the empty list
/// renders to the empty string. `five_dim` = false reduces each hint to its
/// category line only (ablation).
std::string serialize_hint(const std::vector<ScoredRisk>& risks,
                           bool five_dim = true);

/// max(0, serialized_tokens - beta_audit).
std::int64_t budget_penalty(const InstructionVector& h,
                            std::int64_t beta_audit);

/// Greedy top-attention prefix that fits the token budget. Ties broken by
/// input (document) order, then id. The top risk is always included even when
/// it alone exceeds the budget, in which case `over_budget` is set.
InstructionVector select_under_budget(const std::vector<ScoredRisk>& risks,
                                      std::int64_t beta_audit,
                                      bool five_dim = true);

/// Discrete leader utility: sum of severities of resolved risks minus
/// lambda * budget penalty of the instruction vector.
double leader_utility(const std::vector<ScoredRisk>& risks,
                      const std::vector<bool>& resolved,
                      const InstructionVector& h, const BudgetConfig& cfg);

struct ParsedRiskList {
  std::vector<RiskItem> items;
  /// Indices into `items` whose evidence is neither a substring of the
  /// contract (after whitespace normalization) nor the missing-clause
  /// sentinel. Warning-level: the caller decides to drop or keep them.
  std::vector<std::size_t> evidence_violations;
};

/// Parses the {"risk_categories": [...]} wire format (markdown fences
/// tolerated), assigns ids R_01.., validates the five fields, and checks each
/// evidence quote against the contract.
ParsedRiskList parse_risk_list(const std::string& json_text,
                               const std::string& contract);

/// Collapses all whitespace runs to single spaces and trims the ends.
std::string normalize_whitespace(const std::string& text);

}  // namespace stackrev::risk
