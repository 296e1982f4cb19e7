#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stackrev/llm_gateway.hpp"
#include "stackrev/pipeline.hpp"

namespace stackrev::eval {

struct JudgeVerdict {
  std::string seed_id;
  bool resolved = false;
  double confidence = 0.0;  // sigma in [0, 1]
  std::string rationale;
};

struct QualityScores {
  int clarity = 0;
  int rigor = 0;
  int balance = 0;
  int professionalism = 0;
};

class CqWeights {
 public:
  explicit CqWeights(std::array<double, 4> w);
  static CqWeights defaults() { return CqWeights({0.25, 0.30, 0.25, 0.20}); }
  const std::array<double, 4>& values() const noexcept { return w_; }

 private:
  std::array<double, 4> w_;
};

struct EditAnnotation {
  bool modified = false;
  bool was_risky = false;
  bool fix_attempted = false;
  bool fix_succeeded = false;
};

/// Confidence-weighted risk resolution rate: per document the mean of
/// y_i * sigma_i, averaged over documents, times 100.
double rrr(const std::vector<std::vector<JudgeVerdict>>& per_doc);

double cq_mean(const std::array<double, 4>& s);
double cq_mean(const QualityScores& s);
double cq_weighted(const std::array<double, 4>& s, const CqWeights& w);
double cq_weighted(const QualityScores& s, const CqWeights& w);

/// Risks resolved per 1,000 tokens.
double tes_raw(std::int64_t resolved_count, std::int64_t total_tokens);

/// (n_win + 0.5 * n_tie) / n_total.
double win_rate(int n_win, int n_tie, int n_total);

/// HR = share of modifications touching non-risky clauses; FFR = share of
/// attempted fixes that failed. Both as percentages, 0 when the denominator
/// is empty.
std::pair<double, double> hr_ffr(const std::vector<EditAnnotation>& annotations);

JudgeVerdict judge_resolution(const std::string& contract,
                              const pipeline::GoldenRisk& risk,
                              const std::string& seed_id,
                              llm::ChatBackend& backend,
                              llm::TokenLedger& ledger);

QualityScores judge_quality(const std::string& contract,
                            llm::ChatBackend& backend,
                            llm::TokenLedger& ledger);

}  // namespace stackrev::eval
