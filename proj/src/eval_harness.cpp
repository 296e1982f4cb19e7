#include "stackrev/eval_harness.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace stackrev::eval {

using nlohmann::json;

CqWeights::CqWeights(std::array<double, 4> w) : w_(w) {
  double sum = 0.0;
  for (double v : w_) {
    if (v < 0.0) throw Error(Errc::InvalidArgument, "cq weight < 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw Error(Errc::InvalidArgument, "cq weights must sum to 1");
}

double rrr(const std::vector<std::vector<JudgeVerdict>>& per_doc) {
  if (per_doc.empty())
    throw Error(Errc::EmptyDocument, "no documents to score");
  double doc_sum = 0.0;
  for (std::size_t d = 0; d < per_doc.size(); ++d) {
    const auto& verdicts = per_doc[d];
    if (verdicts.empty())
      throw Error(Errc::EmptyDocument,
                  "document " + std::to_string(d) + " has no verdicts");
    double weighted = 0.0;
    for (const auto& v : verdicts)
      weighted += v.resolved ? v.confidence : 0.0;
    doc_sum += weighted / static_cast<double>(verdicts.size());
  }
  return doc_sum / static_cast<double>(per_doc.size()) * 100.0;
}

double cq_mean(const std::array<double, 4>& s) {
  return (s[0] + s[1] + s[2] + s[3]) / 4.0;
}

double cq_mean(const QualityScores& s) {
  return cq_mean(std::array<double, 4>{
      static_cast<double>(s.clarity), static_cast<double>(s.rigor),
      static_cast<double>(s.balance), static_cast<double>(s.professionalism)});
}

double cq_weighted(const std::array<double, 4>& s, const CqWeights& w) {
  const auto& v = w.values();
  return v[0] * s[0] + v[1] * s[1] + v[2] * s[2] + v[3] * s[3];
}

double cq_weighted(const QualityScores& s, const CqWeights& w) {
  return cq_weighted(
      std::array<double, 4>{
          static_cast<double>(s.clarity), static_cast<double>(s.rigor),
          static_cast<double>(s.balance),
          static_cast<double>(s.professionalism)},
      w);
}

double tes_raw(std::int64_t resolved_count, std::int64_t total_tokens) {
  if (total_tokens <= 0)
    throw Error(Errc::ZeroTokens, "total_tokens must be > 0");
  return static_cast<double>(resolved_count) * 1000.0 /
         static_cast<double>(total_tokens);
}

double win_rate(int n_win, int n_tie, int n_total) {
  if (n_total <= 0 || n_win < 0 || n_tie < 0 || n_win + n_tie > n_total)
    throw Error(Errc::InvalidCounts, "need 0 <= n_win + n_tie <= n_total, n_total > 0");
  return (n_win + 0.5 * n_tie) / static_cast<double>(n_total);
}

std::pair<double, double> hr_ffr(
    const std::vector<EditAnnotation>& annotations) {
  if (annotations.empty())
    throw Error(Errc::EmptyDocument, "no clause annotations");
  int modified = 0, hallucinated = 0, attempted = 0, failed = 0;
  for (const auto& a : annotations) {
    if (a.fix_succeeded && !a.fix_attempted)
      throw Error(Errc::InvalidCounts,
                  "fix_succeeded requires fix_attempted");
    if (a.modified) {
      ++modified;
      if (!a.was_risky) ++hallucinated;
    }
    if (a.fix_attempted) {
      ++attempted;
      if (!a.fix_succeeded) ++failed;
    }
  }
  const double hr =
      modified == 0 ? 0.0 : 100.0 * hallucinated / static_cast<double>(modified);
  const double ffr =
      attempted == 0 ? 0.0 : 100.0 * failed / static_cast<double>(attempted);
  return {hr, ffr};
}

JudgeVerdict judge_resolution(const std::string& contract,
                              const pipeline::GoldenRisk& risk,
                              const std::string& seed_id,
                              llm::ChatBackend& backend,
                              llm::TokenLedger& ledger) {
  if (contract.empty())
    throw Error(Errc::InvalidArgument, "empty contract");
  auto parts = llm::render_prompt(
      "judge_resolution",
      {{"CONTRACT", contract},
       {"CATEGORY", risk.category},
       {"BASIS", risk.issue + " | Golden mitigation: " + risk.mitigation},
       {"SEED_ID", seed_id}});
  llm::ChatRequest req{parts.system, parts.user, 0.0, 512, "judge"};
  const auto resp = llm::complete(backend, req, ledger);
  const json doc = llm::extract_json(resp.text);

  if (!doc.is_object() || !doc.contains("resolved") ||
      !doc["resolved"].is_boolean())
    throw Error(Errc::SchemaViolation, "verdict needs a boolean \"resolved\"");
  if (!doc.contains("confidence") || !doc["confidence"].is_number())
    throw Error(Errc::SchemaViolation, "verdict needs a numeric \"confidence\"");

  JudgeVerdict verdict;
  verdict.seed_id = doc.value("seed_id", seed_id);
  verdict.resolved = doc["resolved"].get<bool>();
  verdict.confidence = doc["confidence"].get<double>();
  if (verdict.confidence < 0.0 || verdict.confidence > 1.0)
    throw Error(Errc::OutOfRange, "confidence outside [0, 1]");
  verdict.rationale = doc.value("rationale", "");
  return verdict;
}

QualityScores judge_quality(const std::string& contract,
                            llm::ChatBackend& backend,
                            llm::TokenLedger& ledger) {
  if (contract.empty())
    throw Error(Errc::InvalidArgument, "empty contract");
  auto parts = llm::render_prompt("judge_quality", {{"CONTRACT", contract}});
  llm::ChatRequest req{parts.system, parts.user, 0.0, 256, "judge"};
  const auto resp = llm::complete(backend, req, ledger);
  const json doc = llm::extract_json(resp.text);

  auto score_at = [&doc](const char* key) {
    if (!doc.contains(key) || !doc[key].is_number())
      throw Error(Errc::SchemaViolation,
                  std::string("quality response missing numeric \"") + key +
                      "\"");
    const double v = doc[key].get<double>();
    if (v < 0.0 || v > 100.0)
      throw Error(Errc::OutOfRange,
                  std::string(key) + " = " + std::to_string(v) +
                      " outside [0, 100]");
    return static_cast<int>(std::lround(v));
  };
  return QualityScores{score_at("clarity"), score_at("rigor"),
                       score_at("balance"), score_at("professionalism")};
}

}  // namespace stackrev::eval
