#include "stackrev/risk_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stackrev/llm_gateway.hpp"

#include <nlohmann/json.hpp>

namespace stackrev::risk {

using nlohmann::json;

Grade grade_from_string(const std::string& s) {
  if (s == "A") return Grade::A;
  if (s == "B") return Grade::B;
  if (s == "C") return Grade::C;
  throw Error(Errc::SchemaViolation, "grade must be one of A/B/C, got \"" + s + "\"");
}

const char* grade_to_string(Grade g) {
  switch (g) {
    case Grade::A: return "A";
    case Grade::B: return "B";
    case Grade::C: return "C";
  }
  return "?";
}

SeverityWeights::SeverityWeights(std::array<double, 4> w) : w_(w) {
  double sum = 0.0;
  for (double v : w_) {
    if (v < 0.0) throw Error(Errc::InvalidArgument, "severity weight < 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw Error(Errc::InvalidArgument, "severity weights must sum to 1");
}

SeverityWeights SeverityWeights::normalized(std::array<double, 4> raw) {
  double sum = 0.0;
  for (double v : raw) {
    if (v < 0.0) throw Error(Errc::InvalidArgument, "severity weight < 0");
    sum += v;
  }
  if (sum <= 0.0) throw Error(Errc::InvalidArgument, "severity weights all zero");
  for (double& v : raw) v /= sum;
  return SeverityWeights(raw);
}

void BudgetConfig::validate() const {
  if (beta_contract <= 0 || beta_audit <= 0)
    throw Error(Errc::ConfigError, "budgets must be positive");
  if (lambda < 0.0) throw Error(Errc::ConfigError, "lambda must be >= 0");
}

double grade_to_unit(Grade g) {
  switch (g) {
    case Grade::A: return 1.0;
    case Grade::B: return 0.5;
    case Grade::C: return 0.0;
  }
  return 0.0;
}

double severity(const QScore& q, const SeverityWeights& w) {
  const auto& v = w.values();
  const double terms[4] = {
      v[0] * grade_to_unit(q.q1), v[1] * grade_to_unit(q.q2),
      v[2] * grade_to_unit(q.q3), v[3] * grade_to_unit(q.q4)};
  // Kahan summation: keeps the all-A case at exactly 1.0 for the default
  // weights, where naive left-to-right accumulation drifts by one ulp.
  double sum = 0.0, comp = 0.0;
  for (double term : terms) {
    const double y = term - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
  return sum;
}

std::vector<double> softmax_attention(const std::vector<double>& severities,
                                      double tau) {
  if (severities.empty())
    throw Error(Errc::EmptyRiskSet, "softmax over an empty risk set");
  if (!(tau > 0.0))
    throw Error(Errc::InvalidTemperature, "tau must be > 0");

  const double max_s = *std::max_element(severities.begin(), severities.end());
  std::vector<double> out(severities.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < severities.size(); ++i) {
    out[i] = std::exp((severities[i] - max_s) / tau);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

std::string serialize_hint(const std::vector<ScoredRisk>& risks,
                           bool five_dim) {
  std::ostringstream os;
  bool first = true;
  for (const auto& sr : risks) {
    if (!first) os << "\n";
    first = false;
    os << "[" << sr.risk.id << "]\n";
    os << "Category: " << sr.risk.category << "\n";
    if (five_dim) {
      os << "Location: " << sr.risk.location << "\n";
      os << "Evidence: " << sr.risk.evidence << "\n";
      os << "Issue: " << sr.risk.issue << "\n";
      os << "Suggestion: " << sr.risk.suggestion << "\n";
    }
  }
  return os.str();
}

std::int64_t budget_penalty(const InstructionVector& h,
                            std::int64_t beta_audit) {
  return std::max<std::int64_t>(0, h.serialized_tokens - beta_audit);
}

InstructionVector select_under_budget(const std::vector<ScoredRisk>& risks,
                                      std::int64_t beta_audit,
                                      bool five_dim) {
  if (risks.empty())
    throw Error(Errc::EmptyRiskSet, "no risks to select from");

  std::vector<std::size_t> order(risks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (risks[a].attention != risks[b].attention)
      return risks[a].attention > risks[b].attention;
    if (a != b) return a < b;  // document order of the extracted list
    return risks[a].risk.id < risks[b].risk.id;
  });

  InstructionVector out;
  for (std::size_t idx : order) {
    std::vector<ScoredRisk> candidate = out.hints;
    candidate.push_back(risks[idx]);
    const auto tokens = static_cast<std::int64_t>(
        llm::token_count(serialize_hint(candidate, five_dim)));
    if (tokens <= beta_audit) {
      out.hints = std::move(candidate);
      out.serialized_tokens = tokens;
      continue;
    }
    if (out.hints.empty()) {
      // Never emit an empty leader move: keep the top risk and flag it.
      out.hints = std::move(candidate);
      out.serialized_tokens = tokens;
      out.over_budget = true;
    }
    break;
  }
  return out;
}

double leader_utility(const std::vector<ScoredRisk>& risks,
                      const std::vector<bool>& resolved,
                      const InstructionVector& h, const BudgetConfig& cfg) {
  if (risks.size() != resolved.size())
    throw Error(Errc::ArityMismatch,
                "risks and resolved flags differ in length");
  double score = 0.0;
  for (std::size_t i = 0; i < risks.size(); ++i)
    if (resolved[i]) score += risks[i].severity;
  return score -
         cfg.lambda * static_cast<double>(budget_penalty(h, cfg.beta_audit));
}

std::string normalize_whitespace(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_space = true;  // swallows leading whitespace
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(c);
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

namespace {

std::string trimmed(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string risk_id_for(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "R_%02zu", index + 1);
  return buf;
}

}  // namespace

ParsedRiskList parse_risk_list(const std::string& json_text,
                               const std::string& contract) {
  const json doc = llm::extract_json(json_text);
  if (!doc.is_object() || !doc.contains("risk_categories") ||
      !doc["risk_categories"].is_array())
    throw Error(Errc::SchemaViolation,
                "expected an object with a \"risk_categories\" array");

  static const char* kFields[] = {"category", "location", "evidence", "issue",
                                  "suggestion"};
  const std::string normalized_contract = normalize_whitespace(contract);

  ParsedRiskList out;
  std::size_t index = 0;
  for (const auto& entry : doc["risk_categories"]) {
    if (!entry.is_object())
      throw Error(Errc::SchemaViolation,
                  "risk_categories[" + std::to_string(index) +
                      "] is not an object");
    RiskItem item;
    item.id = risk_id_for(index);
    for (const auto& [key, value] : entry.items()) {
      const bool known =
          std::any_of(std::begin(kFields), std::end(kFields),
                      [&key](const char* f) { return key == f; });
      if (!known)
        throw Error(Errc::SchemaViolation,
                    "unexpected key \"" + key + "\" at index " +
                        std::to_string(index));
    }
    for (const char* field : kFields) {
      if (!entry.contains(field) || !entry[field].is_string())
        throw Error(Errc::SchemaViolation,
                    std::string("missing or non-string field \"") + field +
                        "\" at index " + std::to_string(index));
      const std::string value = trimmed(entry[field].get<std::string>());
      if (value.empty())
        throw Error(Errc::SchemaViolation,
                    std::string("empty field \"") + field + "\" at index " +
                        std::to_string(index));
      if (field == kFields[0]) item.category = value;
      else if (field == kFields[1]) item.location = value;
      else if (field == kFields[2]) item.evidence = value;
      else if (field == kFields[3]) item.issue = value;
      else item.suggestion = value;
    }
    if (item.evidence != kMissingClauseSentinel &&
        normalized_contract.find(normalize_whitespace(item.evidence)) ==
            std::string::npos) {
      out.evidence_violations.push_back(out.items.size());
    }
    out.items.push_back(std::move(item));
    ++index;
  }
  return out;
}

}  // namespace stackrev::risk
