#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "stackrev/llm_gateway.hpp"

namespace stackrev::pipeline {

struct RawDocument {
  std::string source_name;  // filename or raw header
  std::string body;
};

struct ClassifiedDocument {
  std::string category_id;
  std::string clean_header;
  std::string body;
};

inline constexpr const char* kUncategorized = "Uncategorized";

/// One classification rule: fires when every `all_of` keyword and at least
/// one `any_of` keyword (if given) occurs as a whole word in the cleaned
/// header. Lower priority index wins.
struct KeywordRule {
  int priority = 0;
  std::string category_id;
  std::vector<std::string> all_of;
  std::vector<std::string> any_of;
};

/// The built-in taxonomy: the three canonical header rules first, then the
/// long-tail categories. Editable by callers that need a different table.
const std::vector<KeywordRule>& default_taxonomy();

/// Strips extensions and numbering artifacts, collapses separators, lowers
/// case. Idempotent.
std::string clean_header(const std::string& raw);

std::string classify_header(const std::string& clean);
std::string classify_header(const std::string& clean,
                            const std::vector<KeywordRule>& table);

struct StandardTemplate {
  static const std::array<const char*, 7>& section_names();

  std::string text;  // full plain-text template
  std::map<std::string, std::string> sections;
  int word_count = 0;
};

enum class ViolationKind {
  SectionMissing,
  OverLength,
  MarkdownDetected,
  ForeignPlaceholder,
};

struct Violation {
  ViolationKind kind;
  std::string detail;
};

const char* violation_kind_name(ViolationKind kind);

struct StandardizeResult {
  StandardTemplate tmpl;
  std::vector<Violation> violations;
};

/// Parses and validates a candidate template text: all 7 sections present,
/// <= 1500 words, no markdown markers, placeholder vocabulary limited to
/// [Party A] / [Party B] / [Effective Date] / [Amount].
StandardizeResult validate_template(const std::string& text);

/// Stage 2: renders the standardization prompt, completes, validates.
/// Violations are returned, not thrown; the caller retries or rejects.
StandardizeResult standardize(const ClassifiedDocument& doc,
                              llm::ChatBackend& backend,
                              llm::TokenLedger& ledger);

struct GoldenRisk {
  std::string category;
  std::string issue;
  std::string mitigation;
};

/// Trivia screen from the stage-3 negative constraints: signatures, missing
/// dates, typos, formatting, generic governing-law preferences.
bool matches_negative_constraints(const std::string& text);

struct EnrichResult {
  std::vector<GoldenRisk> risks;
  int filtered_count = 0;
};

/// Stage 3: renders the adversarial enrichment prompt, parses the
/// {"risks": [...]} payload and applies the negative-constraint filter.
EnrichResult enrich(const StandardTemplate& tmpl, llm::ChatBackend& backend,
                    llm::TokenLedger& ledger);

}  // namespace stackrev::pipeline
