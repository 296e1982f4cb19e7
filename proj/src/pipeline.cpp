#include "stackrev/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include <nlohmann/json.hpp>

namespace stackrev::pipeline {

using nlohmann::json;

namespace {

std::string to_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isdigit(c);
  });
}

bool is_version_token(const std::string& s) {
  if (is_all_digits(s)) return true;
  if (s.size() >= 2 && (s[0] == 'v' || s[0] == 'V'))
    return is_all_digits(s.substr(1));
  return false;
}

std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : s) {
    if (c == '_' || c == '-' || std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

bool contains_word_sequence(const std::vector<std::string>& tokens,
                            const std::string& keyword) {
  const auto kw = split_tokens(keyword);
  if (kw.empty() || kw.size() > tokens.size()) return false;
  for (std::size_t i = 0; i + kw.size() <= tokens.size(); ++i) {
    bool match = true;
    for (std::size_t j = 0; j < kw.size(); ++j)
      if (tokens[i + j] != kw[j]) {
        match = false;
        break;
      }
    if (match) return true;
  }
  return false;
}

}  // namespace

std::string clean_header(const std::string& raw) {
  std::string s = raw;
  // Drop known extensions (possibly stacked) from the end.
  static const char* kExtensions[] = {".pdf", ".docx", ".txt"};
  bool stripped = true;
  while (stripped) {
    stripped = false;
    const std::string lower = to_lower(s);
    for (const char* ext : kExtensions) {
      const std::size_t len = std::string(ext).size();
      if (lower.size() >= len && lower.compare(lower.size() - len, len, ext) == 0) {
        s = s.substr(0, s.size() - len);
        stripped = true;
      }
    }
  }

  auto tokens = split_tokens(s);
  // Leading numbering artifacts ("01", "2020", ...).
  std::size_t begin = 0;
  while (begin < tokens.size() && is_all_digits(tokens[begin])) ++begin;
  // Trailing version suffixes ("v2", "03").
  std::size_t end = tokens.size();
  while (end > begin && is_version_token(tokens[end - 1])) --end;

  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += to_lower(tokens[i]);
  }
  return out;
}

const std::vector<KeywordRule>& default_taxonomy() {
  static const std::vector<KeywordRule> kRules = {
      {0, "Software License", {"license", "software"}, {}},
      {1, "Service Agreement", {}, {"consulting", "service", "services"}},
      {2, "NDA", {}, {"confidential", "confidentiality", "nda",
                      "non disclosure", "nondisclosure"}},
      {3, "Merger", {}, {"merger", "acquisition"}},
      {4, "Disclosure", {}, {"disclosure"}},
      {5, "Manufacturing", {}, {"manufacturing", "supply"}},
      {6, "Marketing", {}, {"marketing", "advertising", "promotion"}},
      {7, "Affiliate", {}, {"affiliate"}},
      {8, "Distribution", {}, {"distribution", "distributor", "reseller"}},
      {9, "Employment", {}, {"employment", "employee"}},
      {10, "Joint Venture", {}, {"joint venture", "partnership"}},
      {11, "Lease", {}, {"lease", "rental"}},
      {12, "Privacy Policy", {}, {"privacy"}},
      {13, "Franchise", {}, {"franchise"}},
      {14, "Sponsorship", {}, {"sponsorship", "sponsor"}},
  };
  return kRules;
}

std::string classify_header(const std::string& clean) {
  return classify_header(clean, default_taxonomy());
}

std::string classify_header(const std::string& clean,
                            const std::vector<KeywordRule>& table) {
  const auto tokens = split_tokens(clean);
  const KeywordRule* best = nullptr;
  for (const auto& rule : table) {
    bool fires = true;
    for (const auto& kw : rule.all_of)
      if (!contains_word_sequence(tokens, kw)) {
        fires = false;
        break;
      }
    if (fires && !rule.any_of.empty()) {
      fires = false;
      for (const auto& kw : rule.any_of)
        if (contains_word_sequence(tokens, kw)) {
          fires = true;
          break;
        }
    }
    if (fires && rule.all_of.empty() && rule.any_of.empty()) fires = false;
    if (fires && (best == nullptr || rule.priority < best->priority))
      best = &rule;
  }
  return best == nullptr ? kUncategorized : best->category_id;
}

const std::array<const char*, 7>& StandardTemplate::section_names() {
  static const std::array<const char*, 7> kNames = {
      "Definitions",
      "Scope of Services",
      "Fees and Payment",
      "IP Ownership",
      "Confidentiality & Data Protection",
      "Indemnification & Liability",
      "Term & Termination",
  };
  return kNames;
}

const char* violation_kind_name(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::SectionMissing: return "SectionMissing";
    case ViolationKind::OverLength: return "OverLength";
    case ViolationKind::MarkdownDetected: return "MarkdownDetected";
    case ViolationKind::ForeignPlaceholder: return "ForeignPlaceholder";
  }
  return "?";
}

namespace {

int count_words(const std::string& text) {
  int words = 0;
  bool in_word = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++words;
    }
  }
  return words;
}

std::string trim_copy(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

StandardizeResult validate_template(const std::string& text) {
  StandardizeResult result;
  result.tmpl.text = text;
  result.tmpl.word_count = count_words(text);

  // Split on section header lines.
  std::vector<std::pair<std::string, std::size_t>> found;  // name, byte pos
  std::istringstream lines(text);
  std::string line;
  std::size_t offset = 0;
  std::map<std::string, std::size_t> header_pos;
  while (std::getline(lines, line)) {
    const std::string t = trim_copy(line);
    for (const char* name : StandardTemplate::section_names())
      if (t == name && header_pos.find(name) == header_pos.end())
        header_pos[name] = offset;
    offset += line.size() + 1;
  }

  std::vector<std::pair<std::size_t, std::string>> ordered;
  for (const char* name : StandardTemplate::section_names()) {
    const auto it = header_pos.find(name);
    if (it == header_pos.end()) {
      result.violations.push_back({ViolationKind::SectionMissing, name});
    } else {
      ordered.emplace_back(it->second, name);
    }
  }
  std::sort(ordered.begin(), ordered.end());
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    const std::size_t body_start = ordered[i].first + ordered[i].second.size();
    const std::size_t body_end =
        i + 1 < ordered.size() ? ordered[i + 1].first : text.size();
    result.tmpl.sections[ordered[i].second] =
        trim_copy(text.substr(body_start, body_end - body_start));
  }

  if (result.tmpl.word_count > 1500)
    result.violations.push_back(
        {ViolationKind::OverLength, std::to_string(result.tmpl.word_count)});

  if (text.find("```") != std::string::npos ||
      text.find('*') != std::string::npos ||
      text.find('#') != std::string::npos)
    result.violations.push_back({ViolationKind::MarkdownDetected, ""});

  static const char* kAllowed[] = {"[Party A]", "[Party B]", "[Effective Date]",
                                   "[Amount]"};
  std::size_t pos = 0;
  while ((pos = text.find('[', pos)) != std::string::npos) {
    const auto close = text.find(']', pos);
    if (close == std::string::npos) break;
    const std::string token = text.substr(pos, close - pos + 1);
    const bool ok = std::any_of(std::begin(kAllowed), std::end(kAllowed),
                                [&token](const char* a) { return token == a; });
    if (!ok)
      result.violations.push_back({ViolationKind::ForeignPlaceholder, token});
    pos = close + 1;
  }
  return result;
}

StandardizeResult standardize(const ClassifiedDocument& doc,
                              llm::ChatBackend& backend,
                              llm::TokenLedger& ledger) {
  if (doc.body.empty())
    throw Error(Errc::InvalidArgument, "document body is empty");
  auto parts =
      llm::render_prompt("stage2_standardize", {{"SOURCE_TEXT", doc.body}});
  llm::ChatRequest req{parts.system, parts.user, 0.0, 3000, "standardize"};
  const auto resp = llm::complete(backend, req, ledger);
  return validate_template(resp.text);
}

bool matches_negative_constraints(const std::string& text) {
  static const char* kKeywords[] = {"signature", "date missing", "typo",
                                    "formatting", "governing law"};
  const std::string lower = to_lower(text);
  for (const char* kw : kKeywords)
    if (lower.find(kw) != std::string::npos) return true;
  return false;
}

EnrichResult enrich(const StandardTemplate& tmpl, llm::ChatBackend& backend,
                    llm::TokenLedger& ledger) {
  auto parts =
      llm::render_prompt("stage3_enrich", {{"TEMPLATE_TEXT", tmpl.text}});
  llm::ChatRequest req{parts.system, parts.user, 0.0, 3000, "enrich"};
  const auto resp = llm::complete(backend, req, ledger);

  const json doc = llm::extract_json(resp.text);
  if (!doc.is_object() || !doc.contains("risks") || !doc["risks"].is_array())
    throw Error(Errc::SchemaViolation, "expected {\"risks\": [...]}");

  EnrichResult result;
  std::size_t index = 0;
  for (const auto& item : doc["risks"]) {
    for (const char* field : {"category", "issue", "mitigation"})
      if (!item.contains(field) || !item[field].is_string() ||
          trim_copy(item[field].get<std::string>()).empty())
        throw Error(Errc::SchemaViolation,
                    std::string("risk ") + std::to_string(index) +
                        " missing \"" + field + "\"");
    GoldenRisk risk{trim_copy(item["category"].get<std::string>()),
                    trim_copy(item["issue"].get<std::string>()),
                    trim_copy(item["mitigation"].get<std::string>())};
    if (matches_negative_constraints(risk.category + " " + risk.issue)) {
      ++result.filtered_count;
    } else {
      result.risks.push_back(std::move(risk));
    }
    ++index;
  }
  return result;
}

}  // namespace stackrev::pipeline
