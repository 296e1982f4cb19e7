#include "stackrev/llm_gateway.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace stackrev::llm {

using nlohmann::json;

std::int64_t token_count(const std::string& text) {
  return static_cast<std::int64_t>((text.size() + 3) / 4);
}

void TokenLedger::record(const std::string& tag, std::int64_t prompt,
                         std::int64_t completion) {
  std::lock_guard lock(mu_);
  auto& usage = per_tag_[tag];
  usage.prompt_tokens += prompt;
  usage.completion_tokens += completion;
}

TokenLedger::Usage TokenLedger::by_tag(const std::string& tag) const {
  std::lock_guard lock(mu_);
  auto it = per_tag_.find(tag);
  return it == per_tag_.end() ? Usage{} : it->second;
}

std::map<std::string, TokenLedger::Usage> TokenLedger::snapshot() const {
  std::lock_guard lock(mu_);
  return per_tag_;
}

std::int64_t TokenLedger::grand_total() const {
  std::lock_guard lock(mu_);
  std::int64_t total = 0;
  for (const auto& [tag, usage] : per_tag_) total += usage.total();
  return total;
}

ScriptedBackend::ScriptedBackend(std::vector<Entry> entries) {
  entries_.reserve(entries.size());
  for (auto& e : entries) {
    Compiled c;
    c.pattern = e.pattern;
    try {
      c.regex = std::regex(e.pattern);
    } catch (const std::regex_error& err) {
      throw Error(Errc::ConfigError,
                  "bad script regex \"" + e.pattern + "\": " + err.what());
    }
    c.response = std::move(e.response);
    entries_.push_back(std::move(c));
  }
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigError, "cannot open script file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError,
                "script file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_json(const json& doc) {
  if (!doc.is_array())
    throw Error(Errc::ConfigError, "script must be a JSON array");
  std::vector<Entry> entries;
  for (const auto& item : doc) {
    if (!item.is_object() || !item.contains("match") ||
        !item.contains("response"))
      throw Error(Errc::ConfigError,
                  "script entries need \"match\" and \"response\"");
    entries.push_back(Entry{item["match"].get<std::string>(),
                            item["response"].get<std::string>()});
  }
  return std::make_unique<ScriptedBackend>(std::move(entries));
}

ChatResponse ScriptedBackend::complete_raw(const ChatRequest& req) {
  std::lock_guard lock(mu_);
  for (auto& entry : entries_) {
    if (entry.consumed) continue;
    if (!std::regex_search(req.user, entry.regex)) continue;
    entry.consumed = true;
    ChatResponse resp;
    resp.text = entry.response;
    resp.prompt_tokens = token_count(req.system) + token_count(req.user);
    resp.completion_tokens = token_count(resp.text);
    resp.truncated = resp.completion_tokens >= req.max_tokens;
    return resp;
  }
  throw Error(Errc::ScriptExhausted,
              "no unconsumed script entry matches request tagged \"" +
                  req.tag + "\"");
}

std::size_t ScriptedBackend::remaining() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!e.consumed) ++n;
  return n;
}

HttpBackend::HttpBackend(Options opts) : opts_(std::move(opts)) {
  std::string url = opts_.endpoint;
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0)
    throw Error(Errc::ConfigError,
                "http backend endpoint must start with http:// (local "
                "inference servers); got " +
                    url);
  url = url.substr(scheme.size());
  const auto slash = url.find('/');
  std::string hostport = slash == std::string::npos ? url : url.substr(0, slash);
  path_ = slash == std::string::npos ? "/v1/chat/completions"
                                     : url.substr(slash);
  const auto colon = hostport.find(':');
  if (colon == std::string::npos) {
    host_ = hostport;
    port_ = 80;
  } else {
    host_ = hostport.substr(0, colon);
    try {
      port_ = std::stoi(hostport.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(Errc::ConfigError,
                  "bad port in endpoint " + opts_.endpoint);
    }
  }
  if (host_.empty())
    throw Error(Errc::ConfigError, "http backend endpoint has no host");
}

ChatResponse HttpBackend::complete_raw(const ChatRequest& req) {
  json body = {
      {"model", opts_.model},
      {"messages",
       json::array({json{{"role", "system"}, {"content", req.system}},
                    json{{"role", "user"}, {"content", req.user}}})},
      {"temperature", req.temperature},
      {"max_tokens", req.max_tokens},
  };

  httplib::Headers headers;
  if (!opts_.api_key_env.empty()) {
    if (const char* key = std::getenv(opts_.api_key_env.c_str()))
      headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::string last_error = "no attempts made";
  for (int attempt = 0; attempt < opts_.max_attempts; ++attempt) {
    if (attempt > 0) {
      const auto delay = std::chrono::milliseconds(
          static_cast<long long>(opts_.backoff_base_ms) << (attempt - 1));
      std::this_thread::sleep_for(delay);
    }
    httplib::Client client(host_, port_);
    client.set_connection_timeout(opts_.timeout_sec);
    client.set_read_timeout(opts_.timeout_sec);
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw Error(Errc::BackendUnavailable,
                  "chat endpoint returned status " +
                      std::to_string(res->status) + ": " + res->body);

    json doc;
    try {
      doc = json::parse(res->body);
    } catch (const json::exception& e) {
      throw Error(Errc::BackendUnavailable,
                  std::string("unparseable chat response: ") + e.what());
    }
    if (!doc.contains("choices") || !doc["choices"].is_array() ||
        doc["choices"].empty())
      throw Error(Errc::BackendUnavailable, "chat response has no choices");

    const auto& choice = doc["choices"][0];
    ChatResponse out;
    out.text = choice.value("message", json::object()).value("content", "");
    out.truncated = choice.value("finish_reason", "") == "length";
    const auto usage = doc.value("usage", json::object());
    out.prompt_tokens = usage.value("prompt_tokens",
                                    token_count(req.system) +
                                        token_count(req.user));
    out.completion_tokens =
        usage.value("completion_tokens", token_count(out.text));
    return out;
  }
  throw Error(Errc::BackendUnavailable,
              "chat endpoint unreachable after " +
                  std::to_string(opts_.max_attempts) + " attempts (" +
                  last_error + ")");
}

ChatResponse complete(ChatBackend& backend, const ChatRequest& req,
                      TokenLedger& ledger) {
  if (req.system.empty() || req.user.empty())
    throw Error(Errc::InvalidArgument, "chat request needs system and user");
  if (req.max_tokens < 1)
    throw Error(Errc::InvalidArgument, "max_tokens must be >= 1");
  ChatResponse resp = backend.complete_raw(req);
  ledger.record(req.tag.empty() ? "untagged" : req.tag, resp.prompt_tokens,
                resp.completion_tokens);
  return resp;
}

json extract_json(const std::string& text) {
  const auto start = text.find_first_of("{[");
  if (start == std::string::npos)
    throw Error(Errc::NoJsonFound, "no JSON object or array in text");

  bool in_string = false;
  bool escaped = false;
  int depth = 0;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{' || c == '[') {
      ++depth;
    } else if (c == '}' || c == ']') {
      --depth;
      if (depth == 0) {
        const std::string candidate = text.substr(start, i - start + 1);
        try {
          return json::parse(candidate);
        } catch (const json::parse_error& e) {
          throw Error(Errc::MalformedJson,
                      "JSON candidate at byte " + std::to_string(start) +
                          " fails to parse: " + e.what());
        }
      }
    }
  }
  throw Error(Errc::MalformedJson,
              "unbalanced JSON starting at byte " + std::to_string(start));
}

namespace detail {
const std::map<std::string, std::string>& builtin_templates();
}

namespace {

struct ParsedTemplate {
  std::string system;  // empty for user-only fragments
  std::string user;
  bool has_system = false;
};

std::string after_marker_line(const std::string& text, std::size_t pos) {
  auto eol = text.find('\n', pos);
  return eol == std::string::npos ? "" : std::string(text, eol + 1);
}

ParsedTemplate parse_template(const std::string& raw) {
  ParsedTemplate out;
  const std::string sys_marker = "[[SYSTEM]]";
  const std::string user_marker = "[[USER]]";
  const auto sys_pos = raw.find(sys_marker);
  const auto user_pos = raw.find(user_marker);
  if (sys_pos == std::string::npos) {
    out.user = raw;
    return out;
  }
  if (user_pos == std::string::npos || user_pos < sys_pos)
    throw Error(Errc::ConfigError, "template has [[SYSTEM]] but no [[USER]]");
  out.has_system = true;
  std::string sys_part = raw.substr(0, user_pos);
  sys_part = after_marker_line(sys_part, sys_pos);
  while (!sys_part.empty() && (sys_part.back() == '\n' || sys_part.back() == '\r'))
    sys_part.pop_back();
  out.system = sys_part;
  out.user = after_marker_line(raw, user_pos);
  return out;
}

bool is_placeholder_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

/// Single pass: placeholders exist only in the template text, so values that
/// themselves contain braces can never be re-expanded.
std::string substitute(const std::string& text, const PromptContext& ctx) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c != '{') {
      out.push_back(c);
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (j < text.size() && text[j] >= 'A' && text[j] <= 'Z') {
      while (j < text.size() && is_placeholder_char(text[j])) ++j;
      if (j < text.size() && text[j] == '}') {
        const std::string name = text.substr(i + 1, j - i - 1);
        const auto it = ctx.find(name);
        if (it == ctx.end())
          throw Error(Errc::MissingPlaceholder,
                      "context does not supply {" + name + "}");
        out += it->second;
        i = j + 1;
        continue;
      }
    }
    out.push_back(c);
    ++i;
  }
  return out;
}

const ParsedTemplate& lookup(const std::string& id) {
  static const auto* cache = [] {
    auto* m = new std::map<std::string, ParsedTemplate>;
    for (const auto& [id, raw] : detail::builtin_templates())
      m->emplace(id, parse_template(raw));
    return m;
  }();
  const auto it = cache->find(id);
  if (it == cache->end())
    throw Error(Errc::UnknownTemplate, "no template named \"" + id + "\"");
  return it->second;
}

}  // namespace

PromptParts render_prompt(const std::string& template_id,
                          const PromptContext& context) {
  const auto& tmpl = lookup(template_id);
  if (!tmpl.has_system)
    throw Error(Errc::UnknownTemplate,
                "\"" + template_id + "\" is a fragment, not a full prompt");
  PromptParts parts;
  parts.system = substitute(tmpl.system, context);
  parts.user = substitute(tmpl.user, context);
  return parts;
}

std::string render_fragment(const std::string& template_id,
                            const PromptContext& context) {
  const auto& tmpl = lookup(template_id);
  return substitute(tmpl.user, context);
}

std::vector<std::string> template_ids() {
  std::vector<std::string> ids;
  for (const auto& [id, raw] : detail::builtin_templates()) ids.push_back(id);
  return ids;
}

const std::string& template_source(const std::string& template_id) {
  const auto& all = detail::builtin_templates();
  const auto it = all.find(template_id);
  if (it == all.end())
    throw Error(Errc::UnknownTemplate,
                "no template named \"" + template_id + "\"");
  return it->second;
}

}  // namespace stackrev::llm
