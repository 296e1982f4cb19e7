#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "stackrev/errors.hpp"

#include <nlohmann/json.hpp>

namespace stackrev::llm {

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 0.0;
  std::int64_t max_tokens = 1024;
  std::string tag;  // which agent/stage issued the request
};

struct ChatResponse {
  std::string text;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  bool truncated = false;  // completion hit max_tokens
};

/// Deterministic byte-count token approximation: ceil(bytes / 4).
std::int64_t token_count(const std::string& text);

/// Per-tag cumulative usage. Updates are serialized internally.
class TokenLedger {
 public:
  struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    std::int64_t total() const { return prompt_tokens + completion_tokens; }
  };

  void record(const std::string& tag, std::int64_t prompt,
              std::int64_t completion);
  Usage by_tag(const std::string& tag) const;
  std::map<std::string, Usage> snapshot() const;
  std::int64_t grand_total() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, Usage> per_tag_;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResponse complete_raw(const ChatRequest& req) = 0;
};

/// Ordered script of (regex-on-user-text -> canned response) entries; each
/// request consumes the first unconsumed entry whose pattern matches. Fully
/// deterministic given the same request sequence. Ordered scripts are not
/// meant to be shared across concurrent games.
class ScriptedBackend : public ChatBackend {
 public:
  struct Entry {
    std::string pattern;
    std::string response;
  };

  explicit ScriptedBackend(std::vector<Entry> entries);
  ScriptedBackend(std::initializer_list<Entry> entries)
      : ScriptedBackend(std::vector<Entry>(entries)) {}

  /// Loads a JSON array of {"match": regex, "response": text}.
  static std::unique_ptr<ScriptedBackend> from_file(const std::string& path);
  static std::unique_ptr<ScriptedBackend> from_json(const nlohmann::json& doc);
  static std::unique_ptr<ScriptedBackend> from_entries(
      std::vector<Entry> entries) {
    return std::make_unique<ScriptedBackend>(std::move(entries));
  }

  ChatResponse complete_raw(const ChatRequest& req) override;

  std::size_t remaining() const;

 private:
  struct Compiled {
    std::string pattern;
    std::regex regex;
    std::string response;
    bool consumed = false;
  };
  mutable std::mutex mu_;
  std::vector<Compiled> entries_;
};

/// OpenAI-compatible chat-completions client (plain HTTP; aimed at local
/// inference servers). Transient failures are retried with exponential
/// backoff before surfacing BackendUnavailable.
class HttpBackend : public ChatBackend {
 public:
  struct Options {
    std::string endpoint;  // e.g. http://127.0.0.1:8000/v1/chat/completions
    std::string model;
    std::string api_key_env;  // name of the env var holding the credential
    int max_attempts = 3;
    int backoff_base_ms = 1000;  // 1s, 2s, 4s...
    int timeout_sec = 60;
  };

  explicit HttpBackend(Options opts);

  ChatResponse complete_raw(const ChatRequest& req) override;

 private:
  Options opts_;
  std::string host_;
  int port_ = 80;
  std::string path_;
};

/// Completes a request against a backend and records usage in the ledger.
ChatResponse complete(ChatBackend& backend, const ChatRequest& req,
                      TokenLedger& ledger);

/// Strips markdown code fences and returns the first balanced top-level JSON
/// object or array, parsed strictly.
nlohmann::json extract_json(const std::string& text);

using PromptContext = std::map<std::string, std::string>;

struct PromptParts {
  std::string system;
  std::string user;
};

/// Renders a named prompt template, substituting every {ALL_CAPS} placeholder
/// from the context. Unknown ids and missing context keys are errors; the
/// rendered text is guaranteed placeholder-free.
PromptParts render_prompt(const std::string& template_id,
                          const PromptContext& context);

/// Renders a user-only template fragment (building block for composite
/// prompts).
std::string render_fragment(const std::string& template_id,
                            const PromptContext& context);

/// Ids of all registered templates.
std::vector<std::string> template_ids();

/// Raw (unrendered) template text, as shipped under assets/prompts/.
const std::string& template_source(const std::string& template_id);

}  // namespace stackrev::llm
