#pragma once

#include <stdexcept>
#include <string>

namespace stackrev {

enum class Errc {
  EmptyRiskSet,
  InvalidTemperature,
  ArityMismatch,
  NoJsonFound,
  MalformedJson,
  SchemaViolation,
  EvidenceNotInContract,
  BackendUnavailable,
  ScriptExhausted,
  MissingPlaceholder,
  UnknownTemplate,
  UnknownRiskId,
  EmptyRevision,
  Diverged,
  MissingNullHint,
  EmptyDocument,
  ZeroTokens,
  InvalidCounts,
  OutOfRange,
  ConfigError,
  InvalidArgument,
};

const char* errc_name(Errc code);

/// Library-wide exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace stackrev
