#include "stackrev/errors.hpp"

namespace stackrev {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::EmptyRiskSet: return "EmptyRiskSet";
    case Errc::InvalidTemperature: return "InvalidTemperature";
    case Errc::ArityMismatch: return "ArityMismatch";
    case Errc::NoJsonFound: return "NoJsonFound";
    case Errc::MalformedJson: return "MalformedJson";
    case Errc::SchemaViolation: return "SchemaViolation";
    case Errc::EvidenceNotInContract: return "EvidenceNotInContract";
    case Errc::BackendUnavailable: return "BackendUnavailable";
    case Errc::ScriptExhausted: return "ScriptExhausted";
    case Errc::MissingPlaceholder: return "MissingPlaceholder";
    case Errc::UnknownTemplate: return "UnknownTemplate";
    case Errc::UnknownRiskId: return "UnknownRiskId";
    case Errc::EmptyRevision: return "EmptyRevision";
    case Errc::Diverged: return "Diverged";
    case Errc::MissingNullHint: return "MissingNullHint";
    case Errc::EmptyDocument: return "EmptyDocument";
    case Errc::ZeroTokens: return "ZeroTokens";
    case Errc::InvalidCounts: return "InvalidCounts";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::ConfigError: return "ConfigError";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "UnknownError";
}

}  // namespace stackrev
