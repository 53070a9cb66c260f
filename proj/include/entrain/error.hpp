#ifndef ENTRAIN_ERROR_HPP_
#define ENTRAIN_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace entrain {

enum class ErrorCode {
  // relation_store
  MissingField,
  DuplicateTriple,
  BadTemplate,
  TooFewTriples,
  // prompt_factory
  TokenCollision,
  OverlapViolation,
  EmptyTokenization,
  PreconditionViolation,
  // lm_backend
  ShapeMismatch,
  EmptyPrompt,
  NonDifferentiableLoss,
  SpecOutOfBounds,
  ModelLoad,
  // entrainment_metrics
  TokenOutOfVocab,
  DivisionByZeroProb,
  TooFewPairs,
  ZeroVariance,
  MixedKeys,
  // mask_discovery
  BadUniform,
  MissingTrackedRole,
  NoGradientBackend,
  DegenerateTraining,
  // ablation_bench
  HeadOutOfRange,
  EmptyInstanceSet,
  InsufficientPairs,
  // cli
  ConfigInvalid,
  MissingDependencyArtifact,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingField: return "MissingField";
    case ErrorCode::DuplicateTriple: return "DuplicateTriple";
    case ErrorCode::BadTemplate: return "BadTemplate";
    case ErrorCode::TooFewTriples: return "TooFewTriples";
    case ErrorCode::TokenCollision: return "TokenCollision";
    case ErrorCode::OverlapViolation: return "OverlapViolation";
    case ErrorCode::EmptyTokenization: return "EmptyTokenization";
    case ErrorCode::PreconditionViolation: return "PreconditionViolation";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyPrompt: return "EmptyPrompt";
    case ErrorCode::NonDifferentiableLoss: return "NonDifferentiableLoss";
    case ErrorCode::SpecOutOfBounds: return "SpecOutOfBounds";
    case ErrorCode::ModelLoad: return "ModelLoad";
    case ErrorCode::TokenOutOfVocab: return "TokenOutOfVocab";
    case ErrorCode::DivisionByZeroProb: return "DivisionByZeroProb";
    case ErrorCode::TooFewPairs: return "TooFewPairs";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::MixedKeys: return "MixedKeys";
    case ErrorCode::BadUniform: return "BadUniform";
    case ErrorCode::MissingTrackedRole: return "MissingTrackedRole";
    case ErrorCode::NoGradientBackend: return "NoGradientBackend";
    case ErrorCode::DegenerateTraining: return "DegenerateTraining";
    case ErrorCode::HeadOutOfRange: return "HeadOutOfRange";
    case ErrorCode::EmptyInstanceSet: return "EmptyInstanceSet";
    case ErrorCode::InsufficientPairs: return "InsufficientPairs";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::MissingDependencyArtifact: return "MissingDependencyArtifact";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the toolkit carries one of the codes above so
/// callers can branch on the failure kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace entrain

#endif  // ENTRAIN_ERROR_HPP_
