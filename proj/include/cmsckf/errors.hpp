#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cmsckf {

enum class Errc {
  kWindowFull,
  kUnknownClone,
  kTooSoon,
  kStaleAccumulator,
  kNonPositiveDt,
  kDimensionMismatch,
  kInsufficientObservations,
  kLowParallax,
  kDiverged,
  kBehindCamera,
  kUnknownFrameRef,
  kRankDeficientFeature,
  kSingularInnovation,
  kNonLocalBlock,
  kGlobalKeyframeTouched,
  kInvalidSpec,
  kConfigError,
  kSingularMarginal,
  kMismatchedScenarios,
  kIoError,
};

constexpr std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::kWindowFull: return "WindowFull";
    case Errc::kUnknownClone: return "UnknownClone";
    case Errc::kTooSoon: return "TooSoon";
    case Errc::kStaleAccumulator: return "StaleAccumulator";
    case Errc::kNonPositiveDt: return "NonPositiveDt";
    case Errc::kDimensionMismatch: return "DimensionMismatch";
    case Errc::kInsufficientObservations: return "InsufficientObservations";
    case Errc::kLowParallax: return "LowParallax";
    case Errc::kDiverged: return "Diverged";
    case Errc::kBehindCamera: return "BehindCamera";
    case Errc::kUnknownFrameRef: return "UnknownFrameRef";
    case Errc::kRankDeficientFeature: return "RankDeficientFeature";
    case Errc::kSingularInnovation: return "SingularInnovation";
    case Errc::kNonLocalBlock: return "NonLocalBlock";
    case Errc::kGlobalKeyframeTouched: return "GlobalKeyframeTouched";
    case Errc::kInvalidSpec: return "InvalidSpec";
    case Errc::kConfigError: return "ConfigError";
    case Errc::kSingularMarginal: return "SingularMarginal";
    case Errc::kMismatchedScenarios: return "MismatchedScenarios";
    case Errc::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Base of every error raised by the library. `name()` is the stable error
/// class name printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }
  std::string_view name() const noexcept { return errc_name(code_); }

 private:
  Errc code_;
};

template <Errc C>
class ErrorOf : public Error {
 public:
  explicit ErrorOf(const std::string& what) : Error(C, what) {}
};

using WindowFull = ErrorOf<Errc::kWindowFull>;
using UnknownClone = ErrorOf<Errc::kUnknownClone>;
using TooSoon = ErrorOf<Errc::kTooSoon>;
using StaleAccumulator = ErrorOf<Errc::kStaleAccumulator>;
using NonPositiveDt = ErrorOf<Errc::kNonPositiveDt>;
using DimensionMismatch = ErrorOf<Errc::kDimensionMismatch>;
using InsufficientObservations = ErrorOf<Errc::kInsufficientObservations>;
using LowParallax = ErrorOf<Errc::kLowParallax>;
using Diverged = ErrorOf<Errc::kDiverged>;
using BehindCamera = ErrorOf<Errc::kBehindCamera>;
using UnknownFrameRef = ErrorOf<Errc::kUnknownFrameRef>;
using RankDeficientFeature = ErrorOf<Errc::kRankDeficientFeature>;
using SingularInnovation = ErrorOf<Errc::kSingularInnovation>;
using NonLocalBlock = ErrorOf<Errc::kNonLocalBlock>;
using GlobalKeyframeTouched = ErrorOf<Errc::kGlobalKeyframeTouched>;
using InvalidSpec = ErrorOf<Errc::kInvalidSpec>;
using ConfigError = ErrorOf<Errc::kConfigError>;
using SingularMarginal = ErrorOf<Errc::kSingularMarginal>;
using MismatchedScenarios = ErrorOf<Errc::kMismatchedScenarios>;
using IoError = ErrorOf<Errc::kIoError>;

}  // namespace cmsckf
