// Copyright 2026 The RobustPrompt3D Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rpd {

enum class ErrorCode {
  // diffmath
  DegenerateNorm,
  LabelOutOfRange,
  EmptySet,
  NonFiniteEvaluation,
  ShapeMismatch,
  // geometry
  DegenerateCloud,
  CountOutOfRange,
  EmptyCloud,
  KTooLarge,
  UnknownClass,
  ParseError,
  // projection
  UnnormalizedInput,
  // encoders
  ArchitectureMismatch,
  UnknownToken,
  NonConvergence,
  // losses
  NonUnitInput,
  KOutOfRange,
  RowCountMismatch,
  NonFiniteLoss,
  // attacks / defenses
  NonDifferentiableModel,
  DropTooLarge,
  InvalidArgument,
  // pipeline
  StepOutOfRange,
  FrozenViolation,
  ArchiveMismatch,
  VersionMismatch,
  CorruptCheckpoint,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateNorm: return "DegenerateNorm";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::NonFiniteEvaluation: return "NonFiniteEvaluation";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DegenerateCloud: return "DegenerateCloud";
    case ErrorCode::CountOutOfRange: return "CountOutOfRange";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnnormalizedInput: return "UnnormalizedInput";
    case ErrorCode::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::NonUnitInput: return "NonUnitInput";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::RowCountMismatch: return "RowCountMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonDifferentiableModel: return "NonDifferentiableModel";
    case ErrorCode::DropTooLarge: return "DropTooLarge";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::FrozenViolation: return "FrozenViolation";
    case ErrorCode::ArchiveMismatch: return "ArchiveMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace rpd
