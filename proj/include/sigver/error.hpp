#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sigver {

enum class Errc {
  ConstantImage,
  EmptyForeground,
  DoesNotFit,
  ShapeMismatch,
  NonFinite,
  BatchTooSmall,
  LabelOutOfRange,
  UnknownFamily,
  ShapeUnderflow,
  NoSuchLayer,
  InsufficientSamples,
  NoConvergence,
  DimensionMismatch,
  EmptyScores,
  TooFewUsers,
  MalformedTree,
  DuplicateUser,
  ModelMismatch,
  MissingArtifact,
  InvalidArgument,
  Io,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::ConstantImage: return "ConstantImage";
    case Errc::EmptyForeground: return "EmptyForeground";
    case Errc::DoesNotFit: return "DoesNotFit";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFinite: return "NonFinite";
    case Errc::BatchTooSmall: return "BatchTooSmall";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::UnknownFamily: return "UnknownFamily";
    case Errc::ShapeUnderflow: return "ShapeUnderflow";
    case Errc::NoSuchLayer: return "NoSuchLayer";
    case Errc::InsufficientSamples: return "InsufficientSamples";
    case Errc::NoConvergence: return "NoConvergence";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyScores: return "EmptyScores";
    case Errc::TooFewUsers: return "TooFewUsers";
    case Errc::MalformedTree: return "MalformedTree";
    case Errc::DuplicateUser: return "DuplicateUser";
    case Errc::ModelMismatch: return "ModelMismatch";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace sigver
