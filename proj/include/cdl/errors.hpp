#pragma once

#include <stdexcept>
#include <string>

namespace cdl {

enum class Err {
  MissingLabel,
  LengthMismatch,
  BadMagic,
  ShapeMismatch,
  NonFiniteData,
  EmptyBlob,
  OddDimension,
  DimensionMismatch,
  NonScalarLoss,
  DegenerateCorpus,
  MissingFeatures,
  InsufficientVideos,
  EmptyVideo,
  SingleClass,
  NoPositives,
  ConstantInput,
  EmptyInput,
  TooFewClasses,
  TooFewNormals,
  MissingGroundTruth,
  MissingFrameLabels,
  MissingLogs,
  InvalidSpec,
  InvalidConfig,
  IoError,
  BadCheckpoint,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::MissingLabel: return "MissingLabel";
    case Err::LengthMismatch: return "LengthMismatch";
    case Err::BadMagic: return "BadMagic";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::NonFiniteData: return "NonFiniteData";
    case Err::EmptyBlob: return "EmptyBlob";
    case Err::OddDimension: return "OddDimension";
    case Err::DimensionMismatch: return "DimensionMismatch";
    case Err::NonScalarLoss: return "NonScalarLoss";
    case Err::DegenerateCorpus: return "DegenerateCorpus";
    case Err::MissingFeatures: return "MissingFeatures";
    case Err::InsufficientVideos: return "InsufficientVideos";
    case Err::EmptyVideo: return "EmptyVideo";
    case Err::SingleClass: return "SingleClass";
    case Err::NoPositives: return "NoPositives";
    case Err::ConstantInput: return "ConstantInput";
    case Err::EmptyInput: return "EmptyInput";
    case Err::TooFewClasses: return "TooFewClasses";
    case Err::TooFewNormals: return "TooFewNormals";
    case Err::MissingGroundTruth: return "MissingGroundTruth";
    case Err::MissingFrameLabels: return "MissingFrameLabels";
    case Err::MissingLogs: return "MissingLogs";
    case Err::InvalidSpec: return "InvalidSpec";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::IoError: return "IoError";
    case Err::BadCheckpoint: return "BadCheckpoint";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& what)
      : std::runtime_error(std::string(err_name(code)) + ": " + what), code_(code) {}

  Err code() const noexcept { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace cdl
