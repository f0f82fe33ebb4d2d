#include "smvit/error.hpp"

namespace smvit {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::Tiling: return "TilingError";
    case ErrorKind::Rank: return "RankError";
    case ErrorKind::Label: return "LabelError";
    case ErrorKind::Numeric: return "NumericError";
    case ErrorKind::DegenerateBatch: return "DegenerateBatchError";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::Protocol: return "ProtocolError";
    case ErrorKind::InsufficientPairs: return "InsufficientPairsError";
    case ErrorKind::MissingFactor: return "MissingFactorError";
    case ErrorKind::Layout: return "LayoutError";
    case ErrorKind::EmptyDataset: return "EmptyDatasetError";
    case ErrorKind::BlankFrame: return "BlankFrameError";
    case ErrorKind::DegenerateStratum: return "DegenerateStratumError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Load: return "LoadError";
    case ErrorKind::Comparison: return "ComparisonError";
  }
  return "Error";
}

ErrorCategory error_category(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Comparison:
      return ErrorCategory::Config;
    case ErrorKind::Numeric:
      return ErrorCategory::Numeric;
    case ErrorKind::Io:
    case ErrorKind::Load:
      return ErrorCategory::Io;
    default:
      return ErrorCategory::Data;
  }
}

}  // namespace smvit
