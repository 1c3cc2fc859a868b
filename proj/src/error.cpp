#include "cast/error.hpp"

namespace cast {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::TooManySegments: return "TooManySegments";
    case ErrorCode::NonNestedLevels: return "NonNestedLevels";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NotScalarLoss: return "NotScalarLoss";
    case ErrorCode::EmptySegmentAtCellResolution: return "EmptySegmentAtCellResolution";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::MNotSmaller: return "MNotSmaller";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptyCluster: return "EmptyCluster";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
  }
  return "Unknown";
}

}  // namespace cast
