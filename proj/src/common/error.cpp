#include "roadforge/common/error.hpp"

namespace roadforge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotScalarLoss: return "NotScalarLoss";
    case ErrorCode::FrontierOverflow: return "FrontierOverflow";
    case ErrorCode::EmptyTile: return "EmptyTile";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NoEdges: return "NoEdges";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::Parse: return "Parse";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace roadforge
