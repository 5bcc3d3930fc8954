#include "fuselm/error.hpp"

namespace fuselm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::NotEnoughData: return "NotEnoughData";
    case ErrorCode::VocabMismatch: return "VocabMismatch";
    case ErrorCode::RemoteUnavailable: return "RemoteUnavailable";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::CacheMismatch: return "CacheMismatch";
    case ErrorCode::DegenerateRenormalization: return "DegenerateRenormalization";
    case ErrorCode::NoLambda: return "NoLambda";
    case ErrorCode::EmptyCache: return "EmptyCache";
    case ErrorCode::EmptyEval: return "EmptyEval";
    case ErrorCode::UndefinedCorrelation: return "UndefinedCorrelation";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

}  // namespace fuselm
