#include "inheritlab/error.hpp"

namespace ilab {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kIngest: return "ingest";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kTraining: return "training";
    case ErrorCode::kProtocol: return "protocol";
    case ErrorCode::kTransient: return "transient";
    case ErrorCode::kUndefined: return "undefined";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

}  // namespace ilab
