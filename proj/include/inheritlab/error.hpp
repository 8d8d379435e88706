#pragma once

#include <stdexcept>
#include <string>

namespace ilab {

// Error categories. The C API maps each onto a stable status code.
enum class ErrorCode {
  kInvalidArgument = 1,  // contract violation by the caller
  kConfig,               // configuration validation
  kIo,
  kIngest,               // malformed or inconsistent input data
  kNumerical,            // singular systems, non-finite values
  kTraining,             // divergence during optimisation
  kProtocol,             // malformed remote response or HTTP 4xx
  kTransient,            // timeouts and connection failures
  kUndefined,            // undefined statistic (zero variance, zero mass)
  kInternal,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::kInvalidArgument, what);
}

}  // namespace ilab
