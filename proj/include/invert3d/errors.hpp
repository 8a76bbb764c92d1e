#pragma once

#include <stdexcept>
#include <string>

namespace invert3d {

enum class ErrorKind {
  configuration,     // invalid parameters or inconsistent shapes
  usage,             // operation called in the wrong mode
  missing_artifact,  // referenced file or run directory does not exist
  schema,            // file exists but does not parse or validate
  numerical,         // NaN / Inf encountered during optimisation
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::usage: return "usage";
    case ErrorKind::missing_artifact: return "missing_artifact";
    case ErrorKind::schema: return "schema";
    case ErrorKind::numerical: return "numerical";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  [[nodiscard]] ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace invert3d
