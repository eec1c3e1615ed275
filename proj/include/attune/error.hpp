#pragma once

#include <stdexcept>
#include <string>

namespace attune {

enum class ErrorKind {
  Domain,        // argument outside the operation's domain
  Dimension,     // shape mismatch
  Capability,    // request exceeds a desk-scale guard
  Conditioning,  // singular or non-finite linear algebra
  Divergence,    // training or iteration blew up
  Format,        // on-disk file is malformed
  Config,        // invalid run configuration
  Cache,         // retrain cache entry failed verification
  Degenerate,    // quantity undefined for this input (e.g. constant ranks)
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Capability: return "capability";
    case ErrorKind::Conditioning: return "conditioning";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Format: return "format";
    case ErrorKind::Config: return "config";
    case ErrorKind::Cache: return "cache";
    case ErrorKind::Degenerate: return "degenerate";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Sub-codes for file-format failures so callers can tell them apart.
enum class FormatCode { BadMagic, VersionMismatch, LengthMismatch, Malformed };

class FormatError : public Error {
 public:
  FormatError(FormatCode code, const std::string& what) : Error(ErrorKind::Format, what), code_(code) {}
  FormatCode code() const noexcept { return code_; }

 private:
  FormatCode code_;
};

/// Process exit codes used by the command-line front end.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Capability: return 3;
    case ErrorKind::Conditioning:
    case ErrorKind::Divergence:
    case ErrorKind::Degenerate: return 4;
    default: return 1;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace attune
