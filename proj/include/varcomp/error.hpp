#pragma once

#include <stdexcept>
#include <string>

namespace varcomp {

enum class ErrorKind {
  InvalidInput,        // malformed input, dimension mismatch, rank-deficient contrast
  DegenerateResponse,  // response lies in the column space of X
  SingularDesign,      // X rank deficient, singular triangular system
  ConfoundedDesign,    // a component adds no new column space
  NonConvergence,
  BootstrapFailure,    // too many bootstrap replicates failed
  Numeric,             // non-finite intermediate
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid input";
    case ErrorKind::DegenerateResponse: return "degenerate response";
    case ErrorKind::SingularDesign: return "singular design";
    case ErrorKind::ConfoundedDesign: return "confounded design";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::BootstrapFailure: return "bootstrap failure";
    case ErrorKind::Numeric: return "numeric error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace varcomp
