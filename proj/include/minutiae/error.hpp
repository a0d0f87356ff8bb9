#ifndef MINUTIAE_ERROR_HPP_
#define MINUTIAE_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace minutiae {

/// Raised when a caller breaks an operation's precondition (shape or
/// geometry mismatch, mixed angle periods, empty training input, ...).
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

inline void require(bool condition, const char* message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace minutiae

#endif  // MINUTIAE_ERROR_HPP_
