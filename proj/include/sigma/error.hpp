#pragma once

#include <stdexcept>
#include <string>

namespace sigma {

/// Every failure raised by the library carries a short machine-readable kind
/// ("ShapeMismatch", "DomainError", ...) alongside the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SIGMA_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  };

SIGMA_DEFINE_ERROR(DomainError)
SIGMA_DEFINE_ERROR(ShapeMismatch)
SIGMA_DEFINE_ERROR(NotPositiveDefinite)
SIGMA_DEFINE_ERROR(StrideError)
SIGMA_DEFINE_ERROR(ConfigError)
SIGMA_DEFINE_ERROR(RangeError)
SIGMA_DEFINE_ERROR(GraphError)
SIGMA_DEFINE_ERROR(NonFiniteLoss)
SIGMA_DEFINE_ERROR(DegenerateSeries)
SIGMA_DEFINE_ERROR(LengthMismatch)
SIGMA_DEFINE_ERROR(IoError)

#undef SIGMA_DEFINE_ERROR

}  // namespace sigma
