#pragma once

#include <stdexcept>
#include <string>

namespace condist {

// Base of every error raised by the library. `kind()` is the stable,
// machine-readable class name printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CONDIST_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}   \
  };

CONDIST_DEFINE_ERROR(ParameterError)
CONDIST_DEFINE_ERROR(InputError)
CONDIST_DEFINE_ERROR(NumericalGuardError)
CONDIST_DEFINE_ERROR(EvaluationError)
CONDIST_DEFINE_ERROR(StateError)
CONDIST_DEFINE_ERROR(GenerationError)
CONDIST_DEFINE_ERROR(FormatError)
CONDIST_DEFINE_ERROR(ConfigError)
CONDIST_DEFINE_ERROR(ClientFailure)

#undef CONDIST_DEFINE_ERROR

}  // namespace condist
