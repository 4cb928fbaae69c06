#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cuglm {

/// Base of every error the library throws. `kind()` is a stable,
/// machine-readable class name (the CLI prints it on failure).
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CUGLM_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(#Name, what) {}      \
  };

CUGLM_DEFINE_ERROR(LexError)
CUGLM_DEFINE_ERROR(FormatError)
CUGLM_DEFINE_ERROR(TypeOnNonIdentifier)
CUGLM_DEFINE_ERROR(EmptyCorpus)
CUGLM_DEFINE_ERROR(RangeError)
CUGLM_DEFINE_ERROR(FileTooShort)
CUGLM_DEFINE_ERROR(LengthError)
CUGLM_DEFINE_ERROR(NonFinite)
CUGLM_DEFINE_ERROR(VocabMismatch)
CUGLM_DEFINE_ERROR(CheckpointError)
CUGLM_DEFINE_ERROR(ConfigError)
CUGLM_DEFINE_ERROR(IoError)

#undef CUGLM_DEFINE_ERROR

}  // namespace cuglm
