#pragma once

#include <stdexcept>
#include <string>

namespace argd {

/// Error categories surfaced by the library. The CLI maps each to an exit code.
enum class ErrorCategory {
  kConfig,
  kIngestion,
  kInput,
  kNumerical,
  kTraining,
  kEvaluation,
  kState,
  kIntegrity,
  kLoad,
  kIo,
};

const char* category_name(ErrorCategory c);

/// Process exit code for an error category: config 2, then 3 upwards in
/// declaration order. 1 is reserved for unexpected failures.
int exit_code(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

#define ARGD_DEFINE_ERROR(Name, Cat)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Cat, what) {}      \
  };

ARGD_DEFINE_ERROR(ConfigError, ErrorCategory::kConfig)
ARGD_DEFINE_ERROR(IngestionError, ErrorCategory::kIngestion)
ARGD_DEFINE_ERROR(InputError, ErrorCategory::kInput)
ARGD_DEFINE_ERROR(NumericalError, ErrorCategory::kNumerical)
ARGD_DEFINE_ERROR(TrainingError, ErrorCategory::kTraining)
ARGD_DEFINE_ERROR(EvaluationError, ErrorCategory::kEvaluation)
ARGD_DEFINE_ERROR(StateError, ErrorCategory::kState)
ARGD_DEFINE_ERROR(IntegrityError, ErrorCategory::kIntegrity)
ARGD_DEFINE_ERROR(LoadError, ErrorCategory::kLoad)
ARGD_DEFINE_ERROR(IoError, ErrorCategory::kIo)

#undef ARGD_DEFINE_ERROR

}  // namespace argd
