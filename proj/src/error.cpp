#include "argd/error.hpp"

namespace argd {

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kIngestion: return "ingestion";
    case ErrorCategory::kInput: return "input";
    case ErrorCategory::kNumerical: return "numerical";
    case ErrorCategory::kTraining: return "training";
    case ErrorCategory::kEvaluation: return "evaluation";
    case ErrorCategory::kState: return "state";
    case ErrorCategory::kIntegrity: return "integrity";
    case ErrorCategory::kLoad: return "load";
    case ErrorCategory::kIo: return "io";
  }
  return "unknown";
}

int exit_code(ErrorCategory c) { return 2 + static_cast<int>(c); }

}  // namespace argd
