#include "densemae/errors.hpp"

namespace densemae {

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kInvalidArgument: return "invalid-argument";
    case ErrorCategory::kShape: return "shape";
    case ErrorCategory::kParse: return "parse";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kTraining: return "training";
  }
  return "unknown";
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kInvalidArgument: return 2;
    case ErrorCategory::kConfig: return 2;
    case ErrorCategory::kShape: return 3;
    case ErrorCategory::kParse: return 4;
    case ErrorCategory::kIo: return 5;
    case ErrorCategory::kTraining: return 6;
  }
  return 1;
}

}  // namespace densemae
