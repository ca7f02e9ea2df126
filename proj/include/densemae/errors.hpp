#pragma once

#include <stdexcept>
#include <string>

namespace densemae {

enum class ErrorCategory {
  kInvalidArgument,
  kShape,
  kParse,
  kIo,
  kConfig,
  kTraining,
};

const char* category_name(ErrorCategory c);

// Process exit code used by the CLI for each category.
int exit_code(ErrorCategory c);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorCategory::kInvalidArgument, what);
}
inline Error shape_error(const std::string& what) { return Error(ErrorCategory::kShape, what); }
inline Error parse_error(const std::string& what) { return Error(ErrorCategory::kParse, what); }
inline Error io_error(const std::string& what) { return Error(ErrorCategory::kIo, what); }
inline Error config_error(const std::string& what) { return Error(ErrorCategory::kConfig, what); }
inline Error training_error(const std::string& what) {
  return Error(ErrorCategory::kTraining, what);
}

}  // namespace densemae
