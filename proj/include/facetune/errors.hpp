#pragma once

#include <stdexcept>
#include <string>

namespace facetune {

// Broad failure class, used by the CLI to pick an exit code.
enum class ErrorCategory { usage, backend, data };

class Error : public std::runtime_error {
 public:
  Error(const std::string& kind, const std::string& what, ErrorCategory category)
      : std::runtime_error(kind + ": " + what), kind_(kind), category_(category) {}

  const std::string& kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return category_; }

 private:
  std::string kind_;
  ErrorCategory category_;
};

#define FACETUNE_DEFINE_ERROR(Name, Category)                                   \
  class Name : public Error {                                                   \
   public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name, what, Category) {}    \
  };

FACETUNE_DEFINE_ERROR(NormalizationError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(DimensionError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(ShapeError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(NumericsError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(DegenerateLandmarksError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(EmptyDatasetError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(InsufficientClassesError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(UndefinedMetricError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(FormatError, ErrorCategory::data)
FACETUNE_DEFINE_ERROR(BackendLoadError, ErrorCategory::backend)
FACETUNE_DEFINE_ERROR(TemplateError, ErrorCategory::usage)
FACETUNE_DEFINE_ERROR(ScheduleError, ErrorCategory::usage)
FACETUNE_DEFINE_ERROR(ConfigError, ErrorCategory::usage)

#undef FACETUNE_DEFINE_ERROR

}  // namespace facetune
