#pragma once

#include <stdexcept>
#include <string>

namespace coverlab {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define COVERLAB_DEFINE_ERROR(Name) \
  class Name : public Error {       \
   public:                          \
    using Error::Error;             \
  }

// ds-core
COVERLAB_DEFINE_ERROR(DegenerateTable);
COVERLAB_DEFINE_ERROR(InvalidMargins);
COVERLAB_DEFINE_ERROR(DomainError);

// estimators
COVERLAB_DEFINE_ERROR(DegenerateInputs);
COVERLAB_DEFINE_ERROR(MissingField);
COVERLAB_DEFINE_ERROR(InvalidEstimates);

// sampling
COVERLAB_DEFINE_ERROR(DesignError);
COVERLAB_DEFINE_ERROR(EmptyCell);

// popsim
COVERLAB_DEFINE_ERROR(ConfigError);

// matching
COVERLAB_DEFINE_ERROR(DuplicateKey);
COVERLAB_DEFINE_ERROR(UnresolvedCode);
COVERLAB_DEFINE_ERROR(MissingWeight);

// harness / io
COVERLAB_DEFINE_ERROR(ValidationError);

#undef COVERLAB_DEFINE_ERROR

// Malformed delimited input. Carries the 1-based row and the column name.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& file, std::size_t row, const std::string& column,
              const std::string& what)
      : Error(file + ":" + std::to_string(row) + ": column '" + column + "': " + what),
        row_(row),
        column_(column) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

}  // namespace coverlab
