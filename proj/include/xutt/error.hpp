#pragma once

#include <stdexcept>
#include <string>

namespace xutt {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A softmax row with no finite entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Raised when a search cannot produce any result (no surviving beam,
/// every tuning trial failed).
class SearchError : public Error {
 public:
  using Error::Error;
};

// CLI exit codes: 2 for bad input or files, 3 for search/decode failures.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const SchemaError*>(&e) || dynamic_cast<const VocabError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const SearchError*>(&e) || dynamic_cast<const StateError*>(&e) ||
      dynamic_cast<const DegenerateRowError*>(&e)) {
    return 3;
  }
  return 1;
}

}  // namespace xutt
