#pragma once

#include <stdexcept>
#include <string>

namespace dbf {

// Root of every error thrown by the library. Each subclass maps to one failure
// family so callers (and the CLI exit-code contract) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class TokenizerError : public Error { using Error::Error; };
class SequenceLengthError : public Error { using Error::Error; };
class SpecError : public Error { using Error::Error; };
class IngestionError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class DegenerateOutputError : public Error { using Error::Error; };

}  // namespace dbf
