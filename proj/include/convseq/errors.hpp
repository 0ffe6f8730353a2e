#pragma once

#include <stdexcept>
#include <string>

namespace convseq {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
  public:
    using Error::Error;
};

// Invalid model, layer or run configuration.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// NaN or otherwise unusable numeric input.
class NumericError : public Error {
  public:
    using Error::Error;
};

// Token id outside the model vocabulary.
class VocabError : public Error {
  public:
    using Error::Error;
};

// Violated call precondition (non-scalar loss, empty input, ...).
class ContractError : public Error {
  public:
    using Error::Error;
};

// Malformed checkpoint, dataset or config file.
class FormatError : public Error {
  public:
    using Error::Error;
};

} // namespace convseq
