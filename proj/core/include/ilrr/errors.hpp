#pragma once

#include <stdexcept>
#include <string>

namespace ilrr {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not line up.
class ShapeError : public Error {
  public:
    using Error::Error;
};

// A caller broke a documented precondition.
class ContractError : public Error {
  public:
    using Error::Error;
};

// Invalid user-facing configuration (steering, sampler, experiment).
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Malformed or truncated file contents.
class FormatError : public Error {
  public:
    using Error::Error;
};

// Stored aggregates disagree with the raw records they summarize.
class IntegrityError : public Error {
  public:
    using Error::Error;
};

}  // namespace ilrr
