// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace biomamba {

// Root of every error thrown by the library. The CLI maps subclasses onto
// process exit codes, so keep the hierarchy shallow and distinct.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside a function's mathematical domain (e.g. log of x <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied data (empty corpus, out-of-range token id, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Structurally malformed document; the message names the offending path.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed document whose contents break an invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Checkpoint load failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnknownTensorError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace biomamba
