// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module. The CLI maps each category onto
// a stable exit code (see cli.hpp).

#ifndef MERGEBENCH_ERRORS_HPP
#define MERGEBENCH_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mergebench {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent container / manifest contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Tensors that should line up (same names, same shapes) do not.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid recipe, config, or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A method was asked to run without an input it needs (base model, statistics).
class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mergebench

#endif  // MERGEBENCH_ERRORS_HPP
