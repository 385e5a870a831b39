// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace maskcycle {

// Base for every error the library raises on purpose. The CLI maps the
// validation family (parameter / input / format) to exit code 1 and
// everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

inline bool is_validation_error(const std::exception& e) {
  return dynamic_cast<const ParameterError*>(&e) != nullptr || dynamic_cast<const InputError*>(&e) != nullptr ||
         dynamic_cast<const FormatError*>(&e) != nullptr;
}

}  // namespace maskcycle
