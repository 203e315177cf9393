#pragma once

#include <stdexcept>
#include <string>

namespace calib {

struct InvalidInputError : std::runtime_error {
  explicit InvalidInputError(const std::string& what) : std::runtime_error(what) {}
};

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

struct FitError : std::runtime_error {
  explicit FitError(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedOperationError : std::runtime_error {
  explicit UnsupportedOperationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace calib
