#pragma once

#include <stdexcept>
#include <string>

namespace vffgp {

// Bad user input: malformed files, inconsistent shapes, non-finite data.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Numerical breakdown: loss of positive definiteness, quadrature failure.
// Deliberately not recovered from inside the library; callers decide.
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vffgp
