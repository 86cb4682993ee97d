// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace dcvit {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input data or configuration violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse (wrong call order, missing optional input, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A compression target cannot be met with the requested block count.
class PlanningError : public Error {
 public:
  using Error::Error;
};

/// A compression target cannot be met with any block count.
class InfeasibleError : public PlanningError {
 public:
  using PlanningError::PlanningError;
};

/// Numerical divergence during optimisation.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// An in-pipeline invariant check failed.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or written, or has the wrong format.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace dcvit
