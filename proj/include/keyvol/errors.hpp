// Copyright 2026 The keyvol Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace keyvol {

// Base of every error the library throws. The CLI maps the subclasses onto
// distinct exit codes (see README).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument values: non-orthonormal rotations, non-positive sizes, ...
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor shape disagreement between an input and what an operation expects.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Invalid or inconsistent configuration records.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// On-disk data problems: missing files, bad manifests, unknown versions.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace keyvol
