// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace amnet {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor dimensions do not satisfy an operation's contract.
struct ShapeError : Error {
    using Error::Error;
};

/// A numeric failure (NaN input, NaN gradient) that invalidates the run.
struct NumericError : Error {
    using Error::Error;
};

/// Bad configuration: invalid hyperparameter, malformed config file,
/// incompatible checkpoint. CLI exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

/// Bad or insufficient input data: schema mismatch, unparseable row,
/// empty corpus. CLI exit code 3.
struct DataError : Error {
    using Error::Error;
};

} // namespace amnet
