#pragma once

#include <stdexcept>
#include <string>

namespace msd {

// Base class for all recoverable errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input data violates a documented precondition (bad channel count, zero std, ...).
struct ValidationError : Error {
    using Error::Error;
};

// A binary container is malformed (bad magic, truncated payload, version skew).
struct FormatError : Error {
    using Error::Error;
};

// Tensor shapes are incompatible for the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// An API contract was broken (non-scalar loss, empty pairing, ...).
struct ContractError : Error {
    using Error::Error;
};

// Filesystem-level failure.
struct IOError : Error {
    using Error::Error;
};

// Cholesky factorization hit a non-positive pivot; carries the pivot index.
struct NotSPDError : Error {
    int pivot;
    NotSPDError(const std::string& msg, int pivot_index)
        : Error(msg), pivot(pivot_index) {}
};

// Training hit a non-finite loss; carries the diagnostic dump location.
struct NumericalAbort : Error {
    std::string dump_path;
    NumericalAbort(const std::string& msg, std::string dump)
        : Error(msg), dump_path(std::move(dump)) {}
};

}  // namespace msd
