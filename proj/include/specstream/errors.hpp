#pragma once

#include <stdexcept>
#include <string>

namespace specstream {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimensions do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// A caller-supplied argument is out of range.
struct ParamError : Error {
    using Error::Error;
};

// Sequence / tree / cache exceeds a configured capacity.
struct CapacityError : Error {
    using Error::Error;
};

// Weight container or config document is malformed.
struct LoadError : Error {
    using Error::Error;
};

// An API was used out of protocol (e.g. committing a pruned node).
struct LogicError : Error {
    using Error::Error;
};

// Training diverged (NaN loss).
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace specstream
