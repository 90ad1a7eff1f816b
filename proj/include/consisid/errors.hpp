#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace csid {

// Precondition violations (shapes, ranges, malformed arguments) are reported
// as std::invalid_argument. The types below cover the remaining failure modes.

struct DegenerateGeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericDivergenceError : std::runtime_error {
    NumericDivergenceError(const std::string& what, std::int64_t step_index)
        : std::runtime_error(what), step(step_index) {}
    std::int64_t step;
};

struct InternalConsistencyError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace csid
