#pragma once

#include <stdexcept>
#include <string>

namespace pgat {

// Precondition / input validation failures. The CLI maps these to exit
// code 1; anything else that escapes is a runtime failure (exit code 2).
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace pgat
