#pragma once

#include <stdexcept>
#include <string>

namespace voxrel {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension / size disagreements between operands.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid argument values (negative sizes, out-of-range labels, ...).
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (bad magic, bad JSON, inconsistent header).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failures (missing file, unwritable directory, truncation).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace voxrel
