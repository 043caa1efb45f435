#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fpt {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes (dimension mismatch, non-scalar loss, wrong rank).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A softmax row with every position masked out.
class MaskError : public Error {
public:
    using Error::Error;
};

/// Inconsistent model spec, policy, task or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Sequence longer than the model's max_len.
class LengthError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

/// Malformed binary dataset file. Carries the byte offset of the problem.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// Bad record in a line-oriented text dataset.
class RecordError : public Error {
public:
    RecordError(const std::string& what, std::size_t line, std::size_t position)
        : Error(what + " (line " + std::to_string(line) + ", position " + std::to_string(position) + ")"),
          line_(line), position_(position) {}
    std::size_t line() const noexcept { return line_; }
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t line_;
    std::size_t position_;
};

class CheckpointError : public Error {
public:
    enum class Kind { io, bad_magic, version, checksum, truncated, unknown_tensor, missing_tensor, shape, header };

    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Feature cache built from a different trunk or dataset than the one in use.
class StaleCacheError : public Error {
public:
    using Error::Error;
};

class UnsupportedModelError : public Error {
public:
    using Error::Error;
};

}  // namespace fpt
