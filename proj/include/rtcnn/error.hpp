#pragma once

#include <stdexcept>
#include <string>

namespace rtcnn {

/// Broad failure category; the CLI maps each one to a stable exit code.
enum class ErrorCategory {
    Shape,     // tensor shapes or layer specs disagree
    Contract,  // caller broke a precondition (missing cache, bad index, ...)
    Config,    // invalid model/training configuration
    Data,      // semantically invalid data (label out of range, empty image)
    Parse,     // malformed input file
    Io,        // file could not be opened/written
    Format,    // weight file rejected (see FormatErrorKind)
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorCategory::Shape, what) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& what) : Error(ErrorCategory::Contract, what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

/// Parse failure; `row` is 1-based (header is row 1) or 0 when not row-oriented.
class ParseError : public Error {
public:
    explicit ParseError(const std::string& what, std::size_t row = 0)
        : Error(ErrorCategory::Parse, row ? "row " + std::to_string(row) + ": " + what : what),
          row_(row) {}

    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

enum class FormatErrorKind { BadMagic, VersionMismatch, CrcMismatch, Truncated, Malformed, Unsupported };

class FormatError : public Error {
public:
    FormatError(FormatErrorKind kind, const std::string& what)
        : Error(ErrorCategory::Format, what), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

}  // namespace rtcnn
