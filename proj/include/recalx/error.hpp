#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace recalx {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition violations on user-supplied values (dimensions, ranges, non-finite numbers).
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Carries the 1-based row and column when known.
class ParseError : public InvalidInput {
public:
    ParseError(const std::string& what, std::size_t row = 0, std::size_t column = 0)
        : InvalidInput(what), row_(row), column_(column) {}

    std::size_t row() const noexcept { return row_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t row_;
    std::size_t column_;
};

/// Enumeration or tabulation requested beyond a hard size limit.
class LimitExceeded : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

class DivergenceUndefined : public Error {
public:
    using Error::Error;
};

class InfeasibleBin : public Error {
public:
    InfeasibleBin(const std::string& what, std::size_t bin) : Error(what), bin_(bin) {}
    std::size_t bin() const noexcept { return bin_; }

private:
    std::size_t bin_;
};

class NumericError : public Error {
public:
    using Error::Error;
};

/// A metric whose value is undefined for the given input (zero variance, no positive mass).
class UndefinedMetric : public Error {
public:
    using Error::Error;
};

/// Failure talking to an external model process.
class TransportError : public Error {
public:
    explicit TransportError(const std::string& what, std::optional<std::uint64_t> request_id = std::nullopt)
        : Error(request_id ? what + " (request id " + std::to_string(*request_id) + ")" : what),
          message_(what),
          request_id_(request_id) {}

    std::optional<std::uint64_t> request_id() const noexcept { return request_id_; }
    /// Message without the request-id suffix.
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::optional<std::uint64_t> request_id_;
};

class ProtocolError : public TransportError {
public:
    using TransportError::TransportError;
};

class TimeoutError : public TransportError {
public:
    using TransportError::TransportError;
};

}  // namespace recalx
