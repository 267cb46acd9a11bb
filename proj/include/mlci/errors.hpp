#pragma once

#include <stdexcept>
#include <string>

namespace mlci {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : Error {
    std::size_t pos;
    ParseError(const std::string& msg, std::size_t at)
        : Error(msg + " (at offset " + std::to_string(at) + ")"), pos(at) {}
};

struct ConfigError : Error {
    using Error::Error;
};

struct EstimateError : Error {
    using Error::Error;
};

struct EvalError : Error {
    using Error::Error;
};

struct SessionError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace mlci
