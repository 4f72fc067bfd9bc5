#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spgn {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class LoadError : public Error {
public:
    explicit LoadError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    /// 1-based line number of the offending row, 0 when not line-specific.
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class EpisodeError : public Error {
public:
    using Error::Error;
};

class NoiseError : public Error {
public:
    using Error::Error;
};

class SplitError : public Error {
public:
    using Error::Error;
};

class FilterError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class TrainError : public Error {
public:
    TrainError(const std::string& what, std::size_t step)
        : Error("step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

class EvalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace spgn
