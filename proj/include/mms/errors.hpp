#pragma once

#include <stdexcept>
#include <string>

namespace mms {

// Invalid data flowing through the pipeline (shape mismatch, non-binary
// mask, NaN input, ...). Maps to CLI exit status 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller passed an out-of-contract argument value.
class ParameterError : public std::invalid_argument {
public:
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

class ShapeError : public ValidationError {
public:
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

class DatasetError : public std::runtime_error {
public:
    explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

class SplitError : public std::runtime_error {
public:
    explicit SplitError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A persisted file failed its checksum / framing checks.
class IntegrityError : public IoError {
public:
    explicit IntegrityError(const std::string& msg) : IoError(msg) {}
};

// A checkpoint was produced under a different configuration.
class CompatibilityError : public IoError {
public:
    explicit CompatibilityError(const std::string& msg) : IoError(msg) {}
};

// Raised when the optimization hits a non-finite loss. Carries the name of
// the offending loss component.
class TrainingAbort : public std::runtime_error {
public:
    TrainingAbort(const std::string& component, const std::string& msg)
        : std::runtime_error(msg), component_(component) {}
    const std::string& component() const { return component_; }

private:
    std::string component_;
};

}  // namespace mms
