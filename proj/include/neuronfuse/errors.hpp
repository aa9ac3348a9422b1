#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace nfuse {

// Every failure maps to one of three process exit codes:
//   1 validation or compatibility failure (bad file contents, mismatched stores)
//   2 configuration error (bad recipe, bad flags, bad template)
//   3 I/O error (cannot open, read, or write)
class Error : public std::runtime_error {
public:
    Error(const std::string& msg, int exit_code)
        : std::runtime_error(msg), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg, 1) {}
};

// Container file violates the format contract (bad magic length, bad header JSON).
class FormatError : public ValidationError {
public:
    explicit FormatError(const std::string& msg) : ValidationError(msg) {}
};

// Container is structurally valid but internally inconsistent
// (overlapping ranges, byte length disagreeing with dtype * shape).
class CorruptionError : public ValidationError {
public:
    explicit CorruptionError(const std::string& msg) : ValidationError(msg) {}
};

// Tensor name not present in a store or delta.
class LookupError : public ValidationError {
public:
    explicit LookupError(const std::string& msg) : ValidationError(msg) {}
};

// Architecture template could not assign a tensor, or group extents disagree.
class MappingError : public ValidationError {
public:
    explicit MappingError(const std::string& msg) : ValidationError(msg) {}
};

// Two stores failed validate_pair; carries the report as JSON text.
class CompatError : public ValidationError {
public:
    CompatError(const std::string& msg, std::string report_json)
        : ValidationError(msg), report_json_(std::move(report_json)) {}
    const std::string& report_json() const noexcept { return report_json_; }

private:
    std::string report_json_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg, 3) {}
};

} // namespace nfuse
