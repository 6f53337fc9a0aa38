#pragma once

#include <stdexcept>
#include <string>

namespace mugshot {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller violated a precondition of a pure operation.
class UsageError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Input data (datasets, manifests, config references) failed validation.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IngestionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ScoringError : public Error {
public:
    using Error::Error;
};

class PromptError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

// A backend could not be reached, or failed after all retries.
class GatewayError : public Error {
public:
    using Error::Error;
};

// A backend answered, but the answer violates the wire contract.
class ProtocolError : public Error {
public:
    using Error::Error;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int validation = 2;
inline constexpr int gateway = 3;
inline constexpr int protocol = 4;
}  // namespace exit_code

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
        dynamic_cast<const UsageError*>(&e) || dynamic_cast<const PromptError*>(&e))
        return exit_code::validation;
    if (dynamic_cast<const GatewayError*>(&e)) return exit_code::gateway;
    if (dynamic_cast<const ProtocolError*>(&e)) return exit_code::protocol;
    return exit_code::failure;
}

}  // namespace mugshot
