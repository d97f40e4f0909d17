#pragma once

#include <stdexcept>
#include <string>

namespace clamp {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input document (JSON, manifest, weight file).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Annotation arity or content does not match the keypoint schema.
class SchemaMismatchError : public Error {
public:
    using Error::Error;
};

/// A caller-side precondition was violated.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Missing or unreadable input file.
class InputError : public Error {
public:
    using Error::Error;
};

/// Configuration and model/checkpoint widths disagree.
class ConfigMismatchError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace clamp
