#pragma once

#include <stdexcept>
#include <string>

namespace bdf {

// Root of every error raised by the library. The CLI maps these to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A required parent value or column is missing, or dimensions disagree.
class StructuralError : public Error {
public:
    using Error::Error;
};

// Probability exactly at 0 or 1 where an interior value is required.
class BoundaryError : public Error {
public:
    using Error::Error;
};

class SingularInformationError : public Error {
public:
    using Error::Error;
};

class SeparationError : public Error {
public:
    using Error::Error;
};

// Requested estimand is not identified under the declared causal structure.
class IdentificationError : public Error {
public:
    using Error::Error;
};

class CellSparsityError : public Error {
public:
    using Error::Error;
};

class NotPositiveDefiniteError : public Error {
public:
    using Error::Error;
};

class SamplerError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace bdf
