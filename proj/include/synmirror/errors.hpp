#pragma once

#include <stdexcept>
#include <string>

namespace synmirror {

// Base for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Target command could not be spawned (not found, not executable, ...).
class LaunchError : public Error {
public:
    using Error::Error;
};

// A required counter source is unavailable and no fallback was enabled.
class CapabilityError : public Error {
public:
    using Error::Error;
};

class StoreError : public Error {
public:
    using Error::Error;
};

// Profile does not fit the document backend.
class SizeLimitError : public StoreError {
public:
    using StoreError::StoreError;
};

class NotFoundError : public StoreError {
public:
    using StoreError::StoreError;
};

// Stored schema_version is newer than this build understands.
class VersionError : public StoreError {
public:
    using StoreError::StoreError;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

// Calibration table exists but was measured on a different host.
class StaleCalibrationError : public CalibrationError {
public:
    using CalibrationError::CalibrationError;
};

class EmulationError : public Error {
public:
    explicit EmulationError(const std::string& what, long sample_index = -1)
        : Error(what), sample_index(sample_index) {}
    long sample_index;  // -1 when not tied to a specific sample
};

class TimeoutError : public EmulationError {
public:
    using EmulationError::EmulationError;
};

}  // namespace synmirror
