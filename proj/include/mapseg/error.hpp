#pragma once

#include <stdexcept>
#include <string>

namespace mapseg {

enum class ErrorKind {
    config,
    shape,
    frame_mismatch,
    domain,
    format,
    out_of_range,
    degenerate_geometry,
    numeric,
    checkpoint_incompatible,
    io,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base of every error thrown by the library. `kind()` is what the CLI
/// prints in its one-line machine-parsable error record.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define MAPSEG_DEFINE_ERROR(Name, Kind)                                        \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message)                              \
            : Error(ErrorKind::Kind, message) {}                               \
    }

MAPSEG_DEFINE_ERROR(ConfigError, config);
MAPSEG_DEFINE_ERROR(ShapeError, shape);
MAPSEG_DEFINE_ERROR(FrameMismatchError, frame_mismatch);
MAPSEG_DEFINE_ERROR(DomainError, domain);
MAPSEG_DEFINE_ERROR(FormatError, format);
MAPSEG_DEFINE_ERROR(OutOfRangeError, out_of_range);
MAPSEG_DEFINE_ERROR(DegenerateGeometryError, degenerate_geometry);
MAPSEG_DEFINE_ERROR(NumericError, numeric);
MAPSEG_DEFINE_ERROR(CheckpointIncompatibleError, checkpoint_incompatible);
MAPSEG_DEFINE_ERROR(IoError, io);

#undef MAPSEG_DEFINE_ERROR

}  // namespace mapseg
