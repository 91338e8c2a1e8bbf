#pragma once

#include <stdexcept>
#include <string>

namespace clusterlm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define CLUSTERLM_DEFINE_ERROR(Name)          \
    class Name : public Error {               \
    public:                                   \
        using Error::Error;                   \
    }

CLUSTERLM_DEFINE_ERROR(ParseError);
CLUSTERLM_DEFINE_ERROR(ValidationError);
CLUSTERLM_DEFINE_ERROR(IoError);
CLUSTERLM_DEFINE_ERROR(ConfigError);
CLUSTERLM_DEFINE_ERROR(NonFiniteError);
CLUSTERLM_DEFINE_ERROR(DimError);
CLUSTERLM_DEFINE_ERROR(EmptyCatalogError);
CLUSTERLM_DEFINE_ERROR(EmptyClusterError);
CLUSTERLM_DEFINE_ERROR(DegenerateError);
CLUSTERLM_DEFINE_ERROR(FingerprintMismatchError);
CLUSTERLM_DEFINE_ERROR(RegistryError);
CLUSTERLM_DEFINE_ERROR(NoRelevantError);
CLUSTERLM_DEFINE_ERROR(MissingRunError);

// Manifest problems are registry problems with a more specific cause.
class ManifestError : public RegistryError {
public:
    using RegistryError::RegistryError;
};

#undef CLUSTERLM_DEFINE_ERROR

}  // namespace clusterlm
