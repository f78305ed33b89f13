#pragma once

#include <stdexcept>
#include <string>

namespace oaf {

// Error categories map onto CLI exit codes: usage -> 1, config/format -> 2,
// numeric -> 3. Everything derives from Error so call sites can catch broadly.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct UsageError : Error {
    using Error::Error;
};

} // namespace oaf
