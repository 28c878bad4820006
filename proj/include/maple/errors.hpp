#pragma once

#include <stdexcept>

namespace maple {

// Error taxonomy, mirrored by the CLI exit codes: validation problems exit
// with 2, everything else that throws exits with 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ValueError : Error {
  using Error::Error;
};

// An operation produced (or was fed) NaN/Inf.
struct NumericError : Error {
  using Error::Error;
};

// Malformed hierarchy files, label vectors, manifests and the like.
struct ValidationError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Embedding backend failures (HTTP errors, cache misses, bad payloads).
struct ProviderError : Error {
  using Error::Error;
};

}  // namespace maple
