#pragma once

#include <stdexcept>
#include <string>

namespace hyperfl {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity reached a place where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// The requested operation is not available for the given input, e.g.
/// differentiating twice through a first-order-only primitive, or running
/// a full-model gradient attack against a hypernetwork-only transcript.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input (bad magic, truncated payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Two inputs disagree with each other (e.g. image and label counts).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Not enough samples of some class to satisfy a partition request.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class DegenerateGradientError : public Error {
 public:
  using Error::Error;
};

/// A message would carry a client-private tensor across the wire.
class PrivacyViolation : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hyperfl
