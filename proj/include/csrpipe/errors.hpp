#pragma once

#include <stdexcept>
#include <string>

namespace csrpipe {

// Every failure the engine surfaces derives from Error; the CLI maps
// ConfigError to exit code 2 and everything else to 1.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define CSRPIPE_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
  public:                                     \
    using Error::Error;                       \
  }

CSRPIPE_DEFINE_ERROR(MalformedStructure);
CSRPIPE_DEFINE_ERROR(InvalidInput);
CSRPIPE_DEFINE_ERROR(InvalidReference);
CSRPIPE_DEFINE_ERROR(GroupTooSmall);
CSRPIPE_DEFINE_ERROR(EmptySample);
CSRPIPE_DEFINE_ERROR(ParseFailure);
CSRPIPE_DEFINE_ERROR(GenerationFailure);
CSRPIPE_DEFINE_ERROR(SinkUnwritable);
CSRPIPE_DEFINE_ERROR(WrongState);
CSRPIPE_DEFINE_ERROR(MissingReason);
CSRPIPE_DEFINE_ERROR(LeaseConflict);
CSRPIPE_DEFINE_ERROR(NotFound);
CSRPIPE_DEFINE_ERROR(StoreLocked);
CSRPIPE_DEFINE_ERROR(BindFailure);
CSRPIPE_DEFINE_ERROR(ConfigError);

// Gateway failures. Timeout and RateLimited are retryable, MalformedResponse
// is not.
CSRPIPE_DEFINE_ERROR(GatewayError);

class Timeout : public GatewayError {
public:
  using GatewayError::GatewayError;
};

class RateLimited : public GatewayError {
public:
  using GatewayError::GatewayError;
};

class MalformedResponse : public GatewayError {
public:
  using GatewayError::GatewayError;
};

class TransportError : public GatewayError {
public:
  using GatewayError::GatewayError;
};

#undef CSRPIPE_DEFINE_ERROR

}  // namespace csrpipe
