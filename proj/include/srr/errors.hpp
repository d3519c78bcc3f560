#pragma once

#include <stdexcept>
#include <string>

namespace srr {

// Root of all recoverable errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// core-model
struct MalformedOutput : Error {
  using Error::Error;
};
struct SchemaViolation : Error {
  using Error::Error;
};

// llm-gateway
struct TransportError : Error {
  using Error::Error;
};
struct ProviderError : Error {
  ProviderError(int status_code, std::string response_body, const std::string& what)
      : Error(what), status(status_code), body(std::move(response_body)) {}
  int status;
  std::string body;
};
struct EmptyCompletion : Error {
  using Error::Error;
};
struct ScriptExhausted : Error {
  using Error::Error;
};

// search-env
struct EmptyQuery : Error {
  using Error::Error;
};
struct SearchApiError : Error {
  using Error::Error;
};
struct ScrapeError : Error {
  using Error::Error;
};
struct SummarizerError : Error {
  using Error::Error;
};

// srr-judge
struct VerdictParseError : Error {
  using Error::Error;
};
struct JudgeUnavailable : Error {
  using Error::Error;
};

// datapipe
struct InsufficientVotes : Error {
  using Error::Error;
};
struct DegenerateInput : Error {
  using Error::Error;
};
struct DuplicateIteration : Error {
  using Error::Error;
};

// evalkit
struct GraderUnavailable : Error {
  using Error::Error;
};
struct GradeParseError : Error {
  using Error::Error;
};
struct EmptyRuns : Error {
  using Error::Error;
};
struct LengthMismatch : Error {
  using Error::Error;
};

// cli-config
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace srr
