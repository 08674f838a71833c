#pragma once

#include <stdexcept>
#include <string>

namespace crc {

// Base of every domain failure raised by the library. The CLI maps these to
// exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorpusError : public Error {
 public:
  using Error::Error;
};

class PromptError : public Error {
 public:
  using Error::Error;
};

class DelimiterCollisionError : public PromptError {
 public:
  using PromptError::PromptError;
};

class UnknownSchemeError : public PromptError {
 public:
  using PromptError::PromptError;
};

class ReflectionFormatError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  BackendError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}

  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

class NetworkError : public BackendError {
 public:
  using BackendError::BackendError;
};

class HttpStatusError : public BackendError {
 public:
  HttpStatusError(const std::string& what, int attempts, int status)
      : BackendError(what, attempts), status_(status) {}

  int status() const { return status_; }

 private:
  int status_;
};

class MalformedResponseError : public BackendError {
 public:
  using BackendError::BackendError;
};

class RateLimitError : public BackendError {
 public:
  using BackendError::BackendError;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class PipelineError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace crc
