#pragma once

#include <stdexcept>
#include <string>

namespace deeprag {

/// Base class for every error this library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A state already holds the configured maximum number of steps.
class DepthExceeded : public Error {
 public:
  using Error::Error;
};

class DuplicateDocId : public Error {
 public:
  explicit DuplicateDocId(const std::string& doc_id)
      : Error("duplicate doc_id in corpus: " + doc_id), doc_id_(doc_id) {}
  const std::string& doc_id() const { return doc_id_; }

 private:
  std::string doc_id_;
};

class EmptyCorpus : public Error {
 public:
  EmptyCorpus() : Error("corpus stream yielded no records") {}
};

class UnknownDocId : public Error {
 public:
  explicit UnknownDocId(const std::string& doc_id)
      : Error("doc_id not present in index: " + doc_id) {}
};

class TsvParseError : public Error {
 public:
  TsvParseError(std::size_t line_no, const std::string& what)
      : Error("corpus line " + std::to_string(line_no) + ": " + what), line_no_(line_no) {}
  std::size_t line_no() const { return line_no_; }

 private:
  std::size_t line_no_;
};

class EndpointUnreachable : public Error {
 public:
  using Error::Error;
};

/// The gateway's per-run call cap was hit.
class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

/// A scripted model has no entry for the rendered prompt.
class ScriptMiss : public Error {
 public:
  using Error::Error;
};

class RejectedTrajectory : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  explicit EmptyInput(const std::string& where) : Error(where + ": empty input") {}
};

/// Exhaustive enumeration blew past its budget; only meaningful at test scale.
class BudgetExhausted : public Error {
 public:
  using Error::Error;
};

}  // namespace deeprag
