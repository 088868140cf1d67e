#pragma once

#include <stdexcept>
#include <string>

namespace treeflow {

// Structured data error: `kind` is a stable machine-readable tag
// ("parse", "unknown-predicate", "label-not-target", "negative-time", ...),
// `where` locates the offending element (byte offset or JSON path).
class DataError : public std::runtime_error {
 public:
  DataError(std::string kind, std::string where, const std::string& what)
      : std::runtime_error(kind + " at " + where + ": " + what),
        kind_(std::move(kind)),
        where_(std::move(where)) {}
  const std::string& kind() const { return kind_; }
  const std::string& where() const { return where_; }

 private:
  std::string kind_;
  std::string where_;
};

class SpaceTooLargeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Simulation exceeded the configured event cap.
class ExplosionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Remote adapter transport or protocol failure.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace treeflow
