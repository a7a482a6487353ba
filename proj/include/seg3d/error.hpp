#pragma once

#include <stdexcept>
#include <string>

namespace seg3d {

// Base of every error raised by the library. `kind()` is a short stable tag
// used by the CLI and the HTTP layer for machine-readable error bodies.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct BoundsError : Error {
  explicit BoundsError(const std::string& w) : Error("bounds", w) {}
};

struct CodecError : Error {
  explicit CodecError(const std::string& w) : Error("codec", w) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract", w) {}
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error("parameter", w) {}
};

struct NotFoundError : Error {
  explicit NotFoundError(const std::string& w) : Error("not_found", w) {}
};

struct StateError : Error {
  explicit StateError(const std::string& w) : Error("state", w) {}
};

}  // namespace seg3d
