#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace annopref {

/// Input rejected by a precondition check (bad dimension, invariant violation).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value produced during evaluation. `layer()` is the index of the
/// network layer where it surfaced, or npos when not tied to a layer.
class NumericError : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit NumericError(const std::string& what, std::size_t layer = npos)
      : std::runtime_error(what), layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown entity (run, query). Maps to a 404 on the HTTP surface.
class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// State conflict (expired or already answered query). Maps to a 409.
class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidInput(msg);
}
}  // namespace detail

}  // namespace annopref
