#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace dsran {

// Carries a stable error name ("ShapeMismatch", "SizeMismatch", ...) so the
// CLI can report it on stderr and map it to an exit code. Domain errors exit
// with 1, I/O and config errors with 2.
class Error : public std::runtime_error {
 public:
  enum class Kind { kDomain, kIo };

  Error(Kind kind, std::string name, const std::string& msg)
      : std::runtime_error(name + ": " + msg), kind_(kind), name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
  std::string name_;
};

[[noreturn]] inline void throw_domain(const std::string& name, const std::string& msg) {
  throw Error(Error::Kind::kDomain, name, msg);
}

[[noreturn]] inline void throw_io(const std::string& name, const std::string& msg) {
  throw Error(Error::Kind::kIo, name, msg);
}

}  // namespace dsran
