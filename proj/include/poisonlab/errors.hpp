#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace poisonlab {

// Malformed container or checkpoint file. Carries the byte offset at which
// the reader gave up.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// A quantity is outside the domain where it is defined (e.g. cosine
// similarity of a zero vector).
class NumericalDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace poisonlab
