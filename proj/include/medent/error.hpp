#pragma once

#include <stdexcept>
#include <string>

namespace medent {

// Every failure surfaced by the library carries a short machine-readable
// code ("shape_mismatch", "missing_field", ...) next to the human message.
// The CLI prints both on one line and the service maps them onto HTTP
// error objects.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace medent
