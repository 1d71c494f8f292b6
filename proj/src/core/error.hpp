#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace locov {

// Error with a stable machine-readable code next to the human message.
// Codes are short kebab-case strings ("shape-mismatch", "invalid-config", ...)
// and surface unchanged through the C API.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& message) {
  throw Error(std::move(code), message);
}

}  // namespace locov
