#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace blacksmith {

// Error taxonomy shared by the library and the CLI. The CLI prints
// "error: <category>: <message>" and exits nonzero, so tools can grep
// the category without parsing free-form text.
enum class ErrorCategory {
  config,      // bad configuration value, unknown key, invalid model dims
  bounds,      // index or progress outside its documented range
  name,        // unresolvable tensor name (freeze masks, optimizers)
  structural,  // shape mismatch between tensors that must agree
  format,      // malformed dataset or checkpoint bytes
  io,          // filesystem failure
  degenerate,  // request whose answer is mathematically undefined
};

inline std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::bounds: return "bounds";
    case ErrorCategory::name: return "name";
    case ErrorCategory::structural: return "structural";
    case ErrorCategory::format: return "format";
    case ErrorCategory::io: return "io";
    case ErrorCategory::degenerate: return "degenerate";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(std::string(to_string(category)) + ": " + message),
        category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& msg) {
  throw Error(c, msg);
}

inline void require(bool cond, ErrorCategory c, const std::string& msg) {
  if (!cond) fail(c, msg);
}

}  // namespace blacksmith
