#pragma once

#include <stdexcept>
#include <string>

namespace kivaci {

/// Every failure raised by the library carries the owning module and a stable
/// machine-readable code so the CLI can surface it verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string module, std::string code, const std::string& detail = {})
      : std::runtime_error(module + ": " + code + (detail.empty() ? "" : " (" + detail + ")")),
        module_(std::move(module)),
        code_(std::move(code)),
        detail_(detail) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string module_;
  std::string code_;
  std::string detail_;
};

}  // namespace kivaci
