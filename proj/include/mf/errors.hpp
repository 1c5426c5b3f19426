#pragma once

#include <stdexcept>
#include <string>

namespace mf {

// Every failure surfaced by the library carries a short machine-readable
// category. The CLI prints failures as "error: [<category>] <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct SubjectError : Error {
  explicit SubjectError(const std::string& m) : Error("subject", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("usage", m) {}
};

}  // namespace mf
