#pragma once

#include <stdexcept>
#include <string>

namespace axai {

// Every failure raised by the library derives from Error. kind() is a stable
// machine-readable class name that the CLI prints on failure.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

#define AXAI_DEFINE_ERROR(Name, tag)                                           \
  class Name : public Error {                                                  \
  public:                                                                      \
    explicit Name(const std::string& what) : Error(tag, what) {}               \
  };

AXAI_DEFINE_ERROR(ConfigError, "config")
AXAI_DEFINE_ERROR(ParseError, "parse")
AXAI_DEFINE_ERROR(EmptyInputError, "empty-input")
AXAI_DEFINE_ERROR(ContractError, "contract")
AXAI_DEFINE_ERROR(NumericError, "numeric")
AXAI_DEFINE_ERROR(MetricError, "metric")
AXAI_DEFINE_ERROR(TrainingError, "training")
AXAI_DEFINE_ERROR(FormatError, "format")
AXAI_DEFINE_ERROR(IoError, "io")
AXAI_DEFINE_ERROR(PrerequisiteError, "prerequisite")
AXAI_DEFINE_ERROR(DegenerateInputError, "degenerate-input")

#undef AXAI_DEFINE_ERROR

} // namespace axai
