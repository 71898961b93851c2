#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcti {

enum class Errc {
  BadMagic,
  TruncatedPayload,
  VersionUnsupported,
  MissingColumn,
  DuplicateCaseId,
  UnresolvablePath,
  NonPositiveTime,
  NoUncensoredCases,
  InvalidConfig,
  EmptyBag,
  InvalidMarginals,
  ShapeMismatch,
  HazardOutOfRange,
  NoComparablePairs,
  NoEvents,
  TooFewCases,
  NonFiniteLoss,
  GradMismatch,
  Io,
};

std::string_view errc_name(Errc code);

// Every failure raised by the library carries one of the codes above so the
// CLI can map it to an exit status and tests can assert on the kind.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mcti
