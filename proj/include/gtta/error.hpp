#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gtta {

/// Failure categories raised by every module. Tests match on these rather
/// than on message text.
enum class Errc {
  ShapeMismatch,
  NonFinite,
  DomainError,
  AxisOutOfRange,
  InvalidDistribution,
  IndexOutOfRange,
  NotScalar,
  DetachedTensor,
  MissingGradient,
  EmptyDomain,
  IoError,
  BadMagic,
  VersionMismatch,
  BadK,
  InvalidLambda,
  ZeroWeightColumn,
  ZeroNormEmbedding,
  EmptyBank,
  EmptyClass,
  EmptyNeighborSet,
  SingleClassSource,
  EmptyEval,
  SingleClassEval,
  UsageError,
  ConfigParseError,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace gtta
