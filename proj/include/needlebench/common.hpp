#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace needlebench {

/// Base of every error the library throws. `code()` is a stable identifier
/// used in CLI diagnostics and wire-protocol error frames.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define NEEDLEBENCH_ERROR(Name)                                   \
  class Name : public ::needlebench::Error {                      \
   public:                                                        \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

NEEDLEBENCH_ERROR(SchemaError);
NEEDLEBENCH_ERROR(ContiguityError);
NEEDLEBENCH_ERROR(RangeError);
NEEDLEBENCH_ERROR(RetractionBelowZero);
NEEDLEBENCH_ERROR(NegativeForce);
NEEDLEBENCH_ERROR(ShapeMismatch);
NEEDLEBENCH_ERROR(NonFiniteLoss);
NEEDLEBENCH_ERROR(DegenerateSegment);
NEEDLEBENCH_ERROR(FormatError);
NEEDLEBENCH_ERROR(StageError);
NEEDLEBENCH_ERROR(ConfigHashMismatch);
NEEDLEBENCH_ERROR(PortInUse);

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from (seed, index).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream = 0) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

inline constexpr const char* kVersion = "0.1.0";

}  // namespace needlebench
