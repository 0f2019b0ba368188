#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace otoc {

/// Raised for invalid user input: bad files, violated preconditions,
/// inconsistent annotations. The CLI maps it to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sentinel for "no category" / "no instance".
inline constexpr int32_t kUnlabeled = -1;

using Vec3 = Eigen::Vector3d;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// splitmix64 finalizer over a pair; derives independent sub-seeds.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void log_warning(const std::string& message);
void log_info(const std::string& message);

/// Globally silences log_info (tests and benchmarks).
void set_verbose(bool verbose);

}  // namespace otoc
