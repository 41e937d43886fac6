#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace eapgp {

// Formats a shape like [2, 3, 4] for error messages.
std::string shape_str(const std::vector<int64_t>& shape);

// Shortest round-trip decimal form of a double. Used for every float we
// serialize so that repeated runs produce byte-identical files.
std::string format_double(double v);

// FNV-1a over a byte string; used for config fingerprints, not security.
uint64_t fnv1a64(std::string_view bytes);

// SplitMix64 step; also the seed-derivation primitive.
uint64_t splitmix64(uint64_t& state);

// Derives an independent stream seed from a global seed and a component tag.
uint64_t derive_seed(uint64_t global_seed, std::string_view tag);

namespace detail {
template <class... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
  throw std::runtime_error(detail::concat(std::forward<Args>(args)...));
}

template <class... Args>
[[noreturn]] void fail_invalid(Args&&... args) {
  throw std::invalid_argument(detail::concat(std::forward<Args>(args)...));
}

}  // namespace eapgp
