#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace gtta {

// FNV-1a, 64 bit. Used for reproducibility checks only.
class Digest {
 public:
  void bytes(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void text(std::string_view s) noexcept { bytes(s.data(), s.size()); }
  void u64(std::uint64_t v) noexcept { bytes(&v, sizeof v); }
  template <typename T>
  void values(std::span<const T> v) noexcept {
    bytes(v.data(), v.size_bytes());
  }

  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace gtta
