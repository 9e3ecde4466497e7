#include <cstdlib>
#include <string_view>

#include "gtta/simd/kernels.hpp"

namespace gtta::simd {

#if defined(GTTA_HAVE_AVX2)
namespace detail {
const KernelTable& avx2_table() noexcept;
}
#endif

const KernelTable* avx2_kernels() noexcept {
#if defined(GTTA_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &detail::avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active_kernels() noexcept {
  static const KernelTable& table = []() -> const KernelTable& {
    const char* force = std::getenv("GTTA_SIMD");
    if (force != nullptr && std::string_view(force) == "scalar") return scalar_kernels();
    if (const KernelTable* t = avx2_kernels()) return *t;
    return scalar_kernels();
  }();
  return table;
}

}  // namespace gtta::simd
