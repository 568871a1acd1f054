#include "flowcast/kernels.hpp"

#include "flowcast/errors.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace flowcast::kernels {
namespace {

std::atomic<const Kernels*> g_active{nullptr};
std::atomic<Backend> g_forced{Backend::Auto};

const Kernels* resolve() {
    Backend forced = g_forced.load(std::memory_order_acquire);
    if (forced == Backend::Scalar) return &scalar_kernels();
    if (forced == Backend::Avx2) {
        if (!avx2_supported())
            throw ConfigError("avx2 kernels requested but this CPU lacks AVX2/FMA");
        return &avx2_kernels();
    }
    if (const char* env = std::getenv("FLOWCAST_KERNELS")) {
        std::string want(env);
        if (want == "scalar") return &scalar_kernels();
        if (want == "avx2") {
            if (!avx2_supported())
                throw ConfigError("FLOWCAST_KERNELS=avx2 but this CPU lacks AVX2/FMA");
            return &avx2_kernels();
        }
        if (!want.empty() && want != "auto")
            throw ConfigError("unknown FLOWCAST_KERNELS value '" + want + "' (expected scalar, avx2, or auto)");
    }
    return avx2_supported() ? &avx2_kernels() : &scalar_kernels();
}

} // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Kernels& active() {
    const Kernels* k = g_active.load(std::memory_order_acquire);
    if (!k) {
        k = resolve();
        g_active.store(k, std::memory_order_release);
    }
    return *k;
}

void force_backend(Backend b) {
    g_forced.store(b, std::memory_order_release);
    g_active.store(nullptr, std::memory_order_release);
}

Backend active_backend() {
    return &active() == &avx2_kernels() ? Backend::Avx2 : Backend::Scalar;
}

} // namespace flowcast::kernels
