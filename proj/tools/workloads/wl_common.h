#pragma once

// Shared helpers for the bundled workloads. The workloads stay independent
// of the main library on purpose: profiling them must be genuinely
// black-box.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>

namespace wl {

// Accepts plain integers, scientific notation (1e9) and K/M/G suffixes.
inline unsigned long long parse_size(const char* s) {
    char* end = nullptr;
    double v = std::strtod(s, &end);
    if (end == s || v < 0) {
        std::fprintf(stderr, "bad size: %s\n", s);
        std::exit(2);
    }
    switch (*end) {
        case 'k': case 'K': v *= 1024.0; break;
        case 'm': case 'M': v *= 1024.0 * 1024.0; break;
        case 'g': case 'G': v *= 1024.0 * 1024.0 * 1024.0; break;
        case '\0': break;
        default:
            std::fprintf(stderr, "bad size suffix: %s\n", s);
            std::exit(2);
    }
    return static_cast<unsigned long long>(v);
}

inline double now_seconds() {
    timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return double(ts.tv_sec) + double(ts.tv_nsec) * 1e-9;
}

// One fixed-body unit of compute work. Kept out-of-line in each binary via
// volatile state so the loop cannot be folded away.
inline unsigned long long spin_step(unsigned long long x) {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    return x;
}

}  // namespace wl
