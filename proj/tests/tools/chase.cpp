// Pointer-chasing fixture: stall-heavy by construction, the counterpart to
// the spin workload's dense compute. Usage: chase <seconds>

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <numeric>
#include <random>
#include <vector>

namespace {

double now_seconds() {
    timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return double(ts.tv_sec) + double(ts.tv_nsec) * 1e-9;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: chase <seconds>\n");
        return 2;
    }
    double seconds = std::strtod(argv[1], nullptr);

    // One random cycle through a working set far beyond any cache level, so
    // nearly every hop misses.
    const std::size_t n = (64ULL << 20) / sizeof(std::uint64_t);
    std::vector<std::uint64_t> next(n);
    std::vector<std::uint64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(42);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i + 1 < n; ++i) next[order[i]] = order[i + 1];
    next[order[n - 1]] = order[0];

    std::uint64_t pos = order[0];
    unsigned long long hops = 0;
    double end = now_seconds() + seconds;
    while (now_seconds() < end) {
        for (int i = 0; i < 4096; ++i) pos = next[pos];
        hops += 4096;
    }

    std::printf("SELFREPORT kind=chase hops=%llu final=%llu\n", hops,
                (unsigned long long)pos);
    return 0;
}
