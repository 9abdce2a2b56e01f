// Pure compute loop with a fixed instruction body. Usage: spin <iterations>

#include "wl_common.h"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: spin <iterations>\n");
        return 2;
    }
    unsigned long long iterations = wl::parse_size(argv[1]);

    unsigned long long x = 0x9e3779b97f4a7c15ULL;
    for (unsigned long long i = 0; i < iterations; ++i) x = wl::spin_step(x);

    // The checksum keeps the loop observable.
    std::printf("SELFREPORT kind=spin iterations=%llu checksum=%llx\n", iterations, x);
    return 0;
}
