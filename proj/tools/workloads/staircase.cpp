// Staircase allocator: grows by step_bytes per interval, touching every
// page, then frees everything. Usage: staircase <step_bytes> <steps> <hold_seconds>

#include <unistd.h>

#include <cstdint>
#include <vector>

#include "wl_common.h"

int main(int argc, char** argv) {
    if (argc != 4) {
        std::fprintf(stderr, "usage: staircase <step_bytes> <steps> <hold_seconds>\n");
        return 2;
    }
    unsigned long long step = wl::parse_size(argv[1]);
    unsigned long long steps = wl::parse_size(argv[2]);
    double hold = std::strtod(argv[3], nullptr);
    if (hold < 0) hold = 0;

    std::vector<char*> regions;
    for (unsigned long long i = 0; i < steps; ++i) {
        char* r = static_cast<char*>(std::malloc(step));
        if (!r) {
            std::fprintf(stderr, "allocation failed at step %llu\n", i);
            return 1;
        }
        for (unsigned long long off = 0; off < step; off += 4096) r[off] = char(i);
        if (step) r[step - 1] = char(i);
        regions.push_back(r);
        ::usleep(static_cast<useconds_t>(hold * 1e6));
    }
    for (char* r : regions) std::free(r);
    // One more interval after the free so a tail sample can observe the drop.
    ::usleep(static_cast<useconds_t>(hold * 1e6));

    std::printf("SELFREPORT kind=staircase peak_bytes=%llu step_bytes=%llu steps=%llu\n",
                step * steps, step, steps);
    return 0;
}
