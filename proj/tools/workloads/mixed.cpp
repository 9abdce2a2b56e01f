// Scripted alternation of compute and disk phases, for ordering tests.
//
// Usage: mixed <phase>... with phases
//   c:<seconds>            busy compute
//   w:<bytes>              sequential write, synced at phase end
//   cw:<seconds>:<bytes>   compute and writes interleaved over the window
//   s:<seconds>            idle
//
// Single-threaded by design; "concurrent" phases interleave fine slices so
// any sample covering the window sees both resources.

#include <fcntl.h>
#include <unistd.h>

#include <cstring>
#include <string>
#include <vector>

#include "wl_common.h"

namespace {

unsigned long long g_x = 0x2545f4914f6cdd1dULL;

void compute_for(double seconds) {
    double end = wl::now_seconds() + seconds;
    while (wl::now_seconds() < end) {
        for (int i = 0; i < 20000; ++i) g_x = wl::spin_step(g_x);
    }
}

struct Output {
    int fd = -1;
    unsigned long long written = 0;

    void write_bytes(unsigned long long bytes) {
        static std::vector<char> buf(64 << 10, 'm');
        while (bytes > 0) {
            size_t want = buf.size() < bytes ? buf.size() : size_t(bytes);
            ssize_t n = ::write(fd, buf.data(), want);
            if (n <= 0) {
                std::perror("write");
                std::exit(1);
            }
            written += (unsigned long long)n;
            bytes -= (unsigned long long)n;
        }
    }
};

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: mixed <phase>...\n");
        return 2;
    }

    // Validate the whole script before touching the filesystem so a bad
    // phase cannot leave a stray output file behind.
    for (int i = 1; i < argc; ++i) {
        std::string phase = argv[i];
        bool ok = phase.rfind("c:", 0) == 0 || phase.rfind("w:", 0) == 0 ||
                  phase.rfind("s:", 0) == 0;
        if (phase.rfind("cw:", 0) == 0) {
            char* colon = nullptr;
            std::strtod(phase.c_str() + 3, &colon);
            ok = colon && *colon == ':';
        }
        if (!ok) {
            std::fprintf(stderr, "bad phase: %s\n", phase.c_str());
            return 2;
        }
    }

    char path[256];
    std::snprintf(path, sizeof(path), "mixed-%d.dat", getpid());
    Output out;
    out.fd = ::open(path, O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (out.fd < 0) {
        std::perror(path);
        return 1;
    }

    double compute_seconds = 0.0;
    for (int i = 1; i < argc; ++i) {
        std::string phase = argv[i];
        if (phase.rfind("c:", 0) == 0) {
            double sec = std::strtod(phase.c_str() + 2, nullptr);
            compute_for(sec);
            compute_seconds += sec;
        } else if (phase.rfind("w:", 0) == 0) {
            out.write_bytes(wl::parse_size(phase.c_str() + 2));
            ::fsync(out.fd);
        } else if (phase.rfind("cw:", 0) == 0) {
            const char* p = phase.c_str() + 3;
            char* colon = nullptr;
            double sec = std::strtod(p, &colon);
            if (!colon || *colon != ':') {
                std::fprintf(stderr, "bad phase: %s\n", phase.c_str());
                return 2;
            }
            unsigned long long bytes = wl::parse_size(colon + 1);
            const int slices = sec > 0.2 ? int(sec / 0.02) : 10;
            unsigned long long per_slice = bytes / (unsigned long long)slices;
            for (int s = 0; s < slices; ++s) {
                compute_for(sec / slices);
                out.write_bytes(s == slices - 1 ? bytes - per_slice * (slices - 1)
                                                : per_slice);
            }
            ::fsync(out.fd);
            compute_seconds += sec;
        } else if (phase.rfind("s:", 0) == 0) {
            ::usleep(static_cast<useconds_t>(std::strtod(phase.c_str() + 2, nullptr) * 1e6));
        } else {
            std::fprintf(stderr, "bad phase: %s\n", phase.c_str());
            return 2;
        }
    }
    ::fsync(out.fd);
    ::close(out.fd);
    ::unlink(path);

    std::printf(
        "SELFREPORT kind=mixed compute_seconds=%.3f bytes_written=%llu checksum=%llx\n",
        compute_seconds, out.written, g_x);
    return 0;
}
