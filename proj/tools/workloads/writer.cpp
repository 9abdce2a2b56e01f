// Exact-byte sequential writer. Usage: writer <bytes> [block] [path]
//
// Periodic fsync keeps the written bytes attributed to this process in the
// kernel's I/O accounting instead of a background flusher.

#include <fcntl.h>
#include <unistd.h>

#include <vector>

#include "wl_common.h"

int main(int argc, char** argv) {
    if (argc < 2 || argc > 4) {
        std::fprintf(stderr, "usage: writer <bytes> [block] [path]\n");
        return 2;
    }
    unsigned long long bytes = wl::parse_size(argv[1]);
    unsigned long long block = argc > 2 ? wl::parse_size(argv[2]) : (64ULL << 10);
    if (block == 0) block = 1;
    char pathbuf[256];
    std::snprintf(pathbuf, sizeof(pathbuf), "writer-%d.dat", getpid());
    const char* path = argc > 3 ? argv[3] : pathbuf;

    int fd = ::open(path, O_CREAT | O_WRONLY | O_TRUNC, 0644);
    if (fd < 0) {
        std::perror(path);
        return 1;
    }

    std::vector<char> buf(block, 'w');
    unsigned long long done = 0, since_sync = 0;
    while (done < bytes) {
        size_t want = buf.size();
        if (bytes - done < want) want = bytes - done;
        ssize_t n = ::write(fd, buf.data(), want);
        if (n < 0) {
            std::perror("write");
            ::close(fd);
            return 1;
        }
        done += (unsigned long long)n;
        since_sync += (unsigned long long)n;
        if (since_sync >= (16ULL << 20)) {
            ::fsync(fd);
            since_sync = 0;
        }
    }
    ::fsync(fd);
    ::close(fd);
    ::unlink(path);

    std::printf("SELFREPORT kind=writer bytes=%llu block=%llu\n", done, block);
    return 0;
}
