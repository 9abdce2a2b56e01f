// Exact-byte sequential reader. Usage: reader <bytes> <block> <path>
//
// Rewinds at end-of-file until the requested byte count is reached, so the
// source file may be smaller than the read volume.

#include <fcntl.h>
#include <unistd.h>

#include <vector>

#include "wl_common.h"

int main(int argc, char** argv) {
    if (argc != 4) {
        std::fprintf(stderr, "usage: reader <bytes> <block> <path>\n");
        return 2;
    }
    unsigned long long bytes = wl::parse_size(argv[1]);
    unsigned long long block = wl::parse_size(argv[2]);
    if (block == 0) block = 1;

    int fd = ::open(argv[3], O_RDONLY);
    if (fd < 0) {
        std::perror(argv[3]);
        return 1;
    }

    std::vector<char> buf(block);
    unsigned long long done = 0;
    unsigned long long sink = 0;
    while (done < bytes) {
        size_t want = buf.size();
        if (bytes - done < want) want = bytes - done;
        ssize_t n = ::read(fd, buf.data(), want);
        if (n < 0) {
            std::perror("read");
            ::close(fd);
            return 1;
        }
        if (n == 0) {
            if (::lseek(fd, 0, SEEK_SET) != 0 || done == 0) {
                std::fprintf(stderr, "empty source file\n");
                ::close(fd);
                return 1;
            }
            continue;
        }
        done += (unsigned long long)n;
        sink += (unsigned char)buf[0];
    }
    ::close(fd);

    std::printf("SELFREPORT kind=reader bytes=%llu block=%llu sink=%llu\n", done, block,
                sink);
    return 0;
}
