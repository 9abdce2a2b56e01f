#pragma once

// Resource-consuming atoms. Each atom knows how to consume one kind of
// resource in controllable quantities: compute burns cycles through a
// calibrated kernel, storage moves bytes through scratch files in fixed-size
// requests, memory allocates and frees touched regions, network streams
// framed bytes through a socket. The emulation driver feeds them merged
// profile samples; they are equally usable standalone (stress, tests).

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <latch>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "synmirror/cycles.hpp"
#include "synmirror/errors.hpp"
#include "synmirror/kernels.hpp"
#include "synmirror/profile.hpp"
#include "synmirror/system.hpp"

namespace synmirror {

enum class WorkerMode { shared_memory, separate_process };

inline const char* to_string(WorkerMode m) {
    return m == WorkerMode::shared_memory ? "shared_memory"
                                          : "separate_process";
}

struct AtomConfig {
    std::string compute_kernel = "cache_resident";
    int compute_workers = 1;
    WorkerMode worker_mode = WorkerMode::shared_memory;
    bytes_t io_block_size_read = 64 * 1024;
    bytes_t io_block_size_write = 64 * 1024;
    std::string fs_target = ".";
    bytes_t mem_block_size = 64ull << 20;
    std::optional<std::string> network_endpoint;
    std::string plugin_dir;  // where custom compute kernels are looked up

    void validate() const {
        if (compute_workers < 1)
            throw EmulationError("compute_workers must be >= 1");
        if (io_block_size_read < 1 || io_block_size_write < 1 ||
            mem_block_size < 1)
            throw EmulationError("block sizes must be >= 1 byte");
    }
};

namespace detail {

inline double monotonic_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Compute: burn a cycle target through a kernel, closed-loop.
//
// The calibrated cost only seeds chunk sizing; the loop re-reads a live
// cycle meter after every chunk (about 100 ms of work) and stops when the
// measured total crosses the target. This stays accurate when the effective
// core speed drifts, which on shared virtual hosts it does, by a lot.

class ComputeAtom {
public:
    ComputeAtom(const AtomConfig& cfg, CalibrationEntry cal, SystemInfo sys,
                std::optional<CounterSource> pin = {})
        : cfg_(cfg), cal_(std::move(cal)), sys_(std::move(sys)), pin_(pin) {}

    // Consumes ~target_cycles across the configured workers and returns the
    // measured total. Throws TimeoutError when the wall-clock cap expires
    // first; the exception message reports the partial consumption.
    count_t consume(count_t target_cycles, double wall_cap_seconds) {
        if (target_cycles == 0) return 0;
        int workers = cfg_.compute_workers;
        std::vector<count_t> share(workers, target_cycles / workers);
        share[0] += target_cycles % workers;

        if (workers == 1)
            return run_worker(share[0], wall_cap_seconds, nullptr, nullptr);
        return cfg_.worker_mode == WorkerMode::shared_memory
                   ? run_threads(share, wall_cap_seconds)
                   : run_processes(share, wall_cap_seconds);
    }

private:
    // One worker's closed loop. Runs on the calling thread; the meter is
    // created here so hardware counters attach to the right thread.
    count_t run_worker(count_t target, double cap, std::latch* go,
                       bool* arrived) {
        auto kernel = make_kernel(cfg_.compute_kernel, cfg_.plugin_dir);
        CycleMeter meter = CycleMeter::create(sys_.max_cpu_freq, pin_);
        double cpi = cal_.cycles_per_iteration;
        if (cpi <= 0.0) cpi = 1.0;

        if (go) {
            if (arrived) *arrived = true;
            go->arrive_and_wait();
        }
        double t0 = detail::monotonic_seconds();
        const double chunk_cycles =
            0.1 * double(sys_.max_cpu_freq ? sys_.max_cpu_freq
                                           : 1'000'000'000);

        count_t start = meter.read();
        count_t consumed = 0;
        while (consumed < target) {
            double remaining = double(target - consumed);
            double want = std::min(remaining, chunk_cycles);
            auto iters = static_cast<std::uint64_t>(want / cpi);
            if (iters == 0) iters = 1;
            count_t before = meter.read();
            kernel->run(iters);
            count_t after = meter.read();
            consumed = after - start;
            // Track the observed cost so chunk sizing follows the host.
            if (after > before) {
                double observed = double(after - before) / double(iters);
                cpi = 0.5 * cpi + 0.5 * observed;
            }
            if (consumed < target &&
                detail::monotonic_seconds() - t0 > cap)
                throw TimeoutError(
                    "compute target not reached within " +
                    std::to_string(cap) + " s (consumed " +
                    std::to_string(consumed) + " of " +
                    std::to_string(target) + " cycles)");
        }
        return consumed;
    }

    count_t run_threads(const std::vector<count_t>& share, double cap) {
        std::latch go(static_cast<std::ptrdiff_t>(share.size()));
        std::vector<std::thread> pool;
        std::vector<count_t> got(share.size(), 0);
        std::vector<std::exception_ptr> errs(share.size());
        for (std::size_t w = 0; w < share.size(); ++w) {
            pool.emplace_back([&, w] {
                bool arrived = false;
                try {
                    got[w] = run_worker(share[w], cap, &go, &arrived);
                } catch (...) {
                    errs[w] = std::current_exception();
                    // Never strand siblings at the gate, but count down at
                    // most once per worker.
                    if (!arrived) go.count_down();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);
        count_t total = 0;
        for (count_t c : got) total += c;
        return total;
    }

    count_t run_processes(const std::vector<count_t>& share, double cap) {
        struct Worker {
            pid_t pid = -1;
            int go_w = -1;      // parent writes one byte to release
            int result_r = -1;  // child writes its consumed count
        };
        std::vector<Worker> ws;
        ws.reserve(share.size());

        for (count_t target : share) {
            int go[2], res[2];
            if (pipe(go) != 0 || pipe(res) != 0)
                throw EmulationError(std::string("pipe: ") +
                                     std::strerror(errno));
            pid_t pid = fork();
            if (pid < 0)
                throw EmulationError(std::string("fork: ") +
                                     std::strerror(errno));
            if (pid == 0) {
                ::close(go[1]);
                ::close(res[0]);
                char byte;
                // Wait for the collective GO so workers start together.
                if (::read(go[0], &byte, 1) != 1) ::_exit(3);
                ::close(go[0]);
                try {
                    count_t consumed =
                        run_worker(target, cap, nullptr, nullptr);
                    ssize_t n =
                        ::write(res[1], &consumed, sizeof consumed);
                    ::_exit(n == sizeof consumed ? 0 : 3);
                } catch (const TimeoutError&) {
                    ::_exit(4);
                } catch (...) {
                    ::_exit(5);
                }
            }
            ::close(go[0]);
            ::close(res[1]);
            ws.push_back({pid, go[1], res[0]});
        }

        // Release everyone, then collect.
        for (auto& w : ws) {
            char byte = 'G';
            (void)!::write(w.go_w, &byte, 1);
            ::close(w.go_w);
        }
        count_t total = 0;
        std::string failure;
        for (auto& w : ws) {
            count_t consumed = 0;
            ssize_t n = ::read(w.result_r, &consumed, sizeof consumed);
            ::close(w.result_r);
            int status = 0;
            waitpid(w.pid, &status, 0);
            if (n == sizeof consumed && WIFEXITED(status) &&
                WEXITSTATUS(status) == 0) {
                total += consumed;
            } else if (WIFEXITED(status) && WEXITSTATUS(status) == 4) {
                failure = "compute worker timed out before reaching its "
                          "cycle share";
            } else if (failure.empty()) {
                failure = "compute worker failed (status " +
                          std::to_string(status) + ")";
            }
        }
        if (!failure.empty()) {
            if (failure.find("timed out") != std::string::npos)
                throw TimeoutError(failure);
            throw EmulationError(failure);
        }
        return total;
    }

    AtomConfig cfg_;
    CalibrationEntry cal_;
    SystemInfo sys_;
    std::optional<CounterSource> pin_;
};

// ---------------------------------------------------------------------------
// Storage: move bytes through scratch files in fixed-size requests.

class StorageAtom {
public:
    struct Result {
        bytes_t written = 0;
        bytes_t read = 0;
        count_t write_requests = 0;
        count_t read_requests = 0;
    };

    // Scratch source for reads is sized modestly and read with wraparound;
    // emulation replays request counts and volumes, not on-disk footprints.
    static constexpr bytes_t kReadSourceSize = 64ull << 20;

    StorageAtom(std::string scratch_dir, bytes_t block_read,
                bytes_t block_write)
        : dir_(std::move(scratch_dir)),
          block_read_(block_read),
          block_write_(block_write) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec)
            throw EmulationError("cannot create scratch directory " + dir_ +
                                 ": " + ec.message());
        buf_.resize(std::max(block_read_, block_write_));
        for (std::size_t i = 0; i < buf_.size(); ++i)
            buf_[i] = char('A' + (i % 23));
    }

    ~StorageAtom() { close_all(); }
    StorageAtom(const StorageAtom&) = delete;
    StorageAtom& operator=(const StorageAtom&) = delete;

    // Writes then reads the requested volumes. One write() per block-sized
    // request (final partial block allowed), data synced before returning so
    // the cost cannot hide in the page cache across samples.
    Result consume(bytes_t read_bytes, bytes_t write_bytes) {
        Result r;
        if (write_bytes > 0) {
            ensure_write_file();
            bytes_t left = write_bytes;
            while (left > 0) {
                bytes_t n = std::min<bytes_t>(block_write_, left);
                ssize_t put = ::write(wfd_, buf_.data(), n);
                if (put < 0)
                    throw EmulationError(
                        "scratch write failed after " +
                        std::to_string(r.written) + " bytes: " +
                        std::strerror(errno));
                r.written += bytes_t(put);
                ++r.write_requests;
                left -= bytes_t(put);
            }
            if (::fsync(wfd_) != 0)
                throw EmulationError(std::string("fsync: ") +
                                     std::strerror(errno));
            // Recycle the file so long replays do not fill the disk.
            if (::lseek(wfd_, 0, SEEK_CUR) >
                off_t(kReadSourceSize * 4)) {
                if (::ftruncate(wfd_, 0) == 0) ::lseek(wfd_, 0, SEEK_SET);
            }
        }
        if (read_bytes > 0) {
            ensure_read_file();
            bytes_t left = read_bytes;
            while (left > 0) {
                bytes_t n = std::min<bytes_t>(block_read_, left);
                ssize_t got = ::read(rfd_, buf_.data(), n);
                if (got < 0)
                    throw EmulationError(
                        "scratch read failed after " +
                        std::to_string(r.read) + " bytes: " +
                        std::strerror(errno));
                if (got == 0) {  // wrap and retry
                    ::lseek(rfd_, 0, SEEK_SET);
                    continue;
                }
                r.read += bytes_t(got);
                ++r.read_requests;
                left -= bytes_t(got);
            }
        }
        return r;
    }

    // Removes scratch files; call on success. Destructor only closes.
    void cleanup() {
        close_all();
        std::error_code ec;
        std::filesystem::remove(write_path(), ec);
        std::filesystem::remove(read_path(), ec);
    }

    std::string write_path() const { return dir_ + "/write.scratch"; }
    std::string read_path() const { return dir_ + "/read.scratch"; }

private:
    void ensure_write_file() {
        if (wfd_ >= 0) return;
        wfd_ = ::open(write_path().c_str(), O_CREAT | O_WRONLY | O_TRUNC,
                      0644);
        if (wfd_ < 0)
            throw EmulationError("cannot create scratch file " +
                                 write_path() + ": " + std::strerror(errno));
    }

    void ensure_read_file() {
        if (rfd_ >= 0) return;
        // Materialize a source once; reads wrap through it.
        int fd = ::open(read_path().c_str(), O_CREAT | O_WRONLY | O_TRUNC,
                        0644);
        if (fd < 0)
            throw EmulationError("cannot create read source " + read_path() +
                                 ": " + std::strerror(errno));
        bytes_t left = std::max<bytes_t>(kReadSourceSize, block_read_);
        while (left > 0) {
            bytes_t n = std::min<bytes_t>(buf_.size(), left);
            if (::write(fd, buf_.data(), n) != ssize_t(n)) {
                ::close(fd);
                throw EmulationError("cannot populate read source " +
                                     read_path());
            }
            left -= n;
        }
        ::fsync(fd);
        ::close(fd);
        rfd_ = ::open(read_path().c_str(), O_RDONLY);
        if (rfd_ < 0)
            throw EmulationError("cannot open read source " + read_path() +
                                 ": " + std::strerror(errno));
    }

    void close_all() {
        if (wfd_ >= 0) ::close(wfd_);
        if (rfd_ >= 0) ::close(rfd_);
        wfd_ = rfd_ = -1;
    }

    std::string dir_;
    bytes_t block_read_;
    bytes_t block_write_;
    std::vector<char> buf_;
    int wfd_ = -1;
    int rfd_ = -1;
};

// ---------------------------------------------------------------------------
// Memory: allocate and free touched regions, oldest-first, holding the
// balance across samples so the replayed RSS trajectory tracks the profile.

class MemoryAtom {
public:
    struct Result {
        bytes_t allocated = 0;
        bytes_t freed = 0;
        bytes_t held = 0;
    };

    explicit MemoryAtom(bytes_t block) : block_(block) {}
    ~MemoryAtom() { release_all(); }
    MemoryAtom(const MemoryAtom&) = delete;
    MemoryAtom& operator=(const MemoryAtom&) = delete;

    Result consume(bytes_t alloc_bytes, bytes_t free_bytes,
                   long sample_index = -1) {
        Result r;
        bytes_t left = alloc_bytes;
        while (left > 0) {
            bytes_t n = std::min<bytes_t>(block_, left);
            char* p = static_cast<char*>(std::malloc(n));
            if (!p)
                throw EmulationError(
                    "memory allocation of " + std::to_string(n) +
                    " bytes failed (held " + std::to_string(held_) + ")",
                    sample_index);
            // Touch one byte per page so the region is actually resident.
            for (bytes_t off = 0; off < n; off += 4096) p[off] = char(off);
            if (n > 0) p[n - 1] = 1;
            regions_.push_back({p, n});
            held_ += n;
            r.allocated += n;
            left -= n;
        }
        while (r.freed < free_bytes && !regions_.empty()) {
            Region reg = regions_.front();
            regions_.pop_front();
            std::free(reg.ptr);
            held_ -= reg.size;
            r.freed += reg.size;
        }
        r.held = held_;
        return r;
    }

    bytes_t held() const { return held_; }

    void release_all() {
        for (auto& reg : regions_) std::free(reg.ptr);
        regions_.clear();
        held_ = 0;
    }

private:
    struct Region {
        char* ptr;
        bytes_t size;
    };
    bytes_t block_;
    std::deque<Region> regions_;
    bytes_t held_ = 0;
};

// ---------------------------------------------------------------------------
// Network: stream framed bytes to an echo sink and request bytes back.
//
// Framing (a local convention; nothing upstream prescribes one): every frame
// is an 8-byte zero-padded decimal payload length followed by the payload.
// The payload's first byte routes it: 'D' data to discard, 'E' echo request
// whose next 8 bytes are the decimal byte count the sink must send back as
// one plain frame.

namespace netframe {

inline constexpr int kLenDigits = 8;
inline constexpr bytes_t kMaxFrame = 99'999'999;

inline bool read_exact(int fd, char* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
        ssize_t r = ::read(fd, dst + got, n - got);
        if (r <= 0) return false;
        got += std::size_t(r);
    }
    return true;
}

inline bool write_exact(int fd, const char* src, std::size_t n) {
    std::size_t put = 0;
    while (put < n) {
        ssize_t w = ::write(fd, src + put, n - put);
        if (w <= 0) return false;
        put += std::size_t(w);
    }
    return true;
}

inline void encode_len(bytes_t n, char* out) {
    for (int i = kLenDigits - 1; i >= 0; --i) {
        out[i] = char('0' + n % 10);
        n /= 10;
    }
}

inline std::optional<bytes_t> read_len(int fd) {
    char digits[kLenDigits];
    if (!read_exact(fd, digits, kLenDigits)) return std::nullopt;
    bytes_t n = 0;
    for (char c : digits) {
        if (c < '0' || c > '9') return std::nullopt;
        n = n * 10 + bytes_t(c - '0');
    }
    return n;
}

}  // namespace netframe

class NetworkAtom {
public:
    struct Result {
        bytes_t sent = 0;
        bytes_t received = 0;
    };

    NetworkAtom(std::string endpoint, bytes_t block)
        : endpoint_(std::move(endpoint)), block_(block) {
        if (block_ < 2) block_ = 2;  // room for the route byte
        if (block_ > netframe::kMaxFrame) block_ = netframe::kMaxFrame;
        buf_.resize(block_);
        for (std::size_t i = 0; i < buf_.size(); ++i)
            buf_[i] = char('a' + (i % 26));
    }

    ~NetworkAtom() { disconnect(); }
    NetworkAtom(const NetworkAtom&) = delete;
    NetworkAtom& operator=(const NetworkAtom&) = delete;

    // Sends send_bytes as data frames, then requests recv_bytes echoed back
    // and drains them in block-sized reads. One connection held across
    // samples. Zero work still exercises connect (errors must surface even
    // for empty samples on the wire).
    Result consume(bytes_t send_bytes, bytes_t recv_bytes) {
        connect_once();
        Result r;
        bytes_t left = send_bytes;
        while (left > 0) {
            bytes_t n = std::min<bytes_t>(block_, left);
            char hdr[netframe::kLenDigits];
            netframe::encode_len(n, hdr);
            buf_[0] = 'D';  // payload byte 0 routes; counts as data
            if (!netframe::write_exact(fd_, hdr, sizeof hdr) ||
                !netframe::write_exact(fd_, buf_.data(), n))
                throw EmulationError("network send failed after " +
                                     std::to_string(r.sent) + " bytes: " +
                                     std::strerror(errno));
            r.sent += n;
            left -= n;
        }
        if (recv_bytes > 0) {
            char hdr[netframe::kLenDigits];
            char req[1 + netframe::kLenDigits];
            netframe::encode_len(1 + netframe::kLenDigits, hdr);
            req[0] = 'E';
            netframe::encode_len(recv_bytes, req + 1);
            if (!netframe::write_exact(fd_, hdr, sizeof hdr) ||
                !netframe::write_exact(fd_, req, sizeof req))
                throw EmulationError("echo request failed: " +
                                     std::string(std::strerror(errno)));
            auto len = netframe::read_len(fd_);
            if (!len || *len != recv_bytes)
                throw EmulationError("echo sink returned a bad frame");
            bytes_t pending = *len;
            while (pending > 0) {
                bytes_t n = std::min<bytes_t>(block_, pending);
                ssize_t got = ::read(fd_, buf_.data(), n);
                if (got <= 0)
                    throw EmulationError(
                        "network receive failed after " +
                        std::to_string(r.received) + " bytes");
                r.received += bytes_t(got);
                pending -= bytes_t(got);
            }
        }
        return r;
    }

    void disconnect() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    void connect_once() {
        if (fd_ >= 0) return;
        auto colon = endpoint_.rfind(':');
        if (colon == std::string::npos)
            throw EmulationError("network endpoint must be host:port, got " +
                                 endpoint_);
        std::string host = endpoint_.substr(0, colon);
        std::string port = endpoint_.substr(colon + 1);

        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        int rc = getaddrinfo(host.c_str(), port.c_str(), &hints, &res);
        if (rc != 0)
            throw EmulationError("cannot resolve " + endpoint_ + ": " +
                                 gai_strerror(rc));
        int fd = -1;
        for (addrinfo* ai = res; ai; ai = ai->ai_next) {
            fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) continue;
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
            ::close(fd);
            fd = -1;
        }
        freeaddrinfo(res);
        if (fd < 0)
            throw EmulationError("cannot connect to echo sink at " +
                                 endpoint_ + ": " + std::strerror(errno));
        // Never hang an emulation on a dead peer.
        timeval tv{60, 0};
        setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
        fd_ = fd;
    }

    std::string endpoint_;
    bytes_t block_;
    std::vector<char> buf_;
    int fd_ = -1;
};

// Companion sink: accepts connections, discards data frames, answers echo
// requests. Serves until stop(); usable in-process for tests and exposed as
// a tool subcommand for manual runs.
class EchoSink {
public:
    struct Stats {
        count_t connections = 0;
        count_t frames = 0;
        bytes_t data_bytes = 0;
        bytes_t echoed_bytes = 0;
    };

    explicit EchoSink(std::uint16_t port = 0) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0)
            throw EmulationError(std::string("socket: ") +
                                 std::strerror(errno));
        int one = 1;
        setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr),
                   sizeof addr) != 0 ||
            ::listen(listen_fd_, 8) != 0) {
            int err = errno;
            ::close(listen_fd_);
            throw EmulationError(std::string("bind/listen: ") +
                                 std::strerror(err));
        }
        socklen_t len = sizeof addr;
        getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
    }

    ~EchoSink() { stop(); }
    EchoSink(const EchoSink&) = delete;
    EchoSink& operator=(const EchoSink&) = delete;

    std::uint16_t port() const { return port_; }
    std::string endpoint() const {
        return "127.0.0.1:" + std::to_string(port_);
    }

    void start() {
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    void stop() {
        bool was = false;
        if (!stopping_.compare_exchange_strong(was, true)) return;
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        if (accept_thread_.joinable()) accept_thread_.join();
        for (auto& t : handlers_)
            if (t.joinable()) t.join();
    }

    Stats stats() const {
        std::lock_guard<std::mutex> lock(mu_);
        return stats_;
    }

private:
    void accept_loop() {
        for (;;) {
            int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) return;  // closed by stop()
            {
                std::lock_guard<std::mutex> lock(mu_);
                ++stats_.connections;
                handlers_.emplace_back([this, fd] { serve(fd); });
            }
        }
    }

    void serve(int fd) {
        std::vector<char> buf(1 << 16);
        for (;;) {
            auto len = netframe::read_len(fd);
            if (!len) break;
            bytes_t n = *len;
            char route = 'D';
            if (n > 0) {
                if (!netframe::read_exact(fd, &route, 1)) break;
                bytes_t rest = n - 1;
                bool ok = true;
                std::array<char, netframe::kLenDigits> echo_req{};
                if (route == 'E' && rest >= netframe::kLenDigits) {
                    ok = netframe::read_exact(fd, echo_req.data(),
                                              netframe::kLenDigits);
                    rest -= netframe::kLenDigits;
                }
                while (ok && rest > 0) {
                    bytes_t take = std::min<bytes_t>(buf.size(), rest);
                    ok = netframe::read_exact(fd, buf.data(), take);
                    rest -= take;
                }
                if (!ok) break;
                if (route == 'E') {
                    bytes_t want = 0;
                    for (char c : echo_req) {
                        if (c < '0' || c > '9') { want = 0; break; }
                        want = want * 10 + bytes_t(c - '0');
                    }
                    if (!send_echo(fd, want, buf)) break;
                    std::lock_guard<std::mutex> lock(mu_);
                    ++stats_.frames;
                    stats_.echoed_bytes += want;
                    continue;
                }
            }
            std::lock_guard<std::mutex> lock(mu_);
            ++stats_.frames;
            stats_.data_bytes += n;
        }
        ::close(fd);
    }

    bool send_echo(int fd, bytes_t want, std::vector<char>& buf) {
        char hdr[netframe::kLenDigits];
        netframe::encode_len(want, hdr);
        if (!netframe::write_exact(fd, hdr, sizeof hdr)) return false;
        std::memset(buf.data(), 'e', buf.size());
        bytes_t left = want;
        while (left > 0) {
            bytes_t n = std::min<bytes_t>(buf.size(), left);
            if (!netframe::write_exact(fd, buf.data(), n)) return false;
            left -= n;
        }
        return true;
    }

    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::thread accept_thread_;
    std::vector<std::thread> handlers_;
    mutable std::mutex mu_;
    Stats stats_;
    std::atomic<bool> stopping_{false};
};

// ---------------------------------------------------------------------------
// Background stress: sustained synthetic load, fully cancelable.

struct StressConfig {
    double cpu_fraction = 0.0;  // busy share of each core, [0, 1]
    bytes_t mem_bytes = 0;      // held and touched for the duration
    double disk_rate = 0.0;     // bytes per second of paced writes
    std::string fs_target = ".";
    double duration = 0.0;  // seconds; 0 means until stop()
};

class Stress {
public:
    Stress() = default;
    ~Stress() { stop(); }
    Stress(const Stress&) = delete;
    Stress& operator=(const Stress&) = delete;

    void start(const StressConfig& cfg) {
        stop();
        cfg_ = cfg;
        if (cfg_.cpu_fraction < 0.0) cfg_.cpu_fraction = 0.0;
        if (cfg_.cpu_fraction > 1.0) cfg_.cpu_fraction = 1.0;
        stop_flag_ = false;
        deadline_ = cfg_.duration > 0.0
                        ? detail::monotonic_seconds() + cfg_.duration
                        : 0.0;

        if (cfg_.mem_bytes > 0) {
            ballast_.resize(cfg_.mem_bytes);
            for (bytes_t off = 0; off < cfg_.mem_bytes; off += 4096)
                ballast_[off] = char(off);
        }
        if (cfg_.cpu_fraction > 0.0) {
            int cores = online_cores();
            for (int c = 0; c < cores; ++c)
                threads_.emplace_back([this] { spin_loop(); });
        }
        if (cfg_.disk_rate > 0.0)
            threads_.emplace_back([this] { disk_loop(); });
        if (deadline_ > 0.0)
            threads_.emplace_back([this] { reaper_loop(); });
    }

    // Blocks until the configured duration has elapsed (or stop()).
    void wait() {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_flag_.load(); });
        lock.unlock();
        join_all();
    }

    void stop() {
        signal_stop();
        join_all();
        ballast_.clear();
        ballast_.shrink_to_fit();
    }

    bool running() const { return !threads_.empty() && !stop_flag_; }

private:
    void signal_stop() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_flag_ = true;
        }
        cv_.notify_all();
    }

    void join_all() {
        for (auto& t : threads_)
            if (t.joinable()) t.join();
        threads_.clear();
    }

    void reaper_loop() {
        std::unique_lock<std::mutex> lock(mu_);
        double now = detail::monotonic_seconds();
        while (!stop_flag_ && now < deadline_) {
            cv_.wait_for(lock,
                         std::chrono::duration<double>(deadline_ - now),
                         [this] { return stop_flag_.load(); });
            now = detail::monotonic_seconds();
        }
        stop_flag_ = true;
        cv_.notify_all();
    }

    void spin_loop() {
        // 100 ms duty periods: busy for fraction, sleep the remainder.
        const double period = 0.1;
        const double busy = period * cfg_.cpu_fraction;
        std::uint64_t x = 0x9e3779b97f4a7c15ull;
        while (!stop_flag_) {
            double start = detail::monotonic_seconds();
            while (detail::monotonic_seconds() - start < busy &&
                   !stop_flag_) {
                for (int i = 0; i < 5000; ++i) {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                }
            }
            sink_.store(x, std::memory_order_relaxed);
            double rest = period - (detail::monotonic_seconds() - start);
            if (rest > 0) {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait_for(lock, std::chrono::duration<double>(rest),
                             [this] { return stop_flag_.load(); });
            }
        }
    }

    void disk_loop() {
        std::string path = cfg_.fs_target + "/stress-" +
                           std::to_string(::getpid()) + ".dat";
        int fd = ::open(path.c_str(), O_CREAT | O_WRONLY | O_TRUNC, 0644);
        if (fd < 0) return;  // best effort by contract
        std::vector<char> block(64 * 1024, 'S');
        double debt = 0.0;
        double last = detail::monotonic_seconds();
        bytes_t filed = 0;
        while (!stop_flag_) {
            double now = detail::monotonic_seconds();
            debt += (now - last) * cfg_.disk_rate;
            last = now;
            while (debt >= double(block.size()) && !stop_flag_) {
                if (::write(fd, block.data(), block.size()) < 0) break;
                debt -= double(block.size());
                filed += block.size();
                if (filed >= (256ull << 20)) {  // bound on-disk footprint
                    ::fsync(fd);
                    if (::ftruncate(fd, 0) == 0) ::lseek(fd, 0, SEEK_SET);
                    filed = 0;
                }
            }
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait_for(lock, std::chrono::milliseconds(100),
                         [this] { return stop_flag_.load(); });
        }
        ::close(fd);
        ::unlink(path.c_str());
    }

    StressConfig cfg_;
    std::vector<std::thread> threads_;
    std::vector<char> ballast_;
    std::atomic<bool> stop_flag_{false};
    double deadline_ = 0.0;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::atomic<std::uint64_t> sink_{0};
};

}  // namespace synmirror
