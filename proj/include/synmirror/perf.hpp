#pragma once

// Hardware performance-counter session for one target process. Counters are
// opened as one scheduling group (instructions, cycles, both stall classes)
// so readings stay mutually consistent; when the kernel time-multiplexes the
// group, values are scaled by enabled/running and the reading is flagged.

#include <linux/perf_event.h>
#include <sys/ioctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <vector>

#include "synmirror/errors.hpp"
#include "synmirror/profile.hpp"

namespace synmirror {

struct PerfReading {
    count_t instructions = 0;        // cumulative since session open
    count_t cycles = 0;
    count_t stalled_frontend = 0;
    count_t stalled_backend = 0;
    bool scaled = false;             // group was time-multiplexed
    bool valid = false;
};

class PerfSession {
public:
    PerfSession() = default;

    // Counters attach to an existing process and follow it across CPUs.
    explicit PerfSession(pid_t pid) {
        leader_ = open_event(PERF_COUNT_HW_CPU_CYCLES, pid, -1);
        if (leader_ < 0)
            throw CapabilityError("hardware counters unavailable: " +
                                  std::string(std::strerror(errno)));
        slots_ = 1;
        int instr = open_event(PERF_COUNT_HW_INSTRUCTIONS, pid, leader_);
        if (instr < 0) {
            ::close(leader_);
            leader_ = -1;
            throw CapabilityError("instruction counter unavailable: " +
                                  std::string(std::strerror(errno)));
        }
        instructions_slot_ = slots_++;
        members_.push_back(instr);

        // Stall counters are frequently unimplemented; absent ones simply
        // stay zero in every reading.
        int fe = open_event(PERF_COUNT_HW_STALLED_CYCLES_FRONTEND, pid, leader_);
        if (fe >= 0) {
            frontend_slot_ = slots_++;
            members_.push_back(fe);
        }
        int be = open_event(PERF_COUNT_HW_STALLED_CYCLES_BACKEND, pid, leader_);
        if (be >= 0) {
            backend_slot_ = slots_++;
            members_.push_back(be);
        }
        ::ioctl(leader_, PERF_EVENT_IOC_ENABLE, PERF_IOC_FLAG_GROUP);
    }

    PerfSession(PerfSession&& other) noexcept { *this = std::move(other); }
    PerfSession& operator=(PerfSession&& other) noexcept {
        if (this != &other) {
            close_all();
            leader_ = other.leader_;
            members_ = std::move(other.members_);
            slots_ = other.slots_;
            instructions_slot_ = other.instructions_slot_;
            frontend_slot_ = other.frontend_slot_;
            backend_slot_ = other.backend_slot_;
            other.leader_ = -1;
            other.members_.clear();
        }
        return *this;
    }
    PerfSession(const PerfSession&) = delete;
    PerfSession& operator=(const PerfSession&) = delete;
    ~PerfSession() { close_all(); }

    bool open() const { return leader_ >= 0; }
    bool has_stall_counters() const { return frontend_slot_ > 0 || backend_slot_ > 0; }

    PerfReading read() const {
        PerfReading r;
        if (leader_ < 0) return r;
        // Group read layout: nr, time_enabled, time_running, value[nr].
        std::vector<std::uint64_t> buf(3 + static_cast<std::size_t>(slots_));
        ssize_t n = ::read(leader_, buf.data(), buf.size() * sizeof(std::uint64_t));
        if (n < static_cast<ssize_t>((3 + 1) * sizeof(std::uint64_t))) return r;
        std::uint64_t nr = buf[0], enabled = buf[1], running = buf[2];
        if (nr < 1 || running == 0) return r;

        double scale = 1.0;
        if (running < enabled) {
            scale = static_cast<double>(enabled) / static_cast<double>(running);
            r.scaled = true;
        }
        auto value = [&](int slot) -> count_t {
            if (slot < 0 || static_cast<std::uint64_t>(slot) >= nr) return 0;
            return static_cast<count_t>(static_cast<double>(buf[3 + slot]) * scale);
        };
        r.cycles = value(0);
        r.instructions = value(instructions_slot_);
        r.stalled_frontend = value(frontend_slot_);
        r.stalled_backend = value(backend_slot_);
        r.valid = true;
        return r;
    }

    // Cheap host probe: can this build open a counter at all?
    static bool available() {
        errno = 0;
        perf_event_attr attr{};
        attr.size = sizeof(attr);
        attr.type = PERF_TYPE_HARDWARE;
        attr.config = PERF_COUNT_HW_CPU_CYCLES;
        attr.disabled = 1;
        attr.exclude_hv = 1;
        long fd = ::syscall(SYS_perf_event_open, &attr, 0, -1, -1, PERF_FLAG_FD_CLOEXEC);
        if (fd < 0 && (errno == EACCES || errno == EPERM)) {
            attr.exclude_kernel = 1;
            fd = ::syscall(SYS_perf_event_open, &attr, 0, -1, -1, PERF_FLAG_FD_CLOEXEC);
        }
        if (fd < 0) return false;
        ::close(static_cast<int>(fd));
        return true;
    }

private:
    static int open_event(std::uint64_t config, pid_t pid, int group_fd) {
        perf_event_attr attr{};
        attr.size = sizeof(attr);
        attr.type = PERF_TYPE_HARDWARE;
        attr.config = config;
        attr.disabled = group_fd == -1 ? 1 : 0;
        attr.exclude_hv = 1;
        attr.read_format = PERF_FORMAT_GROUP | PERF_FORMAT_TOTAL_TIME_ENABLED |
                           PERF_FORMAT_TOTAL_TIME_RUNNING;
        long fd = ::syscall(SYS_perf_event_open, &attr, pid, -1, group_fd,
                            PERF_FLAG_FD_CLOEXEC);
        if (fd < 0 && (errno == EACCES || errno == EPERM)) {
            // Locked-down paranoid level: retry user-space-only counting.
            attr.exclude_kernel = 1;
            fd = ::syscall(SYS_perf_event_open, &attr, pid, -1, group_fd,
                           PERF_FLAG_FD_CLOEXEC);
        }
        return static_cast<int>(fd);
    }

    void close_all() {
        for (int fd : members_) ::close(fd);
        members_.clear();
        if (leader_ >= 0) ::close(leader_);
        leader_ = -1;
    }

    int leader_ = -1;
    std::vector<int> members_;
    int slots_ = 0;
    int instructions_slot_ = -1;
    int frontend_slot_ = -1;
    int backend_slot_ = -1;
};

}  // namespace synmirror
