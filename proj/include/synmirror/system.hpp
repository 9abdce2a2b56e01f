#pragma once

// Host and per-process introspection. Everything here reads procfs/sysfs or
// POSIX APIs; failures surface as empty optionals so callers choose the
// fallback.

#include <sys/types.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "synmirror/profile.hpp"

namespace synmirror {

namespace detail {

inline std::optional<std::string> slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) return std::nullopt;
    return ss.str();
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n\"");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n\"");
    return s.substr(b, e - b + 1);
}

// Value of "key: val" or "key=val" style lines; first match wins.
inline std::optional<std::string> line_value(const std::string& text,
                                             const std::string& key,
                                             char sep = ':') {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto pos = line.find(sep);
        if (pos == std::string::npos) continue;
        if (trim(line.substr(0, pos)) == key) return trim(line.substr(pos + 1));
    }
    return std::nullopt;
}

// Sizes like "48K", "2048K", "36M" as used by sysfs cache descriptions.
inline std::optional<bytes_t> parse_size_suffix(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t idx = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &idx);
    } catch (...) {
        return std::nullopt;
    }
    while (idx < s.size() && std::isspace(static_cast<unsigned char>(s[idx]))) ++idx;
    if (idx < s.size()) {
        switch (std::toupper(static_cast<unsigned char>(s[idx]))) {
            case 'K': v <<= 10; break;
            case 'M': v <<= 20; break;
            case 'G': v <<= 30; break;
            default: break;
        }
    }
    return v;
}

}  // namespace detail

inline int online_cores() {
    long n = ::sysconf(_SC_NPROCESSORS_ONLN);
    return n > 0 ? static_cast<int>(n) : 1;
}

// Nominal maximum frequency in Hz, or 0 when undetectable. Preference order:
// cpufreq sysfs (kHz), /proc/cpuinfo "cpu MHz", a "@ x.xxGHz" model-name tag.
inline std::uint64_t detect_max_cpu_freq() {
    if (auto t = detail::slurp("/sys/devices/system/cpu/cpu0/cpufreq/cpuinfo_max_freq")) {
        try {
            unsigned long long khz = std::stoull(*t);
            if (khz > 0) return khz * 1000ULL;
        } catch (...) {
        }
    }
    auto cpuinfo = detail::slurp("/proc/cpuinfo");
    if (!cpuinfo) return 0;
    double best_mhz = 0.0;
    std::istringstream in(*cpuinfo);
    std::string line;
    while (std::getline(in, line)) {
        auto pos = line.find(':');
        if (pos == std::string::npos) continue;
        std::string key = detail::trim(line.substr(0, pos));
        std::string val = detail::trim(line.substr(pos + 1));
        if (key == "cpu MHz") {
            try {
                best_mhz = std::max(best_mhz, std::stod(val));
            } catch (...) {
            }
        } else if (key == "model name" && best_mhz == 0.0) {
            auto at = val.find('@');
            auto ghz = val.find("GHz");
            if (at != std::string::npos && ghz != std::string::npos && ghz > at) {
                try {
                    best_mhz = std::stod(val.substr(at + 1, ghz - at - 1)) * 1000.0;
                } catch (...) {
                }
            }
        }
    }
    return static_cast<std::uint64_t>(best_mhz * 1e6);
}

inline bytes_t detect_total_memory() {
    long pages = ::sysconf(_SC_PHYS_PAGES);
    long page = ::sysconf(_SC_PAGESIZE);
    if (pages <= 0 || page <= 0) return 0;
    return static_cast<bytes_t>(pages) * static_cast<bytes_t>(page);
}

inline std::string detect_host_id() {
    if (auto t = detail::slurp("/etc/machine-id")) {
        std::string id = detail::trim(*t);
        if (!id.empty()) return id;
    }
    char buf[256] = {};
    if (::gethostname(buf, sizeof(buf) - 1) == 0 && buf[0]) return buf;
    return "unknown-host";
}

inline std::string detect_os_id() {
    if (auto t = detail::slurp("/etc/os-release")) {
        auto id = detail::line_value(*t, "ID", '=');
        auto ver = detail::line_value(*t, "VERSION_ID", '=');
        if (id) return ver ? *id + "-" + *ver : *id;
    }
    utsname u{};
    if (::uname(&u) == 0) return std::string(u.sysname) + "-" + u.release;
    return "unknown-os";
}

inline SystemInfo detect_system() {
    SystemInfo s;
    s.core_count = online_cores();
    s.max_cpu_freq = detect_max_cpu_freq();
    s.total_memory = detect_total_memory();
    s.host_id = detect_host_id();
    s.os_id = detect_os_id();
    return s;
}

// ---------------------------------------------------------------------------
// Per-process counters
// ---------------------------------------------------------------------------

struct ProcMem {
    bytes_t rss = 0;   // VmRSS
    bytes_t peak = 0;  // VmHWM
};

// Absent for zombies: the kernel drops the Vm* lines once the process has
// exited, even though the status file itself remains readable.
inline std::optional<ProcMem> read_proc_mem(pid_t pid) {
    auto t = detail::slurp("/proc/" + std::to_string(pid) + "/status");
    if (!t) return std::nullopt;
    auto rss = detail::line_value(*t, "VmRSS");
    auto hwm = detail::line_value(*t, "VmHWM");
    if (!rss || !hwm) return std::nullopt;
    auto r = detail::parse_size_suffix(*rss);
    auto h = detail::parse_size_suffix(*hwm);
    if (!r || !h) return std::nullopt;
    return ProcMem{*r, *h};
}

struct ProcIo {
    bytes_t read_bytes = 0;   // storage-layer reads attributed to the process
    bytes_t write_bytes = 0;
};

inline std::optional<ProcIo> read_proc_io(pid_t pid) {
    auto t = detail::slurp("/proc/" + std::to_string(pid) + "/io");
    if (!t) return std::nullopt;
    auto r = detail::line_value(*t, "read_bytes");
    auto w = detail::line_value(*t, "write_bytes");
    if (!r || !w) return std::nullopt;
    try {
        return ProcIo{std::stoull(*r), std::stoull(*w)};
    } catch (...) {
        return std::nullopt;
    }
}

// utime + stime of the process, in seconds.
inline std::optional<double> read_proc_cpu_seconds(pid_t pid) {
    auto t = detail::slurp("/proc/" + std::to_string(pid) + "/stat");
    if (!t) return std::nullopt;
    // comm is parenthesized and may itself contain spaces or parens; fields
    // resume after the last ')'.
    auto close = t->rfind(')');
    if (close == std::string::npos) return std::nullopt;
    std::istringstream in(t->substr(close + 1));
    std::string field;
    // state(3) .. cutime(16): utime is field 14, stime 15.
    unsigned long long utime = 0, stime = 0;
    for (int i = 3; i <= 15 && (in >> field); ++i) {
        if (i == 14) {
            try { utime = std::stoull(field); } catch (...) { return std::nullopt; }
        } else if (i == 15) {
            try { stime = std::stoull(field); } catch (...) { return std::nullopt; }
        }
    }
    long hz = ::sysconf(_SC_CLK_TCK);
    if (hz <= 0) hz = 100;
    return static_cast<double>(utime + stime) / static_cast<double>(hz);
}

// ---------------------------------------------------------------------------
// Cache geometry (used to size compute kernels)
// ---------------------------------------------------------------------------

namespace detail {

inline std::optional<bytes_t> sysfs_cache(int target_level, bool data_ok,
                                          bool pick_largest) {
    std::optional<bytes_t> best;
    for (int idx = 0; idx < 10; ++idx) {
        std::string base = "/sys/devices/system/cpu/cpu0/cache/index" +
                           std::to_string(idx) + "/";
        auto level = slurp(base + "level");
        auto type = slurp(base + "type");
        auto size = slurp(base + "size");
        if (!level || !type || !size) continue;
        int lv = 0;
        try { lv = std::stoi(*level); } catch (...) { continue; }
        std::string ty = trim(*type);
        bool usable = (ty == "Unified") || (data_ok && ty == "Data");
        if (!usable) continue;
        if (!pick_largest && lv != target_level) continue;
        auto sz = parse_size_suffix(trim(*size));
        if (!sz) continue;
        if (pick_largest) {
            if (!best || *sz > *best) best = *sz;
        } else {
            return *sz;
        }
    }
    return best;
}

}  // namespace detail

inline bytes_t l1d_cache_size() {
    if (auto s = detail::sysfs_cache(1, true, false)) return *s;
    long s = ::sysconf(_SC_LEVEL1_DCACHE_SIZE);
    if (s > 0) return static_cast<bytes_t>(s);
    return 32ULL << 10;
}

inline bytes_t llc_cache_size() {
    if (auto s = detail::sysfs_cache(0, false, true)) return *s;
    for (int name : {_SC_LEVEL3_CACHE_SIZE, _SC_LEVEL2_CACHE_SIZE}) {
        long s = ::sysconf(name);
        if (s > 0) return static_cast<bytes_t>(s);
    }
    return 8ULL << 20;
}

}  // namespace synmirror
