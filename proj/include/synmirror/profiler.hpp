#pragma once

// Black-box profiler. One supervisor spawns the target command and owns its
// lifetime; watcher plugins sample OS counters on a fixed delay and never
// touch the child beyond reading its counters. No disk is written while the
// child runs.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "synmirror/errors.hpp"
#include "synmirror/perf.hpp"
#include "synmirror/profile.hpp"
#include "synmirror/system.hpp"

extern "C" char** environ;

namespace synmirror {

struct ProfilerConfig {
    double sample_period = 1.0;  // seconds, floor kMinSamplePeriod
    bool fallback_counters = false;
    std::vector<std::string> watchers = {"cpu", "mem", "storage"};
    std::map<std::string, std::string> tags;
    // Optional child stream redirects (paths). Launch plumbing only; the
    // child's environment is never modified.
    std::string child_stdout;
    std::string child_stderr;

    // SYNMIRROR_SAMPLE_PERIOD and SYNMIRROR_FALLBACK seed the defaults.
    static ProfilerConfig from_env() {
        ProfilerConfig c;
        if (const char* p = std::getenv("SYNMIRROR_SAMPLE_PERIOD")) {
            char* end = nullptr;
            double v = std::strtod(p, &end);
            if (end != p && v > 0) c.sample_period = v;
        }
        if (const char* f = std::getenv("SYNMIRROR_FALLBACK")) {
            c.fallback_counters = (f[0] == '1' || f[0] == 'y' || f[0] == 't');
        }
        return c;
    }
};

struct WatcherContext {
    pid_t pid = -1;
    SystemInfo system;
    const ProfilerConfig* config = nullptr;
};

// Four-phase plugin: pre_process once, sample per period, post_process once,
// then finalize with read access to every watcher's raw output.
class Watcher {
public:
    virtual ~Watcher() = default;
    virtual std::string name() const = 0;
    virtual void pre_process(const WatcherContext& ctx) = 0;
    virtual void sample(double now) = 0;
    virtual void post_process() {}
    virtual void finalize(const std::vector<const Watcher*>& all) { (void)all; }

    const std::string& status() const { return status_; }
    void set_status(std::string s) { status_ = std::move(s); }

protected:
    static count_t clamped_delta(count_t prev, count_t cur, std::uint32_t& flags) {
        if (cur < prev) {
            flags |= kSampleClamped;
            return 0;
        }
        return cur - prev;
    }

    std::string status_ = "enabled";
};

// ---------------------------------------------------------------------------
// Built-in watchers
// ---------------------------------------------------------------------------

class CpuHardwareWatcher : public Watcher {
public:
    std::string name() const override { return "cpu"; }

    void pre_process(const WatcherContext& ctx) override {
        session_ = PerfSession(ctx.pid);
        set_status(session_.has_stall_counters() ? "hardware"
                                                 : "hardware (no stall counters)");
    }

    void sample(double now) override {
        CpuSample s;
        s.t = now;
        PerfReading r = session_.read();
        if (!r.valid) {
            s.flags |= kSampleGap;
            series_.push_back(s);
            return;
        }
        if (r.scaled) s.flags |= kSampleScaled;
        s.instructions = clamped_delta(prev_.instructions, r.instructions, s.flags);
        s.cycles_used = clamped_delta(prev_.cycles, r.cycles, s.flags);
        s.cycles_stalled_frontend =
            clamped_delta(prev_.stalled_frontend, r.stalled_frontend, s.flags);
        s.cycles_stalled_backend =
            clamped_delta(prev_.stalled_backend, r.stalled_backend, s.flags);
        prev_ = r;
        series_.push_back(s);
    }

    const std::vector<CpuSample>& series() const { return series_; }
    std::vector<CpuSample> take_series() { return std::move(series_); }

private:
    PerfSession session_;
    PerfReading prev_;
    std::vector<CpuSample> series_;
};

// Estimates cycles as consumed CPU time times the nominal maximum frequency.
// Instructions and stall counts are not observable this way and stay zero.
class CpuEstimatedWatcher : public Watcher {
public:
    std::string name() const override { return "cpu"; }

    void pre_process(const WatcherContext& ctx) override {
        pid_ = ctx.pid;
        freq_ = ctx.system.max_cpu_freq;
        if (freq_ == 0)
            throw CapabilityError("cannot estimate cycles: unknown max CPU frequency");
        set_status("estimated");
    }

    void sample(double now) override {
        CpuSample s;
        s.t = now;
        auto cpu = read_proc_cpu_seconds(pid_);
        if (!cpu) {
            s.flags |= kSampleGap;
            series_.push_back(s);
            return;
        }
        double delta = *cpu - prev_cpu_;
        if (delta < 0) {
            delta = 0;
            s.flags |= kSampleClamped;
        }
        s.cycles_used = static_cast<count_t>(delta * static_cast<double>(freq_));
        prev_cpu_ = *cpu;
        series_.push_back(s);
    }

    const std::vector<CpuSample>& series() const { return series_; }
    std::vector<CpuSample> take_series() { return std::move(series_); }

private:
    pid_t pid_ = -1;
    std::uint64_t freq_ = 0;
    double prev_cpu_ = 0.0;
    std::vector<CpuSample> series_;
};

class MemWatcher : public Watcher {
public:
    std::string name() const override { return "mem"; }

    void pre_process(const WatcherContext& ctx) override { pid_ = ctx.pid; }

    void sample(double now) override {
        auto mem = read_proc_mem(pid_);
        // Exited between checks: the kernel no longer reports sizes; the
        // final sample is dropped rather than recorded as zero.
        if (!mem) return;
        MemSample s;
        s.t = now;
        s.rss = mem->rss;
        s.peak = mem->peak;
        if (mem->rss >= prev_rss_)
            s.allocated = mem->rss - prev_rss_;
        else
            s.freed = prev_rss_ - mem->rss;
        prev_rss_ = mem->rss;
        series_.push_back(s);
    }

    const std::vector<MemSample>& series() const { return series_; }
    std::vector<MemSample> take_series() { return std::move(series_); }

private:
    pid_t pid_ = -1;
    bytes_t prev_rss_ = 0;
    std::vector<MemSample> series_;
};

class StorageWatcher : public Watcher {
public:
    std::string name() const override { return "storage"; }

    void pre_process(const WatcherContext& ctx) override {
        pid_ = ctx.pid;
        if (!read_proc_io(ctx.pid))
            throw CapabilityError("per-process I/O accounting unreadable");
    }

    void sample(double now) override {
        auto io = read_proc_io(pid_);
        if (!io) return;
        StorageSample s;
        s.t = now;
        s.bytes_read = clamped_delta(prev_.read_bytes, io->read_bytes, s.flags);
        s.bytes_written = clamped_delta(prev_.write_bytes, io->write_bytes, s.flags);
        prev_ = *io;
        series_.push_back(s);
    }

    const std::vector<StorageSample>& series() const { return series_; }
    std::vector<StorageSample> take_series() { return std::move(series_); }

private:
    pid_t pid_ = -1;
    ProcIo prev_;
    std::vector<StorageSample> series_;
};

// ---------------------------------------------------------------------------
// Sampling loop
// ---------------------------------------------------------------------------

// Fixed-delay scheduler: first sample immediately, then sleep(period) after
// each sample, so a slow sample() stretches the spacing instead of bunching
// later samples. request_final lets the in-flight period complete, takes one
// more sample, then stops; request_stop ends the loop without another
// sample. post_process always runs, even for a loop stopped at zero samples.
class WatcherLoop {
public:
    void start(Watcher& w, double period, std::chrono::steady_clock::time_point t0) {
        thread_ = std::thread([this, &w, period, t0] { run(w, period, t0); });
    }

    void request_final() {
        std::lock_guard<std::mutex> lock(mu_);
        finish_ = true;
    }

    void request_stop() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
    }

    void join() {
        if (thread_.joinable()) thread_.join();
    }

private:
    void run(Watcher& w, double period, std::chrono::steady_clock::time_point t0) {
        std::unique_lock<std::mutex> lock(mu_);
        while (!stop_) {
            const bool is_final = finish_;
            lock.unlock();
            double now = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
            try {
                w.sample(now);
            } catch (const std::exception& e) {
                w.set_status("disabled: " + std::string(e.what()));
                lock.lock();
                break;
            }
            lock.lock();
            if (is_final) break;
            cv_.wait_for(lock, std::chrono::duration<double>(period),
                         [this] { return stop_; });
        }
        lock.unlock();
        try {
            w.post_process();
        } catch (const std::exception& e) {
            w.set_status("disabled: " + std::string(e.what()));
        }
    }

    std::thread thread_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
    bool finish_ = false;
};

// ---------------------------------------------------------------------------
// Supervisor
// ---------------------------------------------------------------------------

class Profiler {
public:
    explicit Profiler(ProfilerConfig config) : config_(std::move(config)) {}

    // Single use; a second call throws.
    Profile profile(const std::vector<std::string>& argv) {
        if (used_) throw Error("profiler instance is single-use");
        used_ = true;
        if (argv.empty()) throw Error("empty command");
        if (config_.sample_period < kMinSamplePeriod)
            throw Error("sample period below the " + std::to_string(kMinSamplePeriod) +
                        " s floor");
        if (config_.watchers.empty()) throw Error("no watchers enabled");

        const SystemInfo system = detect_system();

        // Counter-source decision happens before spawning so a capability
        // error never leaves an orphan child.
        CounterSource source = CounterSource::hardware;
        if (wants("cpu") && !PerfSession::available()) {
            if (!config_.fallback_counters)
                throw CapabilityError(
                    "hardware counters unavailable on this host; enable estimated "
                    "cycles with --fallback-counters or SYNMIRROR_FALLBACK=1");
            source = CounterSource::estimated;
        }

        const pid_t pid = spawn(argv);
        const auto t0 = std::chrono::steady_clock::now();
        const double start_time =
            std::chrono::duration<double>(
                std::chrono::system_clock::now().time_since_epoch())
                .count();

        Profile p;
        try {
            p = supervise(argv, pid, t0, system, source);
        } catch (...) {
            ::kill(pid, SIGKILL);
            int status = 0;
            while (::waitpid(pid, &status, 0) == -1 && errno == EINTR) {
            }
            throw;
        }
        p.start_time = start_time;
        return p;
    }

private:
    bool wants(const std::string& name) const {
        for (const auto& w : config_.watchers)
            if (w == name) return true;
        return false;
    }

    pid_t spawn(const std::vector<std::string>& argv) const {
        std::vector<char*> cargv;
        cargv.reserve(argv.size() + 1);
        for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
        cargv.push_back(nullptr);

        posix_spawn_file_actions_t actions;
        posix_spawn_file_actions_init(&actions);
        if (!config_.child_stdout.empty())
            posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO,
                                             config_.child_stdout.c_str(),
                                             O_CREAT | O_WRONLY | O_TRUNC, 0644);
        if (!config_.child_stderr.empty())
            posix_spawn_file_actions_addopen(&actions, STDERR_FILENO,
                                             config_.child_stderr.c_str(),
                                             O_CREAT | O_WRONLY | O_TRUNC, 0644);

        posix_spawnattr_t attr;
        posix_spawnattr_init(&attr);
        // Own process group; the only deliberate difference from a plain
        // fork/exec of the target.
        posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
        posix_spawnattr_setpgroup(&attr, 0);

        pid_t pid = -1;
        int rc = ::posix_spawnp(&pid, cargv[0], &actions, &attr, cargv.data(), environ);
        posix_spawn_file_actions_destroy(&actions);
        posix_spawnattr_destroy(&attr);
        if (rc != 0)
            throw LaunchError("cannot launch '" + argv[0] + "': " + std::strerror(rc));
        return pid;
    }

    Profile supervise(const std::vector<std::string>& argv, pid_t pid,
                      std::chrono::steady_clock::time_point t0, const SystemInfo& system,
                      CounterSource source) {
        WatcherContext ctx{pid, system, &config_};

        std::vector<std::unique_ptr<Watcher>> watchers;
        for (const auto& name : config_.watchers) {
            if (name == "cpu") {
                if (source == CounterSource::hardware)
                    watchers.push_back(std::make_unique<CpuHardwareWatcher>());
                else
                    watchers.push_back(std::make_unique<CpuEstimatedWatcher>());
            } else if (name == "mem") {
                watchers.push_back(std::make_unique<MemWatcher>());
            } else if (name == "storage") {
                watchers.push_back(std::make_unique<StorageWatcher>());
            } else {
                throw Error("unknown watcher: " + name);
            }
        }

        std::vector<bool> active(watchers.size(), false);
        for (std::size_t i = 0; i < watchers.size(); ++i) {
            try {
                watchers[i]->pre_process(ctx);
                active[i] = true;
            } catch (const std::exception& e) {
                // A dead-on-arrival child or missing counter source disables
                // the watcher; the run itself continues.
                watchers[i]->set_status("disabled: " + std::string(e.what()));
            }
        }

        std::vector<std::unique_ptr<WatcherLoop>> loops(watchers.size());
        for (std::size_t i = 0; i < watchers.size(); ++i) {
            if (!active[i]) continue;
            loops[i] = std::make_unique<WatcherLoop>();
            loops[i]->start(*watchers[i], config_.sample_period, t0);
        }

        // Observe exit without reaping: the zombie keeps its procfs entries
        // alive for the final samples.
        siginfo_t info{};
        while (::waitid(P_PID, pid, &info, WEXITED | WNOWAIT) == -1 && errno == EINTR) {
        }
        const double runtime =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        for (auto& loop : loops)
            if (loop) loop->request_final();
        for (auto& loop : loops)
            if (loop) loop->join();

        int status = 0;
        rusage ru{};
        while (::wait4(pid, &status, 0, &ru) == -1 && errno == EINTR) {
        }

        std::vector<const Watcher*> all;
        all.reserve(watchers.size());
        for (const auto& w : watchers) all.push_back(w.get());
        for (auto& w : watchers) w->finalize(all);

        Profile p;
        p.command = join(argv);
        p.tags = config_.tags;
        p.system = system;
        p.sample_period = config_.sample_period;
        p.runtime = runtime;
        p.counter_source = source;

        p.accounting.user_time = timeval_seconds(ru.ru_utime);
        p.accounting.system_time = timeval_seconds(ru.ru_stime);
        p.accounting.peak_rss = static_cast<bytes_t>(ru.ru_maxrss) * 1024;
        if (WIFEXITED(status)) {
            p.accounting.exit_code = WEXITSTATUS(status);
        } else if (WIFSIGNALED(status)) {
            p.accounting.term_signal = WTERMSIG(status);
            p.accounting.exit_code = 128 + WTERMSIG(status);
        }

        for (auto& w : watchers) {
            p.watchers[w->name()] = w->status();
            if (auto* hw = dynamic_cast<CpuHardwareWatcher*>(w.get()))
                p.cpu_series = hw->take_series();
            else if (auto* est = dynamic_cast<CpuEstimatedWatcher*>(w.get()))
                p.cpu_series = est->take_series();
            else if (auto* mem = dynamic_cast<MemWatcher*>(w.get()))
                p.mem_series = mem->take_series();
            else if (auto* sto = dynamic_cast<StorageWatcher*>(w.get()))
                p.storage_series = sto->take_series();
        }

        p.totals = integrate_totals(p);
        p.derived = compute_derived(p);
        return p;
    }

    static std::string join(const std::vector<std::string>& argv) {
        std::string out;
        for (const auto& a : argv) {
            if (!out.empty()) out += ' ';
            out += a;
        }
        return out;
    }

    static double timeval_seconds(const timeval& tv) {
        return static_cast<double>(tv.tv_sec) + static_cast<double>(tv.tv_usec) * 1e-6;
    }

    ProfilerConfig config_;
    bool used_ = false;
};

}  // namespace synmirror
