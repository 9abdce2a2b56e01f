#pragma once

// The emulation driver. Replays a recorded profile by merging its series
// into per-sample resource quantities and feeding those, strictly in order,
// to concurrent atoms: within one sample every nonzero resource starts at
// the same instant and the driver waits for all of them before advancing.
// Recorded timing is deliberately ignored; only quantities and their order
// survive the trip.

#include <sys/types.h>
#include <unistd.h>

#include <chrono>
#include <exception>
#include <iostream>
#include <latch>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "synmirror/atoms.hpp"
#include "synmirror/errors.hpp"
#include "synmirror/kernels.hpp"
#include "synmirror/profile.hpp"
#include "synmirror/store.hpp"
#include "synmirror/system.hpp"

namespace synmirror {

struct TaskReport {
    std::string atom;  // compute | memory | storage
    double start = 0.0;  // seconds since emulation start; tasks of one
    double end = 0.0;    // sample share their release instant as start
    count_t cycles = 0;
    bytes_t bytes_written = 0;
    bytes_t bytes_read = 0;
    bytes_t mem_allocated = 0;
    bytes_t mem_freed = 0;
};

struct SampleReport {
    std::size_t index = 0;
    double start = 0.0;
    double end = 0.0;
    std::vector<TaskReport> tasks;
};

struct EmulationReport {
    std::string run_id;
    double tx = 0.0;  // end of last sample minus start of first
    double sample_period = 0.0;
    std::string profile_command;
    std::string counter_source;  // of the replayed profile
    AtomConfig config;
    std::optional<CalibrationEntry> calibration;  // when compute ran
    std::vector<SampleReport> samples;

    // Consumed grand totals across all samples.
    count_t cycles = 0;
    bytes_t bytes_written = 0;
    bytes_t bytes_read = 0;
    bytes_t mem_allocated = 0;
    bytes_t mem_freed = 0;
    count_t write_requests = 0;
    count_t read_requests = 0;
};

namespace detail {

inline std::string make_run_id() {
    auto now = std::chrono::system_clock::now().time_since_epoch();
    auto us =
        std::chrono::duration_cast<std::chrono::microseconds>(now).count();
    return "run-" + std::to_string(us) + "-" + std::to_string(::getpid());
}

inline std::optional<bytes_t> available_memory() {
    auto text = slurp("/proc/meminfo");
    if (!text) return std::nullopt;
    auto v = line_value(*text, "MemAvailable");
    if (!v) return std::nullopt;
    return parse_size_suffix(*v);
}

}  // namespace detail

class Emulator {
public:
    // calibration_root: directory holding calibration.json (usually the
    // profile store root). diag: stream for warnings and progress notes.
    Emulator(AtomConfig config, std::string calibration_root,
             std::ostream* diag = nullptr)
        : cfg_(std::move(config)),
          calibration_root_(std::move(calibration_root)),
          diag_(diag) {
        cfg_.validate();
    }

    // Replays the profile and returns the full report. Atoms are created
    // fresh per call; held memory and scratch files never leak across runs.
    EmulationReport emulate(const Profile& profile) {
        std::vector<MergedSample> plan = merge_series(profile);

        EmulationReport report;
        report.run_id = detail::make_run_id();
        report.sample_period = profile.sample_period;
        report.profile_command = profile.command;
        report.counter_source = to_string(profile.counter_source);
        report.config = cfg_;

        if (profile.counter_source == CounterSource::estimated)
            note("cycle counts in this profile are estimates derived from "
                 "CPU time; replay fidelity is bounded by that estimate");

        bool needs_compute = false, needs_storage = false,
             needs_memory = false;
        for (const auto& s : plan) {
            needs_compute |= s.cycles_used > 0;
            needs_storage |= s.bytes_read > 0 || s.bytes_written > 0;
            needs_memory |= s.mem_allocated > 0 || s.mem_freed > 0;
        }

        preflight_memory(plan);

        // Everything below is lazy so an empty profile stays cheap: no
        // calibration run, no scratch directory, no kernel construction.
        std::optional<CalibrationEntry> cal;
        std::optional<ComputeAtom> compute;
        std::optional<StorageAtom> storage;
        std::optional<MemoryAtom> memory;
        std::string scratch_dir;

        if (needs_compute) {
            cal = ensure_calibration();
            report.calibration = cal;
            compute.emplace(cfg_, *cal, sys_);
        }
        if (needs_storage) {
            scratch_dir = cfg_.fs_target + "/" + report.run_id;
            storage.emplace(scratch_dir, cfg_.io_block_size_read,
                            cfg_.io_block_size_write);
        }
        if (needs_memory) memory.emplace(cfg_.mem_block_size);

        const double cap = std::max(60.0, 100.0 * profile.sample_period);
        const auto emu_t0 = std::chrono::steady_clock::now();
        auto since_t0 = [&emu_t0] {
            return std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - emu_t0)
                .count();
        };

        bool failed = false;
        try {
            for (const auto& s : plan) {
                SampleReport sr = replay_sample(
                    s, cap, since_t0, compute, storage, memory);
                for (const auto& t : sr.tasks) {
                    report.cycles += t.cycles;
                    report.bytes_written += t.bytes_written;
                    report.bytes_read += t.bytes_read;
                    report.mem_allocated += t.mem_allocated;
                    report.mem_freed += t.mem_freed;
                }
                report.samples.push_back(std::move(sr));
            }
        } catch (...) {
            failed = true;
            if (!scratch_dir.empty())
                note("emulation failed; scratch files left for inspection "
                     "under " + scratch_dir);
            throw;
        }

        if (!report.samples.empty())
            report.tx = report.samples.back().end -
                        report.samples.front().start;

        report.write_requests = write_requests_;
        report.read_requests = read_requests_;

        if (!failed && storage) {
            storage->cleanup();
            std::error_code ec;
            std::filesystem::remove(scratch_dir, ec);
        }
        return report;
    }

private:
    template <typename SinceFn>
    SampleReport replay_sample(const MergedSample& s, double cap,
                               SinceFn&& since_t0,
                               std::optional<ComputeAtom>& compute,
                               std::optional<StorageAtom>& storage,
                               std::optional<MemoryAtom>& memory) {
        SampleReport sr;
        sr.index = s.index;

        struct Pending {
            TaskReport report;
            std::thread thread;
        };
        std::vector<Pending> pending;
        pending.reserve(3);  // threads hold pointers into this vector
        std::vector<std::exception_ptr> errors;
        std::mutex err_mu;

        bool run_compute = s.cycles_used > 0;
        bool run_storage = s.bytes_read > 0 || s.bytes_written > 0;
        bool run_memory = s.mem_allocated > 0 || s.mem_freed > 0;
        int n_tasks = int(run_compute) + int(run_storage) + int(run_memory);
        if (n_tasks == 0) {
            // Zero-quantity slot: order is preserved by construction and
            // there is nothing to consume; it still appears in the report.
            double now = since_t0();
            sr.start = sr.end = now;
            return sr;
        }

        // All tasks gate on one latch; their shared start is the release
        // instant, which is also when they become runnable.
        std::latch gate(n_tasks + 1);
        double release_at = 0.0;

        auto spawn = [&](const char* name, auto&& body) {
            pending.emplace_back();
            Pending& p = pending.back();
            p.report.atom = name;
            p.thread = std::thread(
                [&, body = std::forward<decltype(body)>(body)](
                    TaskReport* out) {
                    gate.arrive_and_wait();
                    try {
                        body(*out);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(err_mu);
                        errors.push_back(std::current_exception());
                    }
                    out->end = since_t0();
                },
                &p.report);
        };

        if (run_compute)
            spawn("compute", [&](TaskReport& out) {
                out.cycles = compute->consume(s.cycles_used, cap);
            });
        if (run_storage)
            spawn("storage", [&](TaskReport& out) {
                auto r = storage->consume(s.bytes_read, s.bytes_written);
                out.bytes_read = r.read;
                out.bytes_written = r.written;
                write_requests_ += r.write_requests;
                read_requests_ += r.read_requests;
            });
        if (run_memory)
            spawn("memory", [&](TaskReport& out) {
                auto r = memory->consume(s.mem_allocated, s.mem_freed,
                                         long(s.index));
                out.mem_allocated = r.allocated;
                out.mem_freed = r.freed;
            });

        release_at = since_t0();
        gate.arrive_and_wait();
        for (auto& p : pending) p.thread.join();

        if (!errors.empty()) {
            try {
                std::rethrow_exception(errors.front());
            } catch (TimeoutError& e) {
                throw TimeoutError(std::string(e.what()) + " (sample " +
                                       std::to_string(s.index) + ")",
                                   long(s.index));
            } catch (EmulationError& e) {
                throw EmulationError(
                    e.sample_index >= 0
                        ? std::string(e.what())
                        : std::string(e.what()) + " (sample " +
                              std::to_string(s.index) + ")",
                    e.sample_index >= 0 ? e.sample_index : long(s.index));
            }
        }

        sr.start = release_at;
        sr.end = release_at;
        for (auto& p : pending) {
            p.report.start = release_at;
            if (p.report.end < p.report.start)
                p.report.end = p.report.start;
            sr.end = std::max(sr.end, p.report.end);
            sr.tasks.push_back(std::move(p.report));
        }

        // Runaway guard for the atoms that cannot self-interrupt.
        double took = sr.end - sr.start;
        if (took > cap)
            throw TimeoutError(
                "sample " + std::to_string(s.index) + " took " +
                    std::to_string(took) + " s against a cap of " +
                    std::to_string(cap) + " s",
                long(s.index));
        return sr;
    }

    // Walk the plan's held-memory trajectory against what the host can
    // offer, so a doomed replay fails naming the sample before any work.
    void preflight_memory(const std::vector<MergedSample>& plan) const {
        auto avail = detail::available_memory();
        bytes_t budget = avail ? *avail : detect_total_memory();
        if (budget == 0) return;
        budget -= budget / 10;  // leave headroom for everything else

        bytes_t held = 0;
        for (const auto& s : plan) {
            held += s.mem_allocated;
            if (held > budget)
                throw EmulationError(
                    "sample " + std::to_string(s.index) + " needs " +
                        std::to_string(held) +
                        " bytes held but only " + std::to_string(budget) +
                        " are available",
                    long(s.index));
            bytes_t freed = std::min(held, s.mem_freed);
            held -= freed;
        }
    }

    CalibrationEntry ensure_calibration() {
        CalibrationStore store(calibration_root_);
        try {
            return store.require(cfg_.compute_kernel, sys_);
        } catch (const StaleCalibrationError&) {
            note("calibration for '" + cfg_.compute_kernel +
                 "' was taken on another host; recalibrating");
        } catch (const CalibrationError&) {
            note("no calibration for '" + cfg_.compute_kernel +
                 "' on this host; calibrating now");
        }
        auto kernel = make_kernel(cfg_.compute_kernel, cfg_.plugin_dir);
        CalibrationEntry e = calibrate_kernel(*kernel, sys_);
        store.put(e);
        return e;
    }

    void note(const std::string& message) const {
        if (diag_) *diag_ << "note: " << message << "\n";
    }

    AtomConfig cfg_;
    std::string calibration_root_;
    std::ostream* diag_;
    SystemInfo sys_ = detect_system();
    count_t write_requests_ = 0;
    count_t read_requests_ = 0;
};

// ---------------------------------------------------------------------------
// Report serialization and the human summary.

inline void to_json(nlohmann::json& j, const AtomConfig& c) {
    j = nlohmann::json{
        {"compute_kernel", c.compute_kernel},
        {"compute_workers", c.compute_workers},
        {"worker_mode", to_string(c.worker_mode)},
        {"io_block_size_read", c.io_block_size_read},
        {"io_block_size_write", c.io_block_size_write},
        {"fs_target", c.fs_target},
        {"mem_block_size", c.mem_block_size},
    };
    if (c.network_endpoint) j["network_endpoint"] = *c.network_endpoint;
}

inline void to_json(nlohmann::json& j, const TaskReport& t) {
    j = nlohmann::json{{"atom", t.atom},
                       {"start", t.start},
                       {"end", t.end}};
    if (t.cycles) j["cycles"] = t.cycles;
    if (t.bytes_written) j["bytes_written"] = t.bytes_written;
    if (t.bytes_read) j["bytes_read"] = t.bytes_read;
    if (t.mem_allocated) j["mem_allocated"] = t.mem_allocated;
    if (t.mem_freed) j["mem_freed"] = t.mem_freed;
}

inline void to_json(nlohmann::json& j, const SampleReport& s) {
    j = nlohmann::json{{"index", s.index},
                       {"start", s.start},
                       {"end", s.end},
                       {"tasks", s.tasks}};
}

inline void to_json(nlohmann::json& j, const EmulationReport& r) {
    j = nlohmann::json{
        {"run_id", r.run_id},
        {"tx", r.tx},
        {"sample_period", r.sample_period},
        {"profile_command", r.profile_command},
        {"profile_counter_source", r.counter_source},
        {"config", r.config},
        {"samples", r.samples},
        {"consumed",
         {{"cycles", r.cycles},
          {"bytes_written", r.bytes_written},
          {"bytes_read", r.bytes_read},
          {"mem_allocated", r.mem_allocated},
          {"mem_freed", r.mem_freed},
          {"write_requests", r.write_requests},
          {"read_requests", r.read_requests}}},
    };
    if (r.calibration) j["calibration"] = *r.calibration;
}

// Compact fixed-width table, one row per sample plus a totals row.
inline void print_report_summary(const EmulationReport& r,
                                 std::ostream& out) {
    char line[160];
    out << "emulation " << r.run_id << "  command: " << r.profile_command
        << "\n";
    std::snprintf(line, sizeof line, "%-7s %10s %14s %12s %12s %12s %12s",
                  "sample", "wall s", "cycles", "written", "read", "alloc",
                  "freed");
    out << line << "\n";
    for (const auto& s : r.samples) {
        count_t cycles = 0;
        bytes_t wr = 0, rd = 0, al = 0, fr = 0;
        for (const auto& t : s.tasks) {
            cycles += t.cycles;
            wr += t.bytes_written;
            rd += t.bytes_read;
            al += t.mem_allocated;
            fr += t.mem_freed;
        }
        std::snprintf(line, sizeof line,
                      "%-7zu %10.3f %14llu %12llu %12llu %12llu %12llu",
                      s.index, s.end - s.start,
                      static_cast<unsigned long long>(cycles),
                      static_cast<unsigned long long>(wr),
                      static_cast<unsigned long long>(rd),
                      static_cast<unsigned long long>(al),
                      static_cast<unsigned long long>(fr));
        out << line << "\n";
    }
    std::snprintf(line, sizeof line,
                  "%-7s %10.3f %14llu %12llu %12llu %12llu %12llu", "total",
                  r.tx, static_cast<unsigned long long>(r.cycles),
                  static_cast<unsigned long long>(r.bytes_written),
                  static_cast<unsigned long long>(r.bytes_read),
                  static_cast<unsigned long long>(r.mem_allocated),
                  static_cast<unsigned long long>(r.mem_freed));
    out << line << "\n";
}

}  // namespace synmirror
