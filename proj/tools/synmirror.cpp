// Command-line front-end: profile a process, store the result, replay it
// through the emulator, aggregate stored runs, calibrate kernels, generate
// background stress, and serve the network echo sink.
//
// Exit codes (stable, relied on by callers):
//   0      success
//   2      bad flags or arguments
//   3      target command could not be launched
//   4      required counter capability missing (and no fallback enabled)
//   5      no matching profile in the store
//   6      emulation failed
//   10+n   profiled child exited with nonzero status n (profile was saved)
//   1      anything else

#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "synmirror/docstore.hpp"
#include "synmirror/emulator.hpp"
#include "synmirror/profiler.hpp"
#include "synmirror/store.hpp"

using namespace synmirror;

namespace {

struct GlobalOpts {
    std::string store;
    bool verbose = false;
    bool json = false;
};

std::string default_store_location() {
    if (const char* s = std::getenv("SYNMIRROR_STORE")) return s;
    if (const char* s = std::getenv("SYNMIRROR_DB")) return s;
    if (const char* home = std::getenv("HOME"))
        return std::string(home) + "/.synmirror/store";
    return "./synmirror-store";
}

bool is_url(const std::string& location) {
    return location.rfind("http://", 0) == 0 ||
           location.rfind("https://", 0) == 0;
}

// Calibration tables are host-local by nature, so they always live in a
// directory even when profiles go to a remote document store.
std::string calibration_root(const GlobalOpts& g) {
    if (!is_url(g.store)) return g.store;
    if (const char* home = std::getenv("HOME"))
        return std::string(home) + "/.synmirror";
    return "./.synmirror";
}

void vlog(const GlobalOpts& g, const std::string& line) {
    if (g.verbose) std::cerr << "synmirror: " << line << "\n";
}

std::map<std::string, std::string> parse_tags(
    const std::vector<std::string>& kvs) {
    std::map<std::string, std::string> tags;
    for (const auto& kv : kvs) {
        auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw CLI::ValidationError("--tag", "expected KEY=VALUE, got '" +
                                                    kv + "'");
        tags[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return tags;
}

void print_totals_summary(const Profile& p, std::ostream& out) {
    char line[160];
    out << "command:        " << p.command << "\n";
    std::snprintf(line, sizeof line, "runtime:        %.3f s", p.runtime);
    out << line << "\n";
    out << "counter source: " << to_string(p.counter_source) << "\n";
    std::snprintf(line, sizeof line,
                  "samples:        cpu %zu, mem %zu, storage %zu",
                  p.cpu_series.size(), p.mem_series.size(),
                  p.storage_series.size());
    out << line << "\n";
    std::snprintf(
        line, sizeof line,
        "cycles:         %llu (instructions %llu)",
        static_cast<unsigned long long>(p.totals.cycles_used),
        static_cast<unsigned long long>(p.totals.instructions));
    out << line << "\n";
    std::snprintf(line, sizeof line,
                  "memory:         allocated %llu, freed %llu, peak rss %llu",
                  static_cast<unsigned long long>(p.totals.allocated),
                  static_cast<unsigned long long>(p.totals.freed),
                  static_cast<unsigned long long>(p.accounting.peak_rss));
    out << line << "\n";
    std::snprintf(line, sizeof line,
                  "storage:        read %llu, written %llu",
                  static_cast<unsigned long long>(p.totals.bytes_read),
                  static_cast<unsigned long long>(p.totals.bytes_written));
    out << line << "\n";
    if (p.accounting.term_signal)
        out << "terminated by signal " << p.accounting.term_signal << "\n";
    else if (p.accounting.exit_code)
        out << "child exit code " << p.accounting.exit_code << "\n";
}

// The profile document minus its bulky series, for --json summaries.
nlohmann::json profile_summary_json(const Profile& p) {
    nlohmann::json j = to_json(p);
    j.erase("series");
    j["samples"] = {{"cpu", p.cpu_series.size()},
                    {"mem", p.mem_series.size()},
                    {"storage", p.storage_series.size()}};
    return j;
}

// ---------------------------------------------------------------------------
// profile

struct ProfileOpts {
    std::vector<std::string> tags;
    double period = 0.0;  // 0 = take the env/default
    std::string out_file;
    bool fallback = false;
    std::vector<std::string> command;
};

int cmd_profile(const GlobalOpts& g, const ProfileOpts& o) {
    ProfilerConfig cfg = ProfilerConfig::from_env();
    if (o.period != 0.0) cfg.sample_period = o.period;
    if (o.fallback) cfg.fallback_counters = true;
    cfg.tags = parse_tags(o.tags);
    if (g.json) {
        // Keep standard output a single document; the child talks on the
        // diagnostic stream instead.
        cfg.child_stdout = "/dev/stderr";
    }

    if (cfg.sample_period < kMinSamplePeriod) {
        std::cerr << "synmirror: sample period " << cfg.sample_period
                  << " s is below the " << kMinSamplePeriod
                  << " s floor\n";
        return 2;
    }
    if (o.command.empty()) {
        std::cerr << "synmirror: no command given after --\n";
        return 2;
    }

    Profiler profiler(cfg);
    Profile p;
    try {
        p = profiler.profile(o.command);
    } catch (const LaunchError& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 3;
    } catch (const CapabilityError& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 4;
    }

    std::string id;
    if (!o.out_file.empty()) {
        std::ofstream out(o.out_file, std::ios::binary | std::ios::trunc);
        if (!out) {
            std::cerr << "synmirror: cannot write " << o.out_file << "\n";
            return 1;
        }
        out << serialize_profile(p);
        id = o.out_file;
        vlog(g, "profile written to " + o.out_file);
    } else {
        auto store = open_store(g.store);
        id = store->save(p);
        vlog(g, "profile saved to " + store->describe());
    }

    if (g.json) {
        nlohmann::json j = profile_summary_json(p);
        j["id"] = id;
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "profile id: " << id << "\n";
        print_totals_summary(p, std::cout);
    }

    if (p.accounting.term_signal) return 10 + 128 + p.accounting.term_signal;
    if (p.accounting.exit_code) return 10 + p.accounting.exit_code;
    return 0;
}

// ---------------------------------------------------------------------------
// emulate

struct EmulateOpts {
    std::string profile_file;
    std::string match;
    std::vector<std::string> tags;
    AtomConfig atom;
    std::string mode = "shared";
    double stress_cpu = 0.0;
};

Profile load_target_profile(const GlobalOpts& g, const std::string& file,
                            const std::string& match,
                            const std::vector<std::string>& tags) {
    if (!file.empty()) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw NotFoundError("cannot open profile file " + file);
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_profile(ss.str());
    }
    auto store = open_store(g.store);
    ProfileKey key = ProfileKey::make(match, parse_tags(tags));
    auto hits = store->find(key);
    if (hits.empty())
        throw NotFoundError("no profile in " + store->describe() +
                            " matches command '" + key.command + "'");
    vlog(g, "matched " + std::to_string(hits.size()) +
                " profile(s); replaying the newest: " + hits.front().id);
    return std::move(hits.front().profile);
}

int cmd_emulate(const GlobalOpts& g, EmulateOpts& o) {
    if (o.profile_file.empty() == o.match.empty()) {
        std::cerr << "synmirror: need exactly one of --profile or --match\n";
        return 2;
    }
    if (o.mode == "shared")
        o.atom.worker_mode = WorkerMode::shared_memory;
    else if (o.mode == "process")
        o.atom.worker_mode = WorkerMode::separate_process;
    else {
        std::cerr << "synmirror: --mode must be shared or process\n";
        return 2;
    }

    Profile p;
    try {
        p = load_target_profile(g, o.profile_file, o.match, o.tags);
    } catch (const NotFoundError& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 5;
    }

    Stress stress;
    if (o.stress_cpu > 0.0) {
        StressConfig sc;
        sc.cpu_fraction = o.stress_cpu;
        sc.fs_target = o.atom.fs_target;
        stress.start(sc);
        vlog(g, "background stress: cpu fraction " +
                    std::to_string(o.stress_cpu));
    }

    try {
        Emulator emu(o.atom, calibration_root(g), &std::cerr);
        EmulationReport report = emu.emulate(p);
        stress.stop();
        if (g.json) {
            nlohmann::json j = report;
            std::cout << j.dump(2) << "\n";
        } else {
            print_report_summary(report, std::cout);
            char line[96];
            std::snprintf(line, sizeof line,
                          "Tx %.3f s replaying %.3f s of profile", report.tx,
                          p.runtime);
            std::cout << line << "\n";
        }
        return 0;
    } catch (const EmulationError& e) {
        stress.stop();
        std::cerr << "synmirror: emulation failed";
        if (e.sample_index >= 0)
            std::cerr << " at sample " << e.sample_index;
        std::cerr << ": " << e.what() << "\n";
        return 6;
    } catch (const CalibrationError& e) {
        stress.stop();
        std::cerr << "synmirror: " << e.what() << "\n";
        return 6;
    }
}

// ---------------------------------------------------------------------------
// stats

int cmd_stats(const GlobalOpts& g, const std::string& match,
              const std::vector<std::string>& tags) {
    auto store = open_store(g.store);
    ProfileKey key = ProfileKey::make(match, parse_tags(tags));
    auto hits = store->find(key);
    if (hits.empty()) {
        std::cerr << "synmirror: no profile in " << store->describe()
                  << " matches command '" << key.command << "'\n";
        return 5;
    }
    std::vector<Profile> profiles;
    profiles.reserve(hits.size());
    for (auto& h : hits) profiles.push_back(std::move(h.profile));
    ProfileStats stats = aggregate_stats(profiles);

    if (g.json) {
        nlohmann::json j;
        j["command"] = key.command;
        j["tags"] = key.tags;
        j["n"] = stats.n;
        for (const auto& name : stats_metric_names()) {
            const MetricStats& m = stats.metrics.at(name);
            j["metrics"][name] = {{"mean", m.mean},
                                  {"std", m.std},
                                  {"min", m.min},
                                  {"max", m.max}};
        }
        std::cout << j.dump(2) << "\n";
    } else {
        char line[200];
        std::cout << "command: " << key.command << "  (n=" << stats.n
                  << ")\n";
        std::snprintf(line, sizeof line, "%-24s %14s %14s %14s %14s",
                      "metric", "mean", "std", "min", "max");
        std::cout << line << "\n";
        for (const auto& name : stats_metric_names()) {
            const MetricStats& m = stats.metrics.at(name);
            std::snprintf(line, sizeof line,
                          "%-24s %14.9g %14.9g %14.9g %14.9g", name.c_str(),
                          m.mean, m.std, m.min, m.max);
            std::cout << line << "\n";
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// calibrate

int cmd_calibrate(const GlobalOpts& g, const std::string& kernel_name,
                  const std::string& plugin_dir) {
    auto kernel = make_kernel(kernel_name, plugin_dir);
    SystemInfo sys = detect_system();
    vlog(g, "calibrating '" + kernel_name + "' on host " + sys.host_id);
    CalibrationEntry e = calibrate_kernel(*kernel, sys);
    CalibrationStore store(calibration_root(g));
    store.put(e);

    if (g.json) {
        nlohmann::json j = e;
        std::cout << j.dump(2) << "\n";
    } else {
        char line[120];
        std::cout << "kernel:               " << e.kernel << "\n";
        std::snprintf(line, sizeof line, "cycles/iteration:     %.1f (std %.1f)",
                      e.cycles_per_iteration, e.cycles_std);
        std::cout << line << "\n";
        std::cout << "flops/iteration:      " << e.flops_per_iteration
                  << "\n";
        std::cout << "counter source:       " << to_string(e.counter_source)
                  << "\n";
        std::cout << "table:                " << store.path() << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// stress / echo-sink

// Block before spawning worker threads: they inherit the mask, so INT/TERM
// can only be consumed by sigtimedwait below instead of killing the process.
sigset_t block_term_signals() {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    sigprocmask(SIG_BLOCK, &set, nullptr);
    return set;
}

int wait_for_signal_or(const sigset_t& set, double seconds) {
    timespec ts{};
    double deadline =
        detail::monotonic_seconds() + (seconds > 0 ? seconds : 1e18);
    for (;;) {
        double left = deadline - detail::monotonic_seconds();
        if (left <= 0) return 0;
        double slice = std::min(left, 0.2);
        ts.tv_sec = time_t(slice);
        ts.tv_nsec = long((slice - double(ts.tv_sec)) * 1e9);
        int sig = sigtimedwait(&set, nullptr, &ts);
        if (sig > 0) return sig;
    }
}

int cmd_stress(const GlobalOpts& g, const StressConfig& cfg) {
    sigset_t set = block_term_signals();
    Stress stress;
    stress.start(cfg);
    vlog(g, "stress running: cpu " + std::to_string(cfg.cpu_fraction) +
                ", mem " + std::to_string(cfg.mem_bytes) + ", disk " +
                std::to_string(cfg.disk_rate) + " B/s");
    int sig = wait_for_signal_or(set, cfg.duration);
    stress.stop();
    if (g.json)
        std::cout << nlohmann::json{{"interrupted", sig > 0}}.dump() << "\n";
    else if (sig > 0)
        std::cerr << "synmirror: interrupted, stress stopped cleanly\n";
    return 0;
}

int cmd_echo_sink(const GlobalOpts& g, int port) {
    sigset_t set = block_term_signals();
    EchoSink sink(static_cast<std::uint16_t>(port));
    sink.start();
    // The port line goes to stdout so scripts can scrape it; everything
    // else is diagnostics.
    if (g.json)
        std::cout << nlohmann::json{{"endpoint", sink.endpoint()}}.dump()
                  << "\n"
                  << std::flush;
    else
        std::cout << "listening on " << sink.endpoint() << "\n"
                  << std::flush;
    wait_for_signal_or(set, 0);
    sink.stop();
    auto st = sink.stats();
    std::cerr << "echo-sink: " << st.connections << " connection(s), "
              << st.data_bytes << " data bytes, " << st.echoed_bytes
              << " echoed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    GlobalOpts g;
    g.store = default_store_location();

    CLI::App app{"black-box resource profiler and consumption replayer"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--store", g.store,
                   "profile store: a directory or an http(s) URL")
        ->capture_default_str();
    app.add_flag("--verbose", g.verbose, "diagnostic detail on stderr");
    app.add_flag("--json", g.json,
                 "emit one machine-readable document on stdout");

    // profile
    ProfileOpts po;
    auto* profile =
        app.add_subcommand("profile", "run a command under the profiler");
    profile->add_option("--tag", po.tags, "KEY=VALUE profile tag")
        ->type_size(1);
    profile->add_option("--period", po.period,
                        "sample period in seconds (min 0.1)");
    profile->add_option("--out", po.out_file,
                        "write the profile to a file instead of the store");
    profile->add_flag("--fallback-counters", po.fallback,
                      "estimate cycles from CPU time when no PMU");
    profile->add_option("command", po.command, "target command (after --)")
        ->take_all();

    // emulate
    EmulateOpts eo;
    auto* emulate = app.add_subcommand(
        "emulate", "replay a stored profile's resource consumption");
    emulate->add_option("--profile", eo.profile_file,
                        "replay this profile file");
    emulate->add_option("--match", eo.match,
                        "replay the newest stored profile of this command");
    emulate->add_option("--tag", eo.tags, "KEY=VALUE tag filter")
        ->type_size(1);
    emulate->add_option("--kernel", eo.atom.compute_kernel,
                        "compute kernel name")
        ->capture_default_str();
    emulate->add_option("--workers", eo.atom.compute_workers,
                        "compute worker count")
        ->capture_default_str();
    emulate->add_option("--mode", eo.mode, "worker mode: shared | process")
        ->capture_default_str();
    emulate->add_option("--read-block", eo.atom.io_block_size_read,
                        "read request size in bytes")
        ->capture_default_str();
    emulate->add_option("--write-block", eo.atom.io_block_size_write,
                        "write request size in bytes")
        ->capture_default_str();
    emulate->add_option("--fs", eo.atom.fs_target,
                        "directory for scratch I/O")
        ->capture_default_str();
    emulate->add_option("--plugin-dir", eo.atom.plugin_dir,
                        "directory with custom kernel plugins");
    emulate->add_option("--stress-cpu", eo.stress_cpu,
                        "background CPU stress fraction during replay");

    // stats
    std::string stats_match;
    std::vector<std::string> stats_tags;
    auto* stats = app.add_subcommand(
        "stats", "aggregate stored profiles of one command");
    stats->add_option("--match", stats_match, "command to aggregate")
        ->required();
    stats->add_option("--tag", stats_tags, "KEY=VALUE tag filter")
        ->type_size(1);

    // calibrate
    std::string cal_kernel = "cache_resident";
    std::string cal_plugin_dir;
    auto* calibrate = app.add_subcommand(
        "calibrate", "measure kernel cycle cost on this host");
    calibrate->add_option("--kernel", cal_kernel, "kernel to calibrate")
        ->capture_default_str();
    calibrate->add_option("--plugin-dir", cal_plugin_dir,
                          "directory with custom kernel plugins");

    // stress
    StressConfig sc;
    auto* stress = app.add_subcommand(
        "stress", "generate background load until the duration elapses");
    stress->add_option("--cpu", sc.cpu_fraction,
                       "busy fraction per core, 0..1");
    stress->add_option("--mem", sc.mem_bytes, "held ballast in bytes")
        ->transform(CLI::AsSizeValue(false));
    stress->add_option("--disk-rate", sc.disk_rate,
                       "sustained write rate in bytes/second");
    stress->add_option("--fs", sc.fs_target, "scratch directory")
        ->capture_default_str();
    stress->add_option("--duration", sc.duration,
                       "seconds to run (0 = until interrupted)");

    // echo-sink
    int sink_port = 0;
    auto* echo_sink = app.add_subcommand(
        "echo-sink", "serve the network atom's echo endpoint");
    echo_sink->add_option("--port", sink_port,
                          "port to bind (0 = ephemeral, printed on stdout)");

    // Treat everything after -- as the profiled command.
    std::vector<std::string> args;
    bool past_separator = false;
    for (int i = 1; i < argc; ++i) {
        if (!past_separator && std::string(argv[i]) == "--") {
            past_separator = true;
            continue;
        }
        if (past_separator)
            po.command.push_back(argv[i]);
        else
            args.emplace_back(argv[i]);
    }

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the message
        return 2;
    }

    try {
        if (profile->parsed()) return cmd_profile(g, po);
        if (emulate->parsed()) return cmd_emulate(g, eo);
        if (stats->parsed()) return cmd_stats(g, stats_match, stats_tags);
        if (calibrate->parsed())
            return cmd_calibrate(g, cal_kernel, cal_plugin_dir);
        if (stress->parsed()) return cmd_stress(g, sc);
        if (echo_sink->parsed()) return cmd_echo_sink(g, sink_port);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 2;
    } catch (const EmulationError& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 6;
    } catch (const Error& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "synmirror: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
