#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synmirror/errors.hpp"

namespace synmirror {

using count_t = std::uint64_t;
using bytes_t = std::uint64_t;

inline constexpr int kProfileSchemaVersion = 1;

// Sampling can at most run at 10 Hz; see ProfilerConfig.
inline constexpr double kMinSamplePeriod = 0.1;

// Per-sample flags. A sample is usable even when flagged; flags record how
// it was obtained.
enum SampleFlag : std::uint32_t {
    kSampleGap     = 1u << 0,  // counter read failed, zeros recorded
    kSampleScaled  = 1u << 1,  // counters were time-multiplexed, values scaled
    kSampleClamped = 1u << 2,  // negative delta (wrap/restart) clamped to 0
};

struct SystemInfo {
    int           core_count = 1;
    std::uint64_t max_cpu_freq = 0;   // Hz
    bytes_t       total_memory = 0;
    std::string   host_id;
    std::string   os_id;

    bool operator==(const SystemInfo&) const = default;
};

struct CpuSample {
    double  t = 0.0;                      // seconds since profiling start
    count_t instructions = 0;             // delta since previous sample
    count_t cycles_used = 0;              // delta
    count_t cycles_stalled_frontend = 0;  // delta
    count_t cycles_stalled_backend = 0;   // delta
    std::uint32_t flags = 0;

    bool operator==(const CpuSample&) const = default;
};

struct MemSample {
    double  t = 0.0;
    bytes_t rss = 0;        // absolute
    bytes_t peak = 0;       // absolute high-water mark, non-decreasing
    bytes_t allocated = 0;  // delta, derived from RSS growth
    bytes_t freed = 0;      // delta, derived from RSS shrinkage
    std::uint32_t flags = 0;

    bool operator==(const MemSample&) const = default;
};

struct StorageSample {
    double  t = 0.0;
    bytes_t bytes_read = 0;     // delta
    bytes_t bytes_written = 0;  // delta
    std::uint32_t flags = 0;

    bool operator==(const StorageSample&) const = default;
};

enum class CounterSource { hardware, estimated };

inline const char* to_string(CounterSource s) {
    return s == CounterSource::hardware ? "hardware" : "estimated";
}

struct DerivedMetrics {
    double efficiency = 0.0;             // in [0,1]
    bool   efficiency_degenerate = false;
    double utilization = 0.0;            // >= 0, may exceed 1, never clamped
    std::optional<count_t> flops;        // only when a flops-per-cycle factor is known
    std::optional<double>  flop_rate;    // flops / runtime

    bool operator==(const DerivedMetrics&) const = default;
};

// Integrated sums over a profile's series. Counts are integer-exact; the
// absolute memory metrics carry the series maximum instead of a sum.
struct Totals {
    count_t instructions = 0;
    count_t cycles_used = 0;
    count_t cycles_stalled_frontend = 0;
    count_t cycles_stalled_backend = 0;
    bytes_t allocated = 0;
    bytes_t freed = 0;
    bytes_t rss_max = 0;   // max of absolute RSS samples
    bytes_t peak = 0;      // max of absolute high-water samples
    bytes_t bytes_read = 0;
    bytes_t bytes_written = 0;

    bool operator==(const Totals&) const = default;
};

// Child process accounting collected at reap time. Runtime and peak RSS come
// from here rather than from sample counts, which corrects the
// spawn-to-first-sample offset.
struct Accounting {
    int    exit_code = 0;
    int    term_signal = 0;  // nonzero when the child was killed by a signal
    double user_time = 0.0;
    double system_time = 0.0;
    bytes_t peak_rss = 0;

    bool operator==(const Accounting&) const = default;
};

struct Profile {
    int         schema_version = kProfileSchemaVersion;
    std::string command;
    std::map<std::string, std::string> tags;
    SystemInfo  system;
    double      sample_period = 1.0;
    double      start_time = 0.0;  // wall clock, seconds since epoch
    double      runtime = 0.0;     // Tx from process accounting
    CounterSource counter_source = CounterSource::hardware;
    // Watcher name -> status note ("hardware", "estimated", "enabled",
    // "disabled: <reason>").
    std::map<std::string, std::string> watchers;
    Accounting  accounting;

    std::vector<CpuSample>     cpu_series;
    std::vector<MemSample>     mem_series;
    std::vector<StorageSample> storage_series;

    Totals         totals;
    DerivedMetrics derived;

    bool operator==(const Profile&) const = default;

    std::size_t total_samples() const {
        return cpu_series.size() + mem_series.size() + storage_series.size();
    }
};

// All per-watcher deltas binned into one global ordering slot; the unit of
// replay. Timing is deliberately absent.
struct MergedSample {
    std::size_t index = 0;
    count_t cycles_used = 0;
    count_t instructions = 0;
    bytes_t mem_allocated = 0;
    bytes_t mem_freed = 0;
    bytes_t bytes_read = 0;
    bytes_t bytes_written = 0;

    bool operator==(const MergedSample&) const = default;

    bool empty() const {
        return cycles_used == 0 && instructions == 0 && mem_allocated == 0 &&
               mem_freed == 0 && bytes_read == 0 && bytes_written == 0;
    }
};

struct MetricStats {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation, n-1 denominator
    double min = 0.0;
    double max = 0.0;

    bool operator==(const MetricStats&) const = default;
};

struct ProfileStats {
    std::size_t n = 0;
    // Keyed by metric name: "runtime" plus every Totals field.
    std::map<std::string, MetricStats> metrics;
};

// Metric order used everywhere stats are printed.
inline const std::vector<std::string>& stats_metric_names() {
    static const std::vector<std::string> names = {
        "runtime",       "instructions", "cycles_used",
        "cycles_stalled_frontend", "cycles_stalled_backend",
        "allocated",     "freed",        "rss_max",
        "peak",          "bytes_read",   "bytes_written",
    };
    return names;
}

// ---------------------------------------------------------------------------
// Derived-metric formulas
// ---------------------------------------------------------------------------

// cycles_used / (cycles_used + cycles_wasted), with all stalled cycles
// counted as wasted. Frontend and backend stalls may overlap in the same
// cycle; the formula is applied as-is, without de-duplication.
inline double efficiency(count_t cycles_used, count_t stalled_frontend,
                         count_t stalled_backend, bool* degenerate = nullptr) {
    const count_t wasted = stalled_frontend + stalled_backend;
    if (cycles_used == 0 && wasted == 0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    if (degenerate) *degenerate = false;
    return static_cast<double>(cycles_used) /
           (static_cast<double>(cycles_used) + static_cast<double>(wasted));
}

// cycles_used relative to the architectural ceiling over the elapsed
// interval. Deliberately not clamped: values above 1 record that the process
// used more cores than assumed.
inline double utilization(count_t cycles_used, double elapsed,
                          std::uint64_t max_freq, int cores_assumed) {
    if (elapsed <= 0.0)
        throw Error("utilization: elapsed time must be positive");
    if (max_freq == 0)
        throw Error("utilization: max_freq must be positive");
    if (cores_assumed < 1)
        throw Error("utilization: cores_assumed must be >= 1");
    const double cycles_max =
        static_cast<double>(max_freq) * elapsed * static_cast<double>(cores_assumed);
    return static_cast<double>(cycles_used) / cycles_max;
}

// ---------------------------------------------------------------------------
// Series merging
// ---------------------------------------------------------------------------

// Slot assignment: floor(t / sample_period) per watcher sample, no
// cross-watcher realignment. Watcher clocks may drift relative to each
// other; binning each timestamp independently keeps the global order
// deterministic.
inline std::size_t merge_slot(double t, double sample_period) {
    if (t <= 0.0) return 0;
    return static_cast<std::size_t>(std::floor(t / sample_period));
}

// Bin every watcher sample of a profile into global sample slots. Slots with
// no activity are emitted as all-zero samples: they carry ordering
// information. Output indices are contiguous from 0.
inline std::vector<MergedSample> merge_series(const Profile& profile) {
    if (profile.cpu_series.empty() && profile.mem_series.empty() &&
        profile.storage_series.empty())
        return {};

    const double period = profile.sample_period;
    std::size_t max_slot = 0;
    auto track = [&](double t) { max_slot = std::max(max_slot, merge_slot(t, period)); };
    for (const auto& s : profile.cpu_series) track(s.t);
    for (const auto& s : profile.mem_series) track(s.t);
    for (const auto& s : profile.storage_series) track(s.t);

    std::vector<MergedSample> merged(max_slot + 1);
    for (std::size_t i = 0; i < merged.size(); ++i) merged[i].index = i;

    for (const auto& s : profile.cpu_series) {
        auto& m = merged[merge_slot(s.t, period)];
        m.cycles_used += s.cycles_used;
        m.instructions += s.instructions;
    }
    for (const auto& s : profile.mem_series) {
        auto& m = merged[merge_slot(s.t, period)];
        m.mem_allocated += s.allocated;
        m.mem_freed += s.freed;
    }
    for (const auto& s : profile.storage_series) {
        auto& m = merged[merge_slot(s.t, period)];
        m.bytes_read += s.bytes_read;
        m.bytes_written += s.bytes_written;
    }
    return merged;
}

// ---------------------------------------------------------------------------
// Totals
// ---------------------------------------------------------------------------

// Exact integer sums of the delta metrics; maxima of the absolute ones.
inline Totals integrate_totals(const Profile& profile) {
    Totals t;
    for (const auto& s : profile.cpu_series) {
        t.instructions += s.instructions;
        t.cycles_used += s.cycles_used;
        t.cycles_stalled_frontend += s.cycles_stalled_frontend;
        t.cycles_stalled_backend += s.cycles_stalled_backend;
    }
    for (const auto& s : profile.mem_series) {
        t.allocated += s.allocated;
        t.freed += s.freed;
        t.rss_max = std::max(t.rss_max, s.rss);
        t.peak = std::max(t.peak, s.peak);
    }
    for (const auto& s : profile.storage_series) {
        t.bytes_read += s.bytes_read;
        t.bytes_written += s.bytes_written;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Multi-profile statistics
// ---------------------------------------------------------------------------

namespace detail {

inline MetricStats stats_of(const std::vector<double>& xs) {
    MetricStats m;
    const std::size_t n = xs.size();
    m.min = *std::min_element(xs.begin(), xs.end());
    m.max = *std::max_element(xs.begin(), xs.end());
    if (m.min == m.max) {  // identical inputs have exactly zero spread
        m.mean = m.min;
        return m;
    }
    double sum = 0.0;
    for (double x : xs) sum += x;
    m.mean = std::clamp(sum / static_cast<double>(n), m.min, m.max);
    if (n > 1) {
        double sq = 0.0;
        for (double x : xs) sq += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(sq / static_cast<double>(n - 1));
    }
    return m;
}

inline double metric_value(const Profile& p, const std::string& name) {
    const Totals& t = p.totals;
    if (name == "runtime") return p.runtime;
    if (name == "instructions") return static_cast<double>(t.instructions);
    if (name == "cycles_used") return static_cast<double>(t.cycles_used);
    if (name == "cycles_stalled_frontend")
        return static_cast<double>(t.cycles_stalled_frontend);
    if (name == "cycles_stalled_backend")
        return static_cast<double>(t.cycles_stalled_backend);
    if (name == "allocated") return static_cast<double>(t.allocated);
    if (name == "freed") return static_cast<double>(t.freed);
    if (name == "rss_max") return static_cast<double>(t.rss_max);
    if (name == "peak") return static_cast<double>(t.peak);
    if (name == "bytes_read") return static_cast<double>(t.bytes_read);
    if (name == "bytes_written") return static_cast<double>(t.bytes_written);
    throw Error("unknown metric: " + name);
}

}  // namespace detail

// Per-metric mean / sample std / min / max over profiles sharing one
// (command, tags) key.
inline ProfileStats aggregate_stats(const std::vector<Profile>& profiles) {
    if (profiles.empty())
        throw Error("aggregate_stats: no profiles");
    for (const auto& p : profiles) {
        if (p.command != profiles.front().command || p.tags != profiles.front().tags)
            throw Error("aggregate_stats: profiles differ in command or tags");
    }
    ProfileStats stats;
    stats.n = profiles.size();
    for (const auto& name : stats_metric_names()) {
        std::vector<double> xs;
        xs.reserve(profiles.size());
        for (const auto& p : profiles) xs.push_back(detail::metric_value(p, name));
        stats.metrics[name] = detail::stats_of(xs);
    }
    return stats;
}

// Fill in the derived block from totals and accounting. cores_assumed
// defaults to 1: profiling targets single-threaded processes, and recorded
// utilization above 1 is information, not an error.
inline DerivedMetrics compute_derived(const Profile& p, int cores_assumed = 1,
                                      std::optional<double> flops_per_cycle = {}) {
    DerivedMetrics d;
    d.efficiency = efficiency(p.totals.cycles_used, p.totals.cycles_stalled_frontend,
                              p.totals.cycles_stalled_backend, &d.efficiency_degenerate);
    if (p.runtime > 0.0 && p.system.max_cpu_freq > 0) {
        d.utilization = utilization(p.totals.cycles_used, p.runtime,
                                    p.system.max_cpu_freq, cores_assumed);
    }
    if (flops_per_cycle) {
        d.flops = static_cast<count_t>(
            static_cast<double>(p.totals.cycles_used) * *flops_per_cycle);
        if (p.runtime > 0.0)
            d.flop_rate = static_cast<double>(*d.flops) / p.runtime;
    }
    return d;
}

}  // namespace synmirror
