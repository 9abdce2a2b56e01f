#pragma once

// Compute kernels burn CPU cycles with a known analytic flop count so that
// calibration can translate "cycles to consume" into "iterations to run".
// Two built-ins cover the interesting ends of the memory hierarchy:
//
//   cache_resident   dense matrix multiply on operands that fit in L1d,
//                    so cycles go to arithmetic rather than memory stalls
//   cache_exceeding  the same tile multiply striding through a ring buffer
//                    far larger than the last-level cache, so most cycles
//                    are spent waiting on memory
//
// Additional kernels load from shared objects: <dir>/<name>.so exporting
// extern "C" const synmirror_kernel_v1* synmirror_kernel(void).

#include <dlfcn.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "synmirror/cycles.hpp"
#include "synmirror/errors.hpp"
#include "synmirror/profile.hpp"
#include "synmirror/store.hpp"
#include "synmirror/system.hpp"

extern "C" {
// Plugin ABI. Keep this struct layout frozen; extend with a v2 if needed.
typedef struct synmirror_kernel_v1 {
    unsigned long long flops_per_iteration;
    void (*run)(unsigned long long iterations);
} synmirror_kernel_v1;
}

namespace synmirror {

class ComputeKernel {
public:
    virtual ~ComputeKernel() = default;
    virtual std::string name() const = 0;
    // One iteration is the unit calibration measures. Must be side-effect
    // free apart from cycle consumption and safe to call repeatedly.
    virtual void run(std::uint64_t iterations) = 0;
    virtual count_t flops_per_iteration() const = 0;
};

namespace detail {

// Tile edge for both built-ins. Three 24x24 double matrices take 13824
// bytes, comfortably inside any L1d we expect to meet (16 KiB and up).
inline constexpr int kTile = 24;
inline constexpr count_t kTileFlops =
    2ull * kTile * kTile * kTile;  // one multiply and one add per cell

inline void tile_multiply(const double* a, const double* b, double* c) {
    for (int i = 0; i < kTile; ++i) {
        for (int j = 0; j < kTile; ++j) {
            double acc = 0.0;
            for (int k = 0; k < kTile; ++k)
                acc += a[i * kTile + k] * b[k * kTile + j];
            c[i * kTile + j] = acc;
        }
    }
}

}  // namespace detail

class CacheResidentKernel final : public ComputeKernel {
public:
    CacheResidentKernel() {
        for (int i = 0; i < detail::kTile * detail::kTile; ++i) {
            a_[i] = 0.5 + 1.0 / double(i + 2);
            b_[i] = 1.5 - 1.0 / double(i + 3);
        }
    }

    std::string name() const override { return "cache_resident"; }
    count_t flops_per_iteration() const override { return detail::kTileFlops; }

    void run(std::uint64_t iterations) override {
        for (std::uint64_t it = 0; it < iterations; ++it) {
            // Cheap perturbation keeps successive multiplies distinct so the
            // loop cannot be collapsed, without letting values grow.
            a_[0] = 1.0 + double(it & 7) * 0.001;
            detail::tile_multiply(a_, b_, c_);
        }
        sink_ = c_[0];
    }

private:
    alignas(64) double a_[detail::kTile * detail::kTile];
    alignas(64) double b_[detail::kTile * detail::kTile];
    alignas(64) double c_[detail::kTile * detail::kTile];
    volatile double sink_ = 0.0;
};

class CacheExceedingKernel final : public ComputeKernel {
public:
    // Operands stride a buffer sized well past the last-level cache so each
    // tile multiply pulls fresh lines from memory. Sizing targets four times
    // the detected LLC but is capped so hosts reporting huge shared caches
    // do not balloon the emulator footprint.
    static constexpr bytes_t kRingCap = 256ull << 20;

    CacheExceedingKernel() {
        bytes_t want = std::max<bytes_t>(4 * llc_cache_size(), 32ull << 20);
        bytes_t bytes = std::min(want, kRingCap);
        ring_.resize(bytes / sizeof(double));
        for (std::size_t i = 0; i < ring_.size(); ++i)
            ring_[i] = 0.5 + double(i % 1021) / 2048.0;
    }

    std::string name() const override { return "cache_exceeding"; }
    count_t flops_per_iteration() const override { return detail::kTileFlops; }

    void run(std::uint64_t iterations) override {
        constexpr std::size_t tile_elems = detail::kTile * detail::kTile;
        const std::size_t n = ring_.size();
        // Offset a and b operands by half the ring so they never share lines.
        const std::size_t half = n / 2;
        double c[tile_elems] = {};
        for (std::uint64_t it = 0; it < iterations; ++it) {
            // Large prime stride defeats hardware prefetch streaks while the
            // modulo keeps both operands inside the ring.
            pos_ = (pos_ + 16411 * tile_elems) % (half - tile_elems);
            detail::tile_multiply(ring_.data() + pos_,
                                  ring_.data() + half + pos_, c);
            ring_[pos_] = c[0];  // dirty a line so the walk stays resident
        }
        sink_ = c[0];
    }

private:
    std::vector<double> ring_;
    std::size_t pos_ = 0;
    volatile double sink_ = 0.0;
};

class PluginKernel final : public ComputeKernel {
public:
    PluginKernel(const std::string& name, const std::string& path)
        : name_(name) {
        handle_ = dlopen(path.c_str(), RTLD_NOW | RTLD_LOCAL);
        if (!handle_)
            throw EmulationError("cannot load kernel plugin " + path + ": " +
                                 dlerror());
        using factory_fn = const synmirror_kernel_v1* (*)();
        auto factory = reinterpret_cast<factory_fn>(
            dlsym(handle_, "synmirror_kernel"));
        if (!factory) {
            dlclose(handle_);
            handle_ = nullptr;
            throw EmulationError("plugin " + path +
                                 " does not export synmirror_kernel");
        }
        desc_ = factory();
        if (!desc_ || !desc_->run || desc_->flops_per_iteration == 0) {
            dlclose(handle_);
            handle_ = nullptr;
            throw EmulationError("plugin " + path +
                                 " returned an invalid kernel descriptor");
        }
    }

    ~PluginKernel() override {
        if (handle_) dlclose(handle_);
    }
    PluginKernel(const PluginKernel&) = delete;
    PluginKernel& operator=(const PluginKernel&) = delete;

    std::string name() const override { return name_; }
    count_t flops_per_iteration() const override {
        return desc_->flops_per_iteration;
    }
    void run(std::uint64_t iterations) override { desc_->run(iterations); }

private:
    std::string name_;
    void* handle_ = nullptr;
    const synmirror_kernel_v1* desc_ = nullptr;
};

// Instantiates a built-in by name, or loads <plugin_dir>/<name>.so.
inline std::unique_ptr<ComputeKernel> make_kernel(
    const std::string& name, const std::string& plugin_dir = "") {
    if (name == "cache_resident")
        return std::make_unique<CacheResidentKernel>();
    if (name == "cache_exceeding")
        return std::make_unique<CacheExceedingKernel>();
    namespace fs = std::filesystem;
    fs::path so = fs::path(plugin_dir.empty() ? "." : plugin_dir) /
                  (name + ".so");
    if (!fs::exists(so))
        throw EmulationError("unknown kernel '" + name + "': no built-in by " +
                             "that name and no plugin at " + so.string());
    return std::make_unique<PluginKernel>(name, so.string());
}

// ---------------------------------------------------------------------------
// Calibration: how many cycles one kernel iteration costs on this host.

struct CalibrationEntry {
    std::string kernel;
    std::string host_id;
    std::string os;
    CounterSource counter_source = CounterSource::estimated;
    double cycles_per_iteration = 0.0;
    double cycles_std = 0.0;  // spread of per-point slopes around the fit
    count_t flops_per_iteration = 0;
    double calibrated_at = 0.0;  // epoch seconds

    std::uint64_t iterations_for(double cycles) const {
        if (cycles_per_iteration <= 0.0) return 0;
        double it = cycles / cycles_per_iteration;
        return it <= 0.0 ? 0 : static_cast<std::uint64_t>(std::llround(it));
    }
};

// Runs a geometric ladder of iteration counts and fits cycles = slope *
// iterations by least squares through the origin. Each rung is long enough
// (~50 ms and up) that scheduler noise stays small relative to the signal.
inline CalibrationEntry calibrate_kernel(
    ComputeKernel& kernel, const SystemInfo& sys,
    std::optional<CounterSource> pin = {}) {
    CycleMeter meter = CycleMeter::create(sys.max_cpu_freq, pin);

    std::uint64_t freq = sys.max_cpu_freq ? sys.max_cpu_freq : 1'000'000'000;
    const double floor_cycles = 0.05 * double(freq);

    // Grow until one batch costs at least the floor. Start tiny so plugin
    // kernels with expensive iterations do not overshoot.
    std::uint64_t base = 1;
    kernel.run(32);  // warm caches and page in the working set
    for (;;) {
        count_t before = meter.read();
        kernel.run(base);
        count_t spent = meter.read() - before;
        if (double(spent) >= floor_cycles) break;
        if (base > (1ull << 40))
            throw CalibrationError("kernel " + kernel.name() +
                                   " consumed no measurable cycles");
        double ratio = spent > 0 ? floor_cycles / double(spent) : 8.0;
        base = std::max<std::uint64_t>(
            base * 2, static_cast<std::uint64_t>(double(base) * ratio * 1.25));
    }

    // Ladder rungs at 1x 2x 3x 4x of the base batch, least squares through
    // the origin. Per-rung slopes must agree with the fit; wild spread means
    // the host is too noisy (or throttling) for the table to be trustworthy.
    // Shared hosts show transient speed steps, so one disagreeing ladder is
    // retried before giving up.
    double slope = 0.0, dev = 0.0;
    for (int attempt = 0;; ++attempt) {
        std::vector<double> xs, ys;
        for (int m = 1; m <= 4; ++m) {
            std::uint64_t n = base * std::uint64_t(m);
            count_t before = meter.read();
            kernel.run(n);
            count_t spent = meter.read() - before;
            xs.push_back(double(n));
            ys.push_back(double(spent));
        }

        double sxy = 0.0, sxx = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            sxy += xs[i] * ys[i];
            sxx += xs[i] * xs[i];
        }
        if (sxx <= 0.0) throw CalibrationError("degenerate calibration ladder");
        slope = sxy / sxx;
        if (slope <= 0.0)
            throw CalibrationError("kernel " + kernel.name() +
                                   " cycle cost fit is not positive");

        double var = 0.0, worst = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            double s = ys[i] / xs[i];
            var += (s - slope) * (s - slope);
            worst = std::max(worst, std::abs(s - slope) / slope);
        }
        dev = std::sqrt(var / double(xs.size() - 1));
        if (worst <= 0.35) break;
        if (attempt >= 1)
            throw CalibrationError(
                "calibration ladder for " + kernel.name() +
                " is non-linear (worst rung deviates " +
                std::to_string(worst * 100.0) + "% from the fit)");
    }

    CalibrationEntry e;
    e.kernel = kernel.name();
    e.host_id = sys.host_id;
    e.os = sys.os_id;
    e.counter_source = meter.source();
    e.cycles_per_iteration = slope;
    e.cycles_std = dev;
    e.flops_per_iteration = kernel.flops_per_iteration();
    e.calibrated_at =
        std::chrono::duration<double>(
            std::chrono::system_clock::now().time_since_epoch())
            .count();
    return e;
}

// ---------------------------------------------------------------------------
// Persistence. One JSON document per store root, keyed by kernel name, with
// the host identity recorded inside each entry. Loading an entry written on
// a different host is an error rather than a silently wrong answer.

inline void to_json(nlohmann::json& j, const CalibrationEntry& e) {
    j = nlohmann::json{{"kernel", e.kernel},
                       {"host_id", e.host_id},
                       {"os", e.os},
                       {"counter_source", to_string(e.counter_source)},
                       {"cycles_per_iteration", e.cycles_per_iteration},
                       {"cycles_std", e.cycles_std},
                       {"flops_per_iteration", e.flops_per_iteration},
                       {"calibrated_at", e.calibrated_at}};
}

inline void from_json(const nlohmann::json& j, CalibrationEntry& e) {
    j.at("kernel").get_to(e.kernel);
    j.at("host_id").get_to(e.host_id);
    e.os = j.value("os", "");
    e.counter_source = j.at("counter_source").get<std::string>() == "hardware"
                           ? CounterSource::hardware
                           : CounterSource::estimated;
    j.at("cycles_per_iteration").get_to(e.cycles_per_iteration);
    e.cycles_std = j.value("cycles_std", 0.0);
    e.flops_per_iteration = j.value("flops_per_iteration", count_t{0});
    e.calibrated_at = j.value("calibrated_at", 0.0);
}

class CalibrationStore {
public:
    explicit CalibrationStore(std::string root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    std::string path() const { return root_ + "/calibration.json"; }

    std::optional<CalibrationEntry> lookup(const std::string& kernel) const {
        auto table = read_table();
        auto it = table.find(kernel);
        if (it == table.end()) return std::nullopt;
        return it.value().get<CalibrationEntry>();
    }

    // Lookup that enforces host identity: an entry produced elsewhere throws
    // rather than mis-scaling every emulated cycle count.
    CalibrationEntry require(const std::string& kernel,
                             const SystemInfo& sys) const {
        auto entry = lookup(kernel);
        if (!entry)
            throw CalibrationError("no calibration for kernel '" + kernel +
                                   "'; run calibrate first");
        if (entry->host_id != sys.host_id)
            throw StaleCalibrationError(
                "calibration for '" + kernel + "' was taken on host " +
                entry->host_id + " but this is " + sys.host_id +
                "; recalibrate on this machine");
        return *entry;
    }

    void put(const CalibrationEntry& e) {
        detail::ScopedFlock lock(root_ + "/calibration.lock");
        auto table = read_table();
        table[e.kernel] = e;
        detail::write_file_atomic(path(), table.dump(2) + "\n");
    }

private:
    nlohmann::json read_table() const {
        std::ifstream in(path());
        if (!in.is_open()) return nlohmann::json::object();
        try {
            auto j = nlohmann::json::parse(in);
            return j.is_object() ? j : nlohmann::json::object();
        } catch (const nlohmann::json::exception&) {
            return nlohmann::json::object();  // corrupt table: recalibrate
        }
    }

    std::string root_;
};

}  // namespace synmirror
