#pragma once

// Per-thread consumed-cycle measurement for calibration and the compute
// atom. Hardware counting uses a self-attached counter group; the estimated
// source multiplies thread CPU time by the nominal maximum frequency, which
// mirrors how estimated profiles were recorded.

#include <time.h>

#include <memory>

#include "synmirror/errors.hpp"
#include "synmirror/perf.hpp"
#include "synmirror/profile.hpp"

namespace synmirror {

class CycleMeter {
public:
    // Prefers hardware when available unless the caller pins the source.
    static CycleMeter create(std::uint64_t max_freq,
                             std::optional<CounterSource> pin = {}) {
        CycleMeter m;
        bool want_hw = pin ? (*pin == CounterSource::hardware) : PerfSession::available();
        if (want_hw) {
            m.session_ = std::make_shared<PerfSession>(0);  // this thread
            m.source_ = CounterSource::hardware;
            return m;
        }
        if (max_freq == 0)
            throw CapabilityError(
                "cannot estimate cycles: unknown max CPU frequency and no "
                "hardware counters");
        m.freq_ = max_freq;
        m.source_ = CounterSource::estimated;
        return m;
    }

    CounterSource source() const { return source_; }

    // Cumulative cycles consumed by the owning thread since creation.
    count_t read() const {
        if (source_ == CounterSource::hardware) return session_->read().cycles;
        timespec ts{};
        clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
        double cpu = double(ts.tv_sec) + double(ts.tv_nsec) * 1e-9;
        return static_cast<count_t>(cpu * double(freq_));
    }

private:
    std::shared_ptr<PerfSession> session_;
    std::uint64_t freq_ = 0;
    CounterSource source_ = CounterSource::estimated;
};

}  // namespace synmirror
