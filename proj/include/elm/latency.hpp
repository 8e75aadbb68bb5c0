#pragma once

#include <cstdint>

#include "elm/supernet.hpp"

namespace elm {

// Wall-clock spread of repeated forward passes, milliseconds.
struct LatencyStats {
    double median_ms = 0.0;
    double p10_ms = 0.0;
    double p90_ms = 0.0;
    int64_t reps = 0; // timed passes (warmup excluded)
};

// Times batch-1 prefill forwards of length T through the network at its own
// full width (callers measure a sub-network by materializing it first).
// Runs warmup passes before the clock starts; reps must be at least 3 so the
// percentiles are meaningful. Token content is a fixed deterministic pattern.
template <class Real>
LatencyStats measure_latency(const WeightsT<Real>& w, int64_t T, int64_t reps, int64_t warmup);

extern template LatencyStats measure_latency<float>(const WeightsT<float>&, int64_t, int64_t,
                                                    int64_t);

} // namespace elm
