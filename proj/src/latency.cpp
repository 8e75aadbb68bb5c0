#include "elm/latency.hpp"

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "elm/error.hpp"

namespace elm {

namespace {

// Linear-interpolation percentile of an ascending sample, q in [0, 1].
double percentile(const std::vector<double>& sorted, double q) {
    const size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double pos = q * double(n - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= n) return sorted[n - 1];
    const double frac = pos - double(lo);
    return sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac;
}

} // namespace

template <class Real>
LatencyStats measure_latency(const WeightsT<Real>& w, int64_t T, int64_t reps, int64_t warmup) {
    if (reps < 3) throw ConfigError("latency reps must be at least 3, got " + std::to_string(reps));
    if (warmup < 0) throw ConfigError("latency warmup must be non-negative");
    if (T < 1 || T > w.cfg.max_seq_len)
        throw ConfigError("latency sequence length " + std::to_string(T) + " outside [1, " +
                          std::to_string(w.cfg.max_seq_len) + "]");

    TokenBatch tokens;
    tokens.batch = 1;
    tokens.seq = T;
    tokens.ids.resize(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i)
        tokens.ids[static_cast<size_t>(i)] =
            static_cast<int32_t>((i * 1009 + 13) % w.cfg.vocab_size);

    const SubNetworkConfig theta = w.theta_max();
    std::vector<double> ms;
    ms.reserve(static_cast<size_t>(reps));
    for (int64_t r = 0; r < warmup + reps; ++r) {
        Tape<Real> tape;
        const auto t0 = std::chrono::steady_clock::now();
        forward(tape, w, theta, tokens);
        const auto t1 = std::chrono::steady_clock::now();
        if (r >= warmup)
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());

    LatencyStats out;
    out.median_ms = percentile(ms, 0.5);
    out.p10_ms = percentile(ms, 0.1);
    out.p90_ms = percentile(ms, 0.9);
    out.reps = reps;
    return out;
}

template LatencyStats measure_latency<float>(const WeightsT<float>&, int64_t, int64_t, int64_t);

} // namespace elm
