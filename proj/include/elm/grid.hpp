#pragma once

#include <cstdint>
#include <vector>

#include "elm/space.hpp"
#include "elm/supernet.hpp"

namespace elm {

// One rejection-sampling hit: a sub-network whose parameter count landed in
// the bin, with its weight magnitude.
struct RetainedSample {
    SubNetworkConfig theta;
    int64_t params = 0;
    double magnitude = 0.0;
};

// One parameter-count interval [lo, hi) (the last bin is closed above) and
// the magnitude-maximal sub-network selected for it, if any draw landed.
struct GridBin {
    double lo = 0.0;
    double hi = 0.0;
    bool occupied = false;
    SubNetworkConfig theta;
    int64_t params = 0;
    double magnitude = 0.0;
    int64_t trials = 0;                  // draws spent on this bin
    std::vector<RetainedSample> samples; // kept only when requested
};

// The curated sub-network set: equally spaced parameter-count bins between
// the smallest and largest network in the space, each represented by its
// highest-magnitude in-bin sample.
struct CandidateGrid {
    int64_t params_min = 0;
    int64_t params_max = 0;
    std::vector<GridBin> bins;

    int64_t occupied_count() const;
    std::vector<SubNetworkConfig> occupied_thetas() const;
};

// L1 norm of exactly the scalars theta's slice reads: sliced embedding and
// positional columns, the retained blocks' active attention and FFN regions,
// final gain, and the LM head rows.
template <class Real>
double subnet_magnitude(const WeightsT<Real>& w, const SubNetworkConfig& theta);

// Rejection-samples each bin independently: uniform draws from the space are
// retained when their parameter count lands in the bin, until per_bin hits or
// max_trials draws are spent on that bin; the retained sample with the
// largest magnitude wins (first hit wins ties). Unfillable bins stay empty;
// a grid with no occupied bin at all is an error.
template <class Real>
CandidateGrid build_grid(const SearchSpace& space, const SuperNetConfig& cfg,
                         const WeightsT<Real>& w, int64_t bins, int64_t per_bin,
                         int64_t max_trials, Rng& rng, bool keep_samples = false);

// k selections uniform over the occupied bins: a random k-subset when
// k <= occupied count, independent draws otherwise.
std::vector<SubNetworkConfig> draw(const CandidateGrid& grid, Rng& rng, int64_t k);

extern template double subnet_magnitude<float>(const WeightsT<float>&,
                                               const SubNetworkConfig&);
extern template CandidateGrid build_grid<float>(const SearchSpace&, const SuperNetConfig&,
                                                const WeightsT<float>&, int64_t, int64_t,
                                                int64_t, Rng&, bool);

} // namespace elm
