#pragma once

#include <cstdint>
#include <vector>

#include "elm/supernet.hpp"

namespace elm {

// exp(mean next-token cross-entropy) over every shifted position of every
// window: within a window of T tokens, positions 0..T-2 predict tokens
// 1..T-1. Windows are evaluated in the order given.
template <class Real>
double perplexity(const WeightsT<Real>& w, const SubNetworkConfig& theta,
                  const std::vector<TokenBatch>& evalset);

extern template double perplexity<float>(const WeightsT<float>&, const SubNetworkConfig&,
                                         const std::vector<TokenBatch>&);

} // namespace elm
